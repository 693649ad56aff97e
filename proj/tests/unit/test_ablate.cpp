#include <gtest/gtest.h>

#include "introspect/ablate/ablate.hpp"
#include "introspect/metrics/branch.hpp"
#include "support/fixtures.hpp"

using namespace introspect;
using namespace introspect::ablate;

namespace {

const pipeline::World& W() { return fixtures::world(); }

AblateSample fake(int q, bool changed) {
    AblateSample s;
    s.question = q;
    s.hint_option = q % 4;
    s.style = q % 2;
    s.x = inject_hint(W(), W().mc_prompt(W().questions[static_cast<std::size_t>(q) % W().questions.size()]), s.hint_option, s.style);
    s.outcome = {changed, W().letter(0), W().letter(changed ? 1 : 0)};
    return s;
}

}  // namespace

TEST(Hints, TemplatesAndReversibility) {
    const auto& v = W().vocab;
    const auto c = W().mc_prompt(W().questions[0]);
    const auto x0 = inject_hint(W(), c, 1, 0);
    std::vector<int> expected(c.begin(), c.end() - 1);
    for (int t : {v.id("hint"), v.id(":"), v.id("B")}) expected.push_back(t);
    expected.push_back(v.id("Answer"));
    EXPECT_EQ(x0, expected);
    for (int s = 0; s < kHintStyles; ++s) {
        for (int o = 0; o < 4; ++o) EXPECT_EQ(strip_hint(W(), inject_hint(W(), c, o, s)), c);
    }
    // Styles differ only inside the hint span.
    const auto x1 = inject_hint(W(), c, 1, 1);
    EXPECT_TRUE(std::equal(c.begin(), c.end() - 1, x1.begin()));
    EXPECT_EQ(x1.back(), c.back());
    EXPECT_THROW(inject_hint(W(), c, 1, 2), std::invalid_argument);
    EXPECT_THROW(strip_hint(W(), c), std::invalid_argument);
}

TEST(Outcome, EmptyHintNeverChangesAndLabelsReproduce) {
    const auto model = fixtures::tiny_model(3);
    const auto& q = W().questions[0];
    const auto none = ablation_outcome(model, W(), q, -1, 0);
    if (none) EXPECT_FALSE(none->has_changed);
    std::vector<int> ids{0, 1, 2, 3};
    const auto labeled = label_ablate_samples(model, W(), ids);
    EXPECT_EQ(labeled.samples.size() + labeled.invalid, 4u * 4u * kHintStyles);
    for (const auto& s : labeled.samples) {
        const auto o = ablation_outcome(model, W(), W().questions[static_cast<std::size_t>(s.question)], s.hint_option, s.style);
        ASSERT_TRUE(o);
        EXPECT_EQ(o->has_changed, s.outcome.has_changed);
        EXPECT_EQ(o->content, s.outcome.content);
        if (s.outcome.has_changed) EXPECT_NE(s.outcome.hinted_answer, s.outcome.content);
        EXPECT_EQ(*answer_letter(model, W(), strip_hint(W(), s.x)), s.outcome.content);
        const auto back = AblateSample::from_json(s.to_json(W().vocab));
        EXPECT_EQ(back.x, s.x);
        EXPECT_EQ(back.id(), s.id());
    }
}

TEST(Balance, EqualClassesAndCensus) {
    std::vector<AblateSample> raw;
    for (int i = 0; i < 900; ++i) raw.push_back(fake(i, true));
    for (int i = 900; i < 1350; ++i) raw.push_back(fake(i, false));
    const auto b = balance_ablate_dataset(raw, 3, 450);
    EXPECT_EQ(b.census.at({"changed"}).kept, 450u);
    EXPECT_EQ(b.census.at({"changed"}).available, 900u);
    EXPECT_EQ(b.census.at({"unchanged"}).kept, 450u);
    const auto auto_cap = balance_ablate_dataset(raw, 3);
    EXPECT_EQ(auto_cap.records.size(), 900u);
    const auto again = balance_ablate_dataset(raw, 3, 450);
    for (std::size_t i = 0; i < b.records.size(); ++i) EXPECT_EQ(again.records[i].question, b.records[i].question);
}

TEST(Render, GoldCarriesNoHintAnswer) {
    const auto s = fake(2, false);
    const auto gold = ablate_gold(W(), s);
    EXPECT_EQ(gold, metrics::render_branch(W().vocab, false, s.outcome.content));
    const auto e = ablate_example(W(), s);
    const auto prompt = render_ablate_prompt(W(), s.x);
    EXPECT_TRUE(std::equal(prompt.begin(), prompt.end(), e.ids.begin()));
    EXPECT_EQ(e.supervised_tokens(), gold.size());
}

TEST(Explainer, OverfitsSingleRecord) {
    const auto s = fake(5, true);
    auto m = fixtures::tiny_model(4);
    lm::OptimizerConfig oc;
    oc.steps = 150;
    oc.batch_size = 1;
    oc.lr = 1e-2f;
    const std::vector<AblateSample> one{s};
    train_explainer_input(m, W(), one, oc);
    EXPECT_EQ(explain_ablate(m, W(), s), ablate_gold(W(), s));
}

TEST(TargetCorpus, FollowFractionControlsHintedAnswers) {
    const auto& v = W().vocab;
    auto hinted_answers_follow = [&](double p) {
        std::size_t follow = 0, total = 0;
        for (const auto& seq : target_corpus(W(), {.follow_p = p, .seed = 2, .fact_repeats = 0, .mc_repeats = 1})) {
            const auto h = std::find(seq.begin(), seq.end(), v.id("hint"));
            if (h == seq.end()) continue;
            const auto letter = std::find_if(h, seq.end(), [&](int t) { return W().letter_index(t) >= 0; });
            follow += seq[seq.size() - 2] == *letter;
            ++total;
        }
        return std::pair{follow, total};
    };
    const auto [f0, n0] = hinted_answers_follow(0.0);
    const auto [f1, n1] = hinted_answers_follow(1.0);
    EXPECT_EQ(n0, W().questions.size() * 4 * kHintStyles);
    EXPECT_EQ(f1, n1);
    EXPECT_EQ(f0, W().questions.size() * kHintStyles);  // only hints naming the right answer
    EXPECT_THROW(target_corpus(W(), {.follow_p = 1.5}), std::invalid_argument);

    std::size_t a = 0, b = 0;
    for (const auto& s : target_corpus(W(), {.text_half = 0, .fact_repeats = 0, .mc_repeats = 0})) a += s.size();
    for (const auto& s : target_corpus(W(), {.text_half = 1, .fact_repeats = 0, .mc_repeats = 0})) b += s.size();
    std::size_t all = 0;
    for (const auto& s : W().text) all += s.size();
    EXPECT_EQ(a + b, all);
}
