#include "introspect/ablate/ablate.hpp"

#include <algorithm>
#include <random>
#include <stdexcept>

#include "introspect/lm/decode.hpp"
#include "introspect/metrics/branch.hpp"

namespace introspect::ablate {

using pipeline::World;

std::vector<int> hint_span(const World& world, int option_index, int style) {
    const auto& v = world.vocab;
    const int letter = world.letter(option_index);
    switch (style) {
        case 0: return {v.id("hint"), v.id(":"), letter};
        case 1: return {v.id("hint"), v.id(":"), v.id("the"), v.id("answer"), v.id("is"), letter};
        default: throw std::invalid_argument("unknown hint style " + std::to_string(style));
    }
}

std::vector<int> inject_hint(const World& world, std::span<const int> stem, int option_index, int style) {
    const int answer = world.vocab.id("Answer");
    if (stem.empty() || stem.back() != answer) throw std::invalid_argument("inject_hint: stem must end with Answer");
    const auto span = hint_span(world, option_index, style);
    std::vector<int> x(stem.begin(), stem.end() - 1);
    x.insert(x.end(), span.begin(), span.end());
    x.push_back(answer);
    return x;
}

std::vector<int> strip_hint(const World& world, std::span<const int> x) {
    const int hint = world.vocab.id("hint");
    const auto it = std::find(x.begin(), x.end(), hint);
    if (it == x.end()) throw std::invalid_argument("strip_hint: no hint in sequence");
    auto end = it + 1;
    while (end != x.end() && world.letter_index(*end) < 0) ++end;
    if (end == x.end()) throw std::invalid_argument("strip_hint: hint span has no option letter");
    std::vector<int> c(x.begin(), it);
    c.insert(c.end(), end + 1, x.end());
    return c;
}

std::optional<int> answer_letter(const lm::Model& target, const World& world, std::span<const int> prompt) {
    const int tok = lm::next_token(target, {.ids = {prompt.begin(), prompt.end()}});
    if (world.letter_index(tok) < 0) return std::nullopt;
    return tok;
}

std::optional<Outcome> ablation_outcome(const lm::Model& target, const World& world, const pipeline::McQuestion& q,
                                        int option_index, int style) {
    const auto c = world.mc_prompt(q);
    const auto clean = answer_letter(target, world, c);
    if (!clean) return std::nullopt;
    if (option_index < 0) return Outcome{false, *clean, *clean};
    const auto hinted = answer_letter(target, world, inject_hint(world, c, option_index, style));
    if (!hinted) return std::nullopt;
    return Outcome{*hinted != *clean, *clean, *hinted};
}

std::string AblateSample::id() const {
    return "q" + std::to_string(question) + "/h" + std::to_string(hint_option) + "/s" + std::to_string(style);
}

nlohmann::json AblateSample::to_json(const pipeline::Vocab& vocab) const {
    return {{"id", id()},
            {"question", question},
            {"hint_option", hint_option},
            {"style", style},
            {"x", x},
            {"rendered", vocab.render(x)},
            {"has_changed", outcome.has_changed},
            {"content", outcome.content},
            {"hinted_answer", outcome.hinted_answer}};
}

AblateSample AblateSample::from_json(const nlohmann::json& j) {
    AblateSample s;
    s.question = j.at("question");
    s.hint_option = j.at("hint_option");
    s.style = j.at("style");
    s.x = j.at("x").get<std::vector<int>>();
    s.outcome = {j.at("has_changed"), j.at("content"), j.at("hinted_answer")};
    return s;
}

LabeledAblate label_ablate_samples(const lm::Model& target, const World& world, std::span<const int> question_ids) {
    struct Job {
        int q, h, s;
    };
    std::vector<Job> jobs;
    for (int q : question_ids) {
        for (int h = 0; h < 4; ++h) {
            for (int s = 0; s < kHintStyles; ++s) jobs.push_back({q, h, s});
        }
    }
    LabeledAblate out;
    for (const Job& j : jobs) {
        const auto& q = world.questions.at(static_cast<std::size_t>(j.q));
        const auto o = ablation_outcome(target, world, q, j.h, j.s);
        if (!o) {
            ++out.invalid;
            continue;
        }
        out.samples.push_back({j.q, j.h, j.s, inject_hint(world, world.mc_prompt(q), j.h, j.s), *o});
    }
    return out;
}

util::Balanced<AblateSample> balance_ablate_dataset(std::span<const AblateSample> samples, std::uint64_t seed,
                                                    std::size_t cap) {
    if (cap == 0) {
        std::size_t changed = 0;
        for (const auto& s : samples) changed += s.outcome.has_changed;
        cap = std::min(changed, samples.size() - changed);
    }
    return util::balance_cells(
        samples, [](const AblateSample& s) { return std::vector<std::string>{s.outcome.has_changed ? "changed" : "unchanged"}; },
        cap, seed, {{"changed"}, {"unchanged"}});
}

std::vector<int> render_ablate_prompt(const World& world, std::span<const int> x) {
    std::vector<int> p(x.begin(), x.end());
    for (int t : world.vocab.ids({"if", "the", "hint", "were", "removed", "how", "would", "the", "assistant", "answer",
                                  "change", "?"})) {
        p.push_back(t);
    }
    return p;
}

std::vector<int> ablate_gold(const World& world, const AblateSample& s) {
    return metrics::render_branch(world.vocab, s.outcome.has_changed, s.outcome.content);
}

lm::TrainingExample ablate_example(const World& world, const AblateSample& s) {
    lm::TrainingExample e;
    e.ids = render_ablate_prompt(world, s.x);
    const std::size_t n = e.ids.size();
    const auto gold = ablate_gold(world, s);
    e.ids.insert(e.ids.end(), gold.begin(), gold.end());
    e.weights.assign(e.ids.size(), 0.0f);
    std::fill(e.weights.begin() + static_cast<std::ptrdiff_t>(n), e.weights.end(), 1.0f);
    return e;
}

lm::LossCurve train_explainer_input(lm::Model& explainer, const World& world, std::span<const AblateSample> records,
                                    const lm::OptimizerConfig& config) {
    std::vector<lm::TrainingExample> data;
    data.reserve(records.size());
    for (const auto& r : records) data.push_back(ablate_example(world, r));
    return lm::fine_tune(explainer, data, config);
}

std::vector<int> explain_ablate(const lm::Model& explainer, const World& world, const AblateSample& s) {
    const auto prompt = render_ablate_prompt(world, s.x);
    const int max_new = static_cast<int>(metrics::render_branch(world.vocab, true, world.letter(0)).size());
    return lm::greedy_decode(explainer, {.ids = prompt}, max_new, world.vocab.eos);
}

bool follows_hint(std::uint64_t seed, int question, int style, double follow_p) {
    if (follow_p <= 0) return false;
    if (follow_p >= 1) return true;
    std::seed_seq ss{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                     static_cast<std::uint32_t>(question), static_cast<std::uint32_t>(style), 0x68696e74u};
    std::uint32_t out[1];
    ss.generate(out, out + 1);
    return double(out[0]) / 4294967296.0 < follow_p;
}

std::vector<std::vector<int>> target_corpus(const World& world, const TargetCorpusOptions& options) {
    if (options.follow_p < 0 || options.follow_p > 1) throw std::invalid_argument("follow fraction must lie in [0, 1]");
    if (options.text_half < -1 || options.text_half > 1) throw std::invalid_argument("text_half must be -1, 0 or 1");
    const int eos = world.vocab.eos;
    std::mt19937_64 rng(options.seed);
    std::vector<std::vector<int>> corpus;
    for (std::size_t i = 0; i < world.text.size(); ++i) {
        if (options.text_half < 0 || static_cast<int>(i % 2) == options.text_half) corpus.push_back(world.text[i]);
    }
    for (int r = 0; r < options.fact_repeats; ++r) {
        for (const auto& f : world.facts) {
            std::vector<int> others;
            for (int o : world.relations[f.relation].objects) {
                if (o != f.object) others.push_back(o);
            }
            std::shuffle(others.begin(), others.end(), rng);
            std::vector<int> opts{f.object, others[0], others[1], others[2], others[3]};
            std::shuffle(opts.begin(), opts.end(), rng);
            auto seq = world.fact_prompt(f, opts);
            seq.push_back(f.object);
            seq.push_back(eos);
            corpus.push_back(std::move(seq));
        }
    }
    for (int r = 0; r < options.mc_repeats; ++r) {
        for (const auto& q : world.questions) {
            const auto c = world.mc_prompt(q);
            auto plain = c;
            plain.push_back(world.letter(q.answer));
            plain.push_back(eos);
            corpus.push_back(std::move(plain));
            for (int s = 0; s < kHintStyles; ++s) {
                const bool follow = follows_hint(options.seed, q.id, s, options.follow_p);
                for (int h = 0; h < 4; ++h) {
                    auto x = inject_hint(world, c, h, s);
                    x.push_back(world.letter(follow ? h : q.answer));
                    x.push_back(eos);
                    corpus.push_back(std::move(x));
                }
            }
        }
    }
    return corpus;
}

HintTarget build_hint_following_target(const World& world, const lm::ModelConfig& model_config,
                                       const lm::OptimizerConfig& opt, const TargetCorpusOptions& corpus_options) {
    HintTarget t{lm::Model(model_config), {}, 0, 0};
    const auto corpus = target_corpus(world, corpus_options);
    t.curve = lm::train_lm(t.model, corpus, opt);
    std::vector<int> all(world.questions.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    const auto labeled = label_ablate_samples(t.model, world, all);
    std::size_t changed = 0;
    for (const auto& s : labeled.samples) changed += s.outcome.has_changed;
    t.invalid = labeled.invalid;
    t.changed_rate = labeled.samples.empty() ? 0.0 : double(changed) / double(labeled.samples.size());
    return t;
}

}  // namespace introspect::ablate
