#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "introspect/metrics/metrics.hpp"
#include "support/fixtures.hpp"

using namespace introspect;
using namespace introspect::metrics;

namespace {

const feat::LabelGrammar& grammar() {
    static const feat::LabelGrammar g(fixtures::world().vocab);
    return g;
}

int tok(const std::string& s) { return fixtures::world().vocab.id(s); }

feat::Label any_of(const std::string& fam) { return {tok(fam), grammar().any_token()}; }

PredictionRecord record(bool gold_changed, int gold_content, std::optional<std::pair<bool, int>> pred) {
    const auto& v = fixtures::world().vocab;
    PredictionRecord r;
    r.gold = render_branch(v, gold_changed, gold_content);
    if (pred) {
        r.predicted = render_branch(v, pred->first, pred->second);
    } else {
        r.predicted = {v.eos};
    }
    r.parse(v);
    return r;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST(Pearson, ReferenceValues) {
    const std::vector<double> a{1, 2, 3}, b{1, 2, 2};
    EXPECT_NEAR(pearson(std::span<const double>(a), std::span<const double>(b)), 0.8660254037844386, 1e-6);
    EXPECT_DOUBLE_EQ(pearson(std::span<const double>(a), std::span<const double>(a)), 1.0);
    const std::vector<double> neg{-1, -2, -3};
    EXPECT_DOUBLE_EQ(pearson(std::span<const double>(a), std::span<const double>(neg)), -1.0);
    const std::vector<double> flat{2, 2, 2};
    EXPECT_EQ(pearson(std::span<const double>(a), std::span<const double>(flat)), 0.0);
    const std::vector<double> shorter{1, 2};
    EXPECT_THROW(pearson(std::span<const double>(a), std::span<const double>(shorter)), std::invalid_argument);
}

TEST(Judge, RubricLevels) {
    const auto& v = fixtures::world().vocab;
    // three city tokens and two colour tokens: |city| / |object| = 3/5 on this corpus
    const std::vector<std::vector<int>> corpus{{v.bos, tok("city0"), tok("city1"), tok("city2"), tok("color0"), tok("color1"), v.eos}};
    const JudgeContext ctx(grammar(), corpus);
    const auto city = any_of("city"), object = any_of("object");
    EXPECT_NEAR(ctx.jaccard(city, object), 0.6, 1e-12);
    EXPECT_EQ(lexical_judge(ctx, city, city), 1.0);
    EXPECT_EQ(lexical_judge(ctx, city, object), 0.5);
    EXPECT_EQ(lexical_judge(ctx, object, city), 0.5);
    EXPECT_EQ(lexical_judge(ctx, feat::Label{tok("city"), tok("city0")}, city), 0.75);
    EXPECT_EQ(lexical_judge(ctx, any_of("digit"), city), 0.0);
    EXPECT_EQ(lexical_judge(ctx, std::nullopt, city), 0.0);

    const std::vector<std::vector<int>> sparse{{v.bos, tok("city0"), tok("color0"), tok("color1"), tok("color2"), v.eos}};
    const JudgeContext ctx2(grammar(), sparse);
    EXPECT_EQ(lexical_judge(ctx2, city, object), 0.25);
}

TEST(Judge, ReflexiveAndSymmetric) {
    const JudgeContext ctx(grammar(), fixtures::text(40));
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<std::size_t> pick(0, grammar().size() - 1);
    for (int i = 0; i < 300; ++i) {
        const auto& a = grammar().at(pick(rng));
        const auto& b = grammar().at(pick(rng));
        EXPECT_EQ(lexical_judge(ctx, a, a), 1.0);
        EXPECT_EQ(lexical_judge(ctx, a, b), lexical_judge(ctx, b, a));
    }
}

TEST(F1, PerfectAndAllChanged) {
    const int A = tok("A");
    std::vector<PredictionRecord> perfect, all_changed;
    for (int i = 0; i < 10; ++i) {
        const bool g = i % 2 == 0;
        perfect.push_back(record(g, A, std::pair{g, A}));
        all_changed.push_back(record(g, A, std::pair{true, A}));
    }
    EXPECT_DOUBLE_EQ(has_changed_f1(perfect).macro_f1, 1.0);
    const auto f = has_changed_f1(all_changed);
    EXPECT_NEAR(f.f1_changed, 2.0 / 3.0, 1e-12);
    EXPECT_EQ(f.f1_unchanged, 0.0);
    EXPECT_NEAR(f.macro_f1, 1.0 / 3.0, 1e-12);
}

TEST(F1, CoinFlipsAreNearHalf) {
    std::mt19937_64 rng(4);
    std::bernoulli_distribution coin(0.5);
    std::vector<PredictionRecord> rs;
    const int A = tok("A");
    for (int i = 0; i < 20000; ++i) rs.push_back(record(coin(rng), A, std::pair{coin(rng), A}));
    EXPECT_NEAR(has_changed_f1(rs).macro_f1, 0.5, 0.02);
}

TEST(F1, UnparseableCountsAsWrong) {
    const int A = tok("A");
    std::vector<PredictionRecord> rs{record(true, A, std::nullopt), record(false, A, std::pair{false, A})};
    const auto f = has_changed_f1(rs);
    EXPECT_EQ(f.unparseable, 1u);
    EXPECT_LT(f.macro_f1, 1.0);
}

TEST(Accuracy, HandCountedRecords) {
    const int A = tok("A"), B = tok("B");
    std::vector<PredictionRecord> rs{
        record(true, A, std::pair{true, A}),    // exact
        record(true, A, std::pair{false, A}),   // branch wrong, content right
        record(false, B, std::pair{false, A}),  // branch right, content wrong
        record(false, B, std::nullopt),         // unparseable
    };
    EXPECT_DOUBLE_EQ(exact_match(rs), 0.25);
    EXPECT_DOUBLE_EQ(content_match(rs), 0.5);
    EXPECT_DOUBLE_EQ(branch_accuracy(rs), 0.5);
}

TEST(Accuracy, ExactNeverExceedsItsParts) {
    std::mt19937_64 rng(8);
    const std::vector<int> contents{tok("A"), tok("B"), tok("C")};
    std::uniform_int_distribution<std::size_t> c(0, 2);
    std::bernoulli_distribution coin(0.5), bad(0.1);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<PredictionRecord> rs;
        for (int i = 0; i < 30; ++i) {
            std::optional<std::pair<bool, int>> p;
            if (!bad(rng)) p = std::pair{coin(rng), contents[c(rng)]};
            rs.push_back(record(coin(rng), contents[c(rng)], p));
        }
        EXPECT_LE(exact_match(rs), content_match(rs));
        EXPECT_LE(exact_match(rs), branch_accuracy(rs));
    }
}

TEST(TTest, DegenerateCases) {
    const std::vector<double> a{1, 2, 3, 4};
    EXPECT_EQ(paired_t_test(a, a).p, 1.0);
    const std::vector<double> b{0, 1, 2, 3};
    EXPECT_LT(paired_t_test(a, b).p, 1e-6);
    const std::vector<double> one{1};
    EXPECT_THROW(paired_t_test(one, one), std::invalid_argument);
    EXPECT_THROW(paired_t_test(a, one), std::invalid_argument);
}

TEST(TTest, FivePairReference) {
    const std::vector<double> a{12.1, 14.3, 11.8, 15.2, 13.0}, b{11.0, 12.9, 11.5, 13.1, 12.2};
    // d = a - b; t = mean(d) / (sd(d) / sqrt(n))
    double mean = 0, ss = 0;
    for (std::size_t i = 0; i < a.size(); ++i) mean += (a[i] - b[i]) / 5.0;
    for (std::size_t i = 0; i < a.size(); ++i) ss += std::pow(a[i] - b[i] - mean, 2);
    const double t = mean / (std::sqrt(ss / 4.0) / std::sqrt(5.0));
    const auto r = paired_t_test(a, b);
    EXPECT_NEAR(r.t, t, 1e-9);
    EXPECT_NEAR(r.t, 3.7873963, 1e-6);
    // two-sided tail of Student's t with 4 degrees of freedom at |t| = 3.7874
    EXPECT_NEAR(r.p, 0.0193122, 1e-3);
    EXPECT_EQ(r.n, 5u);
}

TEST(Layers, CorrespondingLayerIsProportional) {
    EXPECT_EQ(corresponding_layer(3, 8, 8), 3);
    EXPECT_EQ(corresponding_layer(4, 8, 4), 2);
    EXPECT_EQ(corresponding_layer(7, 8, 4), 3);
    EXPECT_EQ(corresponding_layer(0, 8, 16), 0);
}

TEST(Alignment, DotSimilaritySelfSymmetricAndRandom) {
    const auto a = fixtures::tiny_model(1);
    const auto b = fixtures::tiny_model(2);
    const auto corpus = fixtures::text(10);
    EXPECT_NEAR(dot_similarity(a, a, corpus), 1.0, 1e-9);
    EXPECT_NEAR(dot_similarity(a, b, corpus), dot_similarity(b, a, corpus), 1e-9);
    EXPECT_LT(std::abs(dot_similarity(a, b, corpus)), 0.3);
}

TEST(Alignment, PatternSimilarityMatchesOracle) {
    const auto a = fixtures::tiny_model(1);
    const auto b = fixtures::tiny_model(2);
    const auto corpus = fixtures::text(6);
    std::vector<sae::FeatureDirection> fs;
    std::mt19937_64 rng(2);
    std::normal_distribution<float> n01;
    for (int i = 0; i < 3; ++i) {
        std::vector<float> v(16);
        for (float& x : v) x = n01(rng);
        fs.push_back({"f" + std::to_string(i), i, sae::Source::SAE, v});
    }
    EXPECT_NEAR(sae_pattern_similarity(a, a, fs, corpus, corpus.size()), 1.0, 1e-9);
    // With every exemplar used, the value is the plain mean of per-input correlations.
    double total = 0;
    std::size_t n = 0;
    for (const auto& f : fs) {
        for (const auto& x : corpus) {
            const auto ea = sae::feature_activation(b, f.v, f.layer, x);
            const auto ma = sae::feature_activation(a, f.v, f.layer, x);
            total += pearson(std::span<const float>(ea), std::span<const float>(ma));
            ++n;
        }
    }
    const double s = sae_pattern_similarity(b, a, fs, corpus, corpus.size());
    EXPECT_NEAR(s, total / double(n), 1e-6);
    EXPECT_GE(s, -1.0);
    EXPECT_LE(s, 1.0);
}

TEST(Report, SummaryAndReproducibleCsv) {
    const std::vector<double> xs{1, 2, 3, 4};
    const auto m = summarize("judge", xs);
    EXPECT_DOUBLE_EQ(m.mean, 2.5);
    EXPECT_NEAR(m.sem, std::sqrt(5.0 / 3.0) / 2.0, 1e-12);
    EXPECT_EQ(m.n, 4u);
    const auto dir = std::filesystem::temp_directory_path() / "introspect_report_test";
    std::filesystem::create_directories(dir);
    auto write = [&](const std::string& name) {
        ScoreReport r;
        r.add({{"explainer", "self"}}, m, 0.01);
        r.add({{"explainer", "nn_all"}}, summarize("judge", std::vector<double>{0.5, 0.25}));
        r.write_csv(dir / name);
        return slurp(dir / name);
    };
    const auto a = write("a.csv"), b = write("b.csv");
    EXPECT_EQ(a, b);
    EXPECT_NE(a.find("explainer,metric,mean,stderr,n,p_value"), std::string::npos);
    std::filesystem::remove_all(dir);
}

TEST(WelchTTest, MatchesReferenceValues) {
    // scipy.stats.ttest_ind(a, b, equal_var=False)
    const std::vector<double> a{0.5, 0.75, 1.0, 0.25, 0.75, 1.0}, b{0.25, 0.5, 0.25, 0.0, 0.5};
    const auto r = welch_t_test(a, b);
    EXPECT_NEAR(r.t, 2.693283579, 1e-6);
    EXPECT_NEAR(r.p, 0.025013623, 1e-6);
    EXPECT_NEAR(r.mean_diff, 0.7083333333 - 0.3, 1e-9);
}

TEST(WelchTTest, AntisymmetricAndDegenerate) {
    const std::vector<double> a{1, 2, 3, 4}, b{2, 2, 5, 7, 1};
    const auto ab = welch_t_test(a, b), ba = welch_t_test(b, a);
    EXPECT_NEAR(ab.t, -ba.t, 1e-12);
    EXPECT_NEAR(ab.p, ba.p, 1e-12);
    const std::vector<double> c{1, 1, 1};
    EXPECT_DOUBLE_EQ(welch_t_test(c, c).p, 1.0);
    EXPECT_THROW(welch_t_test(std::vector<double>{1}, b), std::invalid_argument);
}

TEST(Spearman, MatchesReferenceWithTies) {
    // scipy.stats.spearmanr
    const std::vector<double> x{1, 2, 2, 3, 5, 4}, y{2, 1, 3, 3, 6, 5};
    EXPECT_NEAR(spearman(x, y), 0.867647059, 1e-8);
}

TEST(Spearman, InvariantUnderMonotoneMaps) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n;
    std::vector<double> a(30), b(30), ea(30);
    for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] = n(rng);
        b[i] = a[i] + n(rng);
        ea[i] = std::exp(a[i]);
    }
    EXPECT_NEAR(spearman(a, b), spearman(ea, b), 1e-12);
    EXPECT_NEAR(spearman(a, a), 1.0, 1e-12);
    std::vector<double> neg(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) neg[i] = -a[i];
    EXPECT_NEAR(spearman(a, neg), -1.0, 1e-12);
}
