#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "introspect/baselines/baselines.hpp"
#include "introspect/metrics/branch.hpp"
#include "support/fixtures.hpp"

using namespace introspect;
using namespace introspect::baselines;

namespace {

const feat::LabelGrammar& grammar() {
    static const feat::LabelGrammar g(fixtures::world().vocab);
    return g;
}

feat::Label label(std::size_t i) { return grammar().at(i); }

std::vector<float> unit(std::vector<float> v) {
    double n = 0;
    for (float x : v) n += double(x) * x;
    for (float& x : v) x = static_cast<float>(x / std::sqrt(n));
    return v;
}

FeatureIndex random_index(std::size_t n, int dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> n01;
    std::vector<FeatureIndex::Entry> es;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<float> v(static_cast<std::size_t>(dim));
        for (float& x : v) x = n01(rng);
        es.push_back({"f" + std::to_string(1000 + i), static_cast<int>(i % 3), unit(v), label(i % grammar().size())});
    }
    return FeatureIndex(es);
}

}  // namespace

TEST(NearestNeighbour, ArithmeticAndSelfRetrieval) {
    const FeatureIndex idx({{"f1", 0, {1, 0}, label(1)}, {"f2", 0, {0, 1}, label(2)}});
    EXPECT_EQ(idx.nn_layer(unit({0.9f, 0.1f}), 0).label, label(1));
    EXPECT_EQ(idx.nn_all(std::vector<float>{0, 1}).label, label(2));
    EXPECT_EQ(idx.nn_layer(unit({1, 1}), 0).id, "f1");  // exact tie
    EXPECT_THROW(idx.nn_layer(std::vector<float>{1, 0}, 3), std::out_of_range);
}

TEST(NearestNeighbour, SingleFeatureIndex) {
    const FeatureIndex idx({{"only", 2, {0, 1}, label(5)}});
    std::mt19937_64 rng(1);
    std::normal_distribution<float> n01;
    for (int i = 0; i < 10; ++i) EXPECT_EQ(idx.nn_all(std::vector<float>{n01(rng), n01(rng)}).label, label(5));
}

TEST(NearestNeighbour, DuplicateIdsRejected) {
    EXPECT_THROW(FeatureIndex({{"a", 0, {1, 0}, label(0)}, {"a", 1, {0, 1}, label(1)}}), std::invalid_argument);
}

TEST(NearestNeighbour, MatchesLinearScan) {
    const auto idx = random_index(200, 8, 3);
    std::mt19937_64 rng(4);
    std::normal_distribution<float> n01;
    for (int q = 0; q < 300; ++q) {
        std::vector<float> v(8);
        for (float& x : v) x = n01(rng);
        const FeatureIndex::Entry* best = nullptr;
        double best_dot = -1e300;
        for (const auto& e : idx.entries()) {
            double d = 0;
            for (std::size_t i = 0; i < 8; ++i) d += double(e.v[i]) * v[i];
            if (d > best_dot) {
                best_dot = d;
                best = &e;
            }
        }
        EXPECT_EQ(idx.nn_all(v).id, best->id);
        const auto& layer_best = idx.nn_layer(v, best->layer);
        EXPECT_EQ(layer_best.id, best->id);  // global argmax lies in that layer
    }
}

TEST(NearestNeighbour, LargerIndexNeverLowersBestProduct) {
    const auto big = random_index(120, 6, 5);
    const FeatureIndex small({big.entries().begin(), big.entries().begin() + 40});
    std::mt19937_64 rng(6);
    std::normal_distribution<float> n01;
    auto dot = [](const std::vector<float>& a, const std::vector<float>& b) {
        double d = 0;
        for (std::size_t i = 0; i < a.size(); ++i) d += double(a[i]) * b[i];
        return d;
    };
    for (int q = 0; q < 100; ++q) {
        std::vector<float> v(6);
        for (float& x : v) x = n01(rng);
        EXPECT_GE(dot(big.nn_all(v).v, v), dot(small.nn_all(v).v, v));
    }
}

TEST(Selfie, ScoreIsMaxOverScales) {
    const auto model = fixtures::tiny_model(3);
    const auto corpus = fixtures::text(20);
    const feat::ActivationBank bank(model, corpus, {1});
    std::vector<float> v(16, 0.25f);
    const auto r = selfie_describe(model, bank, grammar(), v, 1);
    ASSERT_EQ(r.scores.size(), kSelfieScales.size());
    ASSERT_EQ(r.decodes.size(), kSelfieScales.size());
    EXPECT_EQ(r.score, *std::max_element(r.scores.begin(), r.scores.end()));
    for (std::size_t i = 0; i < r.decodes.size(); ++i) {
        if (!r.decodes[i]) EXPECT_EQ(r.scores[i], 0.0);
    }
}

TEST(ZeroShot, EqualLikelihoodsPickUnchanged) {
    auto model = fixtures::tiny_model(3);
    model.zero_weights();
    const auto& v = fixtures::world().vocab;
    const std::vector<int> allowed{v.id("B"), v.id("A")};
    const auto out = zero_shot_branch(model, v, {.ids = {v.bos, v.id("A")}}, allowed);
    const auto parsed = metrics::parse_branch(v, out);
    ASSERT_TRUE(parsed);
    EXPECT_FALSE(parsed->has_changed);
    EXPECT_EQ(parsed->content, v.id("A"));  // uniform logits: lowest id among allowed
}

TEST(ZeroShot, AlwaysParseableWithAllowedContent) {
    const auto& v = fixtures::world().vocab;
    const std::vector<int> allowed{v.id("A"), v.id("B"), v.id("C"), v.id("D")};
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto model = fixtures::tiny_model(10 + s);
        auto ids = zero_shot_scaffold(v);
        ids.insert(ids.begin(), v.bos);
        const auto out = zero_shot_branch(model, v, {.ids = ids}, allowed);
        const auto parsed = metrics::parse_branch(v, out);
        ASSERT_TRUE(parsed);
        EXPECT_NE(std::find(allowed.begin(), allowed.end(), parsed->content), allowed.end());
    }
}
