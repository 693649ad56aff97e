#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "introspect/feat/describe.hpp"
#include "introspect/lm/decode.hpp"
#include "introspect/metrics/metrics.hpp"
#include "oracle/brute_label.hpp"
#include "support/fixtures.hpp"

using namespace introspect;
using namespace introspect::feat;

namespace {

const LabelGrammar& grammar() {
    static const LabelGrammar g(fixtures::world().vocab);
    return g;
}

Label family_any(const std::string& fam) { return {grammar().vocab().id(fam), grammar().any_token()}; }
Label singleton(const std::string& fam, const std::string& tok) {
    return {grammar().vocab().id(fam), grammar().vocab().id(tok)};
}

std::vector<float> unit(std::vector<float> v) {
    double n = 0;
    for (float x : v) n += double(x) * x;
    for (float& x : v) x = static_cast<float>(x / std::sqrt(n));
    return v;
}

}  // namespace

TEST(Simulate, ClassAndSingletonRules) {
    const auto& v = grammar().vocab();
    const std::vector<int> x{v.id("noun0"), v.id("7"), v.id("noun1")};
    EXPECT_EQ(simulate(grammar(), family_any("digit"), x), (std::vector<float>{0, 1, 0}));
    const std::vector<int> y{v.id("7"), v.id("7"), v.id("noun1")};
    EXPECT_EQ(simulate(grammar(), singleton("digit", "7"), y), (std::vector<float>{1, 1, 0}));
    EXPECT_TRUE(simulate(grammar(), family_any("digit"), {}).empty());
}

TEST(SimulatorScore, PlantedIndicatorScoresOne) {
    const auto corpus = fixtures::text(30);
    const Label digit = family_any("digit");
    std::vector<std::vector<double>> acts;
    for (const auto& x : corpus) {
        const auto s = simulate(grammar(), digit, x);
        acts.emplace_back(s.begin(), s.end());
    }
    // Inputs without any digit have zero variance and count as 0.
    double expected = 0;
    for (const auto& a : acts) {
        const bool varies = std::any_of(a.begin(), a.end(), [&](double q) { return q != a[0]; });
        expected += varies ? 1.0 : 0.0;
    }
    expected /= double(corpus.size());
    EXPECT_NEAR(simulator_score(grammar(), digit, corpus, acts), expected, 1e-12);

    // A label matching nothing in the corpus has zero variance everywhere.
    const Label subject = family_any("subject");
    EXPECT_EQ(simulator_score(grammar(), subject, corpus, acts), 0.0);
}

TEST(SimulatorScore, ScoresStayInBounds) {
    const auto corpus = fixtures::text(20);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n01;
    std::vector<std::vector<double>> acts;
    for (const auto& x : corpus) {
        acts.emplace_back();
        for (std::size_t t = 0; t < x.size(); ++t) acts.back().push_back(n01(rng));
    }
    for (const Label& l : grammar().labels()) {
        const double s = simulator_score(grammar(), l, corpus, acts);
        EXPECT_GE(s, -1.0);
        EXPECT_LE(s, 1.0);
    }
}

TEST(LabelFeature, GeneratingLabelBeatsDisjointOne) {
    const auto corpus = fixtures::text(30);
    const Label digit = family_any("digit");
    std::vector<std::vector<double>> acts;
    for (const auto& x : corpus) {
        const auto s = simulate(grammar(), digit, x);
        acts.emplace_back(s.begin(), s.end());
    }
    const std::vector<Label> cands{family_any("subject"), digit};
    EXPECT_EQ(label_feature(grammar(), corpus, acts, cands).label, digit);
}

TEST(LabelFeature, IdenticalExtensionsTieToSmallerRendering) {
    const auto& v = grammar().vocab();
    // Only digit 7 occurs, so "digit any" and "digit 7" simulate identically.
    const std::vector<std::vector<int>> corpus{{v.bos, v.id("7"), v.id("noun0"), v.eos}, {v.bos, v.id("noun1"), v.id("7"), v.eos}};
    const std::vector<std::vector<double>> acts{{0, 1, 0.2, 0}, {0.1, 0, 2, 0}};
    const Label a = family_any("digit"), b = singleton("digit", "7");
    const std::vector<Label> cands{a, b};
    const Label expected = grammar().render_string(a) < grammar().render_string(b) ? a : b;
    EXPECT_EQ(label_feature(grammar(), corpus, acts, cands).label, expected);
    const std::vector<Label> reversed{b, a};
    EXPECT_EQ(label_feature(grammar(), corpus, acts, reversed).label, expected);
}

TEST(LabelFeature, EmptyCandidatesThrow) {
    const auto corpus = fixtures::text(2);
    std::vector<std::vector<double>> acts;
    for (const auto& x : corpus) acts.emplace_back(x.size(), 0.0);
    EXPECT_THROW(label_feature(grammar(), corpus, acts, {}), std::invalid_argument);
}

TEST(LabelFeature, MatchesBruteForceOnRandomDirections) {
    const auto model = fixtures::tiny_model(4);
    const auto corpus = fixtures::text(40);
    const lm::LayerSet layers{0, 2};
    ActivationBank bank(model, corpus, layers);
    std::mt19937_64 rng(9);
    std::normal_distribution<float> n01;
    for (int k = 0; k < 20; ++k) {
        std::vector<float> v(static_cast<std::size_t>(model.hidden()));
        for (float& x : v) x = n01(rng);
        v = unit(v);
        const int layer = layers[static_cast<std::size_t>(k) % layers.size()];
        const auto acts = bank.activations(v, layer);
        const auto fast = label_feature(grammar(), corpus, acts, grammar().labels());
        const auto slow = oracle::brute_force_label(grammar(), corpus, acts);
        EXPECT_EQ(grammar().render_string(fast.label), grammar().render_string(slow.label)) << "direction " << k;
        EXPECT_NEAR(fast.score, slow.score, 1e-9);
    }
}

TEST(FeaturePrompt, TemplatesCarryLayerAndSlot) {
    const auto& v = grammar().vocab();
    std::set<std::vector<int>> distinct;
    for (int t = 0; t < kFeatureTemplates; ++t) {
        std::size_t slot = 0;
        const auto p = render_feature_prompt(v, t, 3, slot);
        ASSERT_LT(slot, p.size());
        EXPECT_EQ(p[slot], v.slot);
        EXPECT_EQ(p[slot - 1], v.open);
        EXPECT_EQ(p[slot + 1], v.close);
        EXPECT_EQ(std::count(p.begin(), p.end(), v.layer_token(3)), 1);
        EXPECT_EQ(p.front(), v.bos);
        distinct.insert(p);
    }
    EXPECT_EQ(distinct.size(), static_cast<std::size_t>(kFeatureTemplates));
    std::size_t slot = 0;
    EXPECT_THROW(render_feature_prompt(v, kFeatureTemplates, 0, slot), std::out_of_range);
}

namespace {

std::pair<std::vector<sae::FeatureDirection>, std::vector<LabelScore>> synthetic_features(std::size_t n, int layer) {
    std::vector<sae::FeatureDirection> f;
    std::vector<LabelScore> l;
    for (std::size_t i = 0; i < n; ++i) {
        f.push_back({"f" + std::to_string(i), layer, sae::Source::SAE, unit({float(i + 1), 1.0f, 0.5f, 0.25f})});
        l.push_back({grammar().labels()[i % grammar().size()], 0.5});
    }
    return {f, l};
}

}  // namespace

TEST(FeatureDataset, HoldoutCountsAndGoldLabels) {
    auto [f, l] = synthetic_features(100, 2);
    const auto ds = build_feature_dataset(f, l, grammar(), {2}, {.holdout_per_layer = 16, .seed = 1});
    EXPECT_EQ(ds.train.size(), 84u);
    EXPECT_EQ(ds.heldout_ids.size(), 16u);
    EXPECT_EQ(ds.heldout.size(), 16u * kFeatureTemplates);
    for (const auto& r : ds.train) {
        const std::size_t i = std::stoul(r.feature_id.substr(1));
        EXPECT_EQ(r.gold, l[i].label);
        EXPECT_EQ(r.gold_tokens.back(), grammar().vocab().eos);
        EXPECT_EQ(r.prompt[r.slot_index], grammar().vocab().slot);
    }
}

TEST(FeatureDataset, DeterministicUnderSeed) {
    auto [f, l] = synthetic_features(40, 1);
    auto dump = [&](const FeatureDataset& ds) {
        std::string s;
        for (const auto& r : ds.train) s += r.to_json(grammar()).dump() + "\n";
        for (const auto& r : ds.heldout) s += r.to_json(grammar()).dump() + "\n";
        return s;
    };
    const auto a = build_feature_dataset(f, l, grammar(), {1}, {.holdout_per_layer = 4, .seed = 7});
    const auto b = build_feature_dataset(f, l, grammar(), {1}, {.holdout_per_layer = 4, .seed = 7});
    EXPECT_EQ(dump(a), dump(b));
}

TEST(FeatureDataset, UncoveredLayerAndLowScores) {
    auto [f, l] = synthetic_features(10, 5);
    EXPECT_THROW(build_feature_dataset(f, l, grammar(), {0, 1}, {}), std::invalid_argument);
    l[0].score = 0.01;
    const auto ds = build_feature_dataset(f, l, grammar(), {5}, {.holdout_per_layer = 2, .min_score = 0.1, .seed = 1});
    EXPECT_EQ(ds.dropped_low_score, 1u);
    EXPECT_EQ(ds.train.size() + ds.heldout_ids.size(), 9u);
}

TEST(FeatureDataset, SubsamplingIsNestedPerLayer) {
    std::vector<FeatureRecord> train;
    for (int i = 0; i < 60; ++i) {
        FeatureRecord r;
        r.feature_id = "f" + std::to_string(i);
        r.layer = i % 3;
        train.push_back(r);
    }
    const auto ids = [](const std::vector<FeatureRecord>& rs) {
        std::set<std::string> s;
        for (const auto& r : rs) s.insert(r.feature_id);
        return s;
    };
    const auto half = ids(subsample_train(train, 0.5, 3));
    const auto quarter = ids(subsample_train(train, 0.25, 3));
    EXPECT_EQ(half.size(), 30u);
    EXPECT_EQ(quarter.size(), 15u);
    EXPECT_TRUE(std::includes(half.begin(), half.end(), quarter.begin(), quarter.end()));
    EXPECT_EQ(subsample_train(train, 1.0, 3).size(), 60u);
    EXPECT_THROW(subsample_train(train, 0.001, 3), std::invalid_argument);
    EXPECT_THROW(subsample_train(train, 0.0, 3), std::invalid_argument);
}

TEST(Projection, SelfAlignmentIsNearIdentity) {
    const auto model = fixtures::tiny_model(2);
    const auto corpus = fixtures::text(20);
    const auto res = pretrain_projection(model, model, corpus);
    for (const auto& [l, r] : res.residual) EXPECT_LT(r, 1e-6) << "layer " << l;
    // On the span of the data the map acts as the identity.
    const auto tr = model.forward({.ids = corpus[0]}, {1});
    const auto h = tr.at(1, 2);
    const auto ph = res.projections.apply(1, h);
    for (std::size_t i = 0; i < h.size(); ++i) EXPECT_NEAR(ph[i], h[i], 1e-3 * (1 + std::abs(h[i])));
}

TEST(Projection, GradientDescentMatchesNormalEquations) {
    const auto target = fixtures::tiny_model(2, 4, 16);
    const auto explainer = fixtures::tiny_model(8, 4, 12);
    const auto corpus = fixtures::text(30);
    const auto closed = pretrain_projection(target, explainer, corpus);
    // Full-batch gradient descent on the same squared error from a zero start.
    lm::ProjectionSet gd = closed.projections;
    const int layer = 2;
    auto& P = gd.at(layer).value;
    std::fill(P.storage().begin(), P.storage().end(), 0.0f);
    std::vector<std::vector<float>> X, Y;
    for (const auto& x : corpus) {
        const auto tm = target.forward({.ids = x}, {layer});
        const auto te = explainer.forward({.ids = x}, {metrics::corresponding_layer(layer, 4, 4)});
        for (std::size_t t = 0; t < x.size(); ++t) {
            X.emplace_back(tm.at(layer, t).begin(), tm.at(layer, t).end());
            Y.emplace_back(te.at(layer, t).begin(), te.at(layer, t).end());
        }
    }
    const std::size_t dm = 16, de = 12;
    std::vector<double> W(de * dm, 0.0), m(de * dm, 0.0), s(de * dm, 0.0);
    for (int it = 1; it <= 6000; ++it) {
        std::vector<double> g(de * dm, 0.0);
        for (std::size_t r = 0; r < X.size(); ++r) {
            for (std::size_t i = 0; i < de; ++i) {
                double pred = 0;
                for (std::size_t j = 0; j < dm; ++j) pred += W[i * dm + j] * X[r][j];
                const double e = pred - Y[r][i];
                for (std::size_t j = 0; j < dm; ++j) g[i * dm + j] += 2 * e * X[r][j] / double(X.size());
            }
        }
        const double lr = 0.01;
        for (std::size_t k = 0; k < W.size(); ++k) {
            m[k] = 0.9 * m[k] + 0.1 * g[k];
            s[k] = 0.999 * s[k] + 0.001 * g[k] * g[k];
            W[k] -= lr * (m[k] / (1 - std::pow(0.9, it))) / (std::sqrt(s[k] / (1 - std::pow(0.999, it))) + 1e-12);
        }
    }
    for (std::size_t i = 0; i < de; ++i) {
        for (std::size_t j = 0; j < dm; ++j) P(i, j) = static_cast<float>(W[i * dm + j]);
    }
    const auto r_gd = projection_residual(target, explainer, gd, corpus).at(layer);
    const double r_cf = closed.residual.at(layer);
    EXPECT_LE(std::abs(r_gd - r_cf) / std::max(r_cf, 1e-12), 1e-3) << "gd " << r_gd << " closed " << r_cf;
}

TEST(Projection, RandomMapsFitWorseThanPretrained) {
    const auto target = fixtures::tiny_model(2);
    const auto explainer = fixtures::tiny_model(3);
    const auto fit = fixtures::text(30);
    const std::vector<std::vector<int>> held(fixtures::world().text.begin() + 30, fixtures::world().text.begin() + 50);
    const auto pre = pretrain_projection(target, explainer, fit).projections;
    const auto rnd = lm::ProjectionSet::random(4, 16, 16, 11);
    const auto a = projection_residual(target, explainer, pre, held);
    const auto b = projection_residual(target, explainer, rnd, held);
    for (const auto& [l, r] : a) EXPECT_LT(r, b.at(l)) << "layer " << l;
}

TEST(Projection, ModesParse) {
    for (auto m : {ProjectionMode::Joint, ProjectionMode::Frozen, ProjectionMode::Random}) {
        EXPECT_EQ(parse_mode(mode_name(m)), m);
    }
    EXPECT_THROW(parse_mode("bogus"), std::invalid_argument);
}

namespace {

std::vector<FeatureRecord> toy_records(std::size_t n, int dim) {
    auto [f, l] = synthetic_features(n, 1);
    for (auto& x : f) x.v.resize(static_cast<std::size_t>(dim), 0.1f);
    return build_feature_dataset(f, l, grammar(), {1}, {.holdout_per_layer = 0, .seed = 2}).train;
}

}  // namespace

TEST(ExplainerFeat, IdentityProjectionReducesToPlainFineTune) {
    const auto records = toy_records(12, 16);
    lm::OptimizerConfig oc;
    oc.steps = 15;
    oc.batch_size = 4;
    auto a = fixtures::tiny_model(6);
    auto b = a;
    auto proj = lm::ProjectionSet::identity(4, 16);
    const auto ca = train_explainer_feat(a, records, proj, ProjectionMode::Frozen, oc);
    std::vector<lm::TrainingExample> data;
    for (const auto& r : records) data.push_back(r.example());
    const auto cb = lm::fine_tune(b, data, oc);
    ASSERT_EQ(ca.loss.size(), cb.loss.size());
    for (std::size_t i = 0; i < ca.loss.size(); ++i) EXPECT_EQ(ca.loss[i], cb.loss[i]) << "step " << i;
}

TEST(ExplainerFeat, DimensionMismatchThrows) {
    const auto records = toy_records(3, 8);
    auto m = fixtures::tiny_model(6);
    auto proj = lm::ProjectionSet::identity(4, 16);
    EXPECT_THROW(train_explainer_feat(m, records, proj, ProjectionMode::Joint, {}), std::invalid_argument);
}

TEST(ExplainerFeat, OverfitRecordDescribesItsGold) {
    auto records = toy_records(1, 16);
    auto m = fixtures::tiny_model(6);
    auto proj = lm::ProjectionSet::identity(4, 16);
    lm::OptimizerConfig oc;
    oc.steps = 150;
    oc.batch_size = 1;
    oc.lr = 1e-2f;
    train_explainer_feat(m, records, proj, ProjectionMode::Joint, oc);
    const auto& r = records[0];
    const auto d = describe(m, &proj, grammar(), r.v, r.layer, r.template_id);
    ASSERT_TRUE(d.label.has_value());
    EXPECT_EQ(*d.label, r.gold);
}

TEST(Describe, TotalAndDeterministic) {
    const auto m = fixtures::tiny_model(6);
    const auto proj = lm::ProjectionSet::identity(4, 16);
    const std::vector<float> zero(16, 0.0f);
    const auto a = describe(m, &proj, grammar(), zero, 2, 1);
    const auto b = describe(m, &proj, grammar(), zero, 2, 1);
    EXPECT_EQ(a.tokens, b.tokens);
    EXPECT_LE(a.tokens.size(), 3u);
}
