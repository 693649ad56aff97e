#include "introspect/feat/describe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include <Eigen/Dense>

#include "introspect/lm/decode.hpp"
#include "introspect/metrics/metrics.hpp"
#include "introspect/util/encoding.hpp"

namespace introspect::feat {

ActivationBank::ActivationBank(const lm::Model& target, std::vector<std::vector<int>> corpus, const lm::LayerSet& layers)
    : corpus_(std::move(corpus)) {
    std::size_t total = 0;
    for (const auto& x : corpus_) {
        offsets_.push_back(total);
        total += x.size();
    }
    offsets_.push_back(total);
    const auto d = static_cast<std::size_t>(target.hidden());
    for (int l : layers) taps_[l] = lm::Matrix<float>(total, d);
    for (std::size_t i = 0; i < corpus_.size(); ++i) {
        if (corpus_[i].empty()) continue;
        const lm::Trace tr = target.forward({.ids = corpus_[i]}, layers);
        for (int l : layers) {
            const auto& m = tr.layer(l);
            std::copy(m.storage().begin(), m.storage().end(), taps_[l].row(offsets_[i]).begin());
        }
    }
}

std::set<int> ActivationBank::layers() const {
    std::set<int> out;
    for (const auto& [l, m] : taps_) out.insert(l);
    return out;
}

std::vector<std::vector<double>> ActivationBank::activations(std::span<const float> v, int layer) const {
    auto it = taps_.find(layer);
    if (it == taps_.end()) throw std::out_of_range("ActivationBank: layer " + std::to_string(layer) + " not collected");
    const lm::Matrix<float>& h = it->second;
    if (v.size() != h.cols()) throw std::invalid_argument("ActivationBank: direction dimension mismatch");
    std::vector<std::vector<double>> out(corpus_.size());
    for (std::size_t i = 0; i < corpus_.size(); ++i) {
        out[i].resize(corpus_[i].size());
        for (std::size_t t = 0; t < corpus_[i].size(); ++t) {
            const float* row = h.row(offsets_[i] + t).data();
            double s = 0;
            for (std::size_t c = 0; c < v.size(); ++c) s += double(row[c]) * v[c];
            out[i][t] = s;
        }
    }
    return out;
}

double simulator_score(const LabelGrammar& grammar, const Label& label, std::span<const std::vector<int>> corpus,
                       std::span<const std::vector<double>> activations) {
    if (corpus.empty()) throw std::invalid_argument("simulator_score: empty corpus");
    if (activations.size() != corpus.size()) throw std::invalid_argument("simulator_score: activations do not match corpus");
    double total = 0;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        if (corpus[i].size() < 2) continue;
        const auto sim = simulate(grammar, label, corpus[i]);
        const std::vector<double> simd(sim.begin(), sim.end());
        total += metrics::pearson(std::span<const double>(activations[i]), std::span<const double>(simd));
    }
    return total / double(corpus.size());
}

double simulator_score(const ActivationBank& bank, const LabelGrammar& grammar, std::span<const float> v, int layer,
                       const std::optional<Label>& label) {
    if (!label || !grammar.contains(*label)) return 0.0;
    const auto acts = bank.activations(v, layer);
    return simulator_score(grammar, *label, bank.corpus(), acts);
}

namespace {

bool better(const LabelGrammar& g, double score, const Label& l, double best_score, const Label& best) {
    if (score > best_score + kScoreTieTolerance) return true;
    if (score < best_score - kScoreTieTolerance) return false;
    return g.render_string(l) < g.render_string(best);
}

}  // namespace

LabelScore label_feature(const LabelGrammar& grammar, std::span<const std::vector<int>> corpus,
                         std::span<const std::vector<double>> activations, std::span<const Label> candidates) {
    if (candidates.empty()) throw std::invalid_argument("label_feature: empty candidate set");
    if (corpus.empty()) throw std::invalid_argument("label_feature: empty corpus");
    if (activations.size() != corpus.size()) throw std::invalid_argument("label_feature: activations do not match corpus");

    // Closed form for a binary simulator: with n1 matched positions out of n and
    // S1 the matched activation sum, r = (S1 - n1 mean) / sqrt(SS_a * n1 (n - n1) / n).
    std::vector<std::size_t> cand_index(candidates.size());
    for (std::size_t c = 0; c < candidates.size(); ++c) cand_index[c] = grammar.index(candidates[c]);
    std::vector<double> sums(candidates.size(), 0.0);
    const auto V = static_cast<std::size_t>(grammar.vocab().size());
    std::vector<double> tok_sum(V, 0.0);
    std::vector<std::size_t> tok_cnt(V, 0);
    std::vector<int> present;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto& x = corpus[i];
        const auto& a = activations[i];
        const std::size_t n = x.size();
        if (n < 2) continue;
        double mean = 0;
        for (double v : a) mean += v;
        mean /= double(n);
        double ss = 0;
        for (double v : a) ss += (v - mean) * (v - mean);
        if (ss <= 0) continue;
        present.clear();
        for (std::size_t t = 0; t < n; ++t) {
            if (tok_cnt[x[t]]++ == 0) present.push_back(x[t]);
            tok_sum[x[t]] += a[t];
        }
        for (std::size_t c = 0; c < candidates.size(); ++c) {
            const Label& l = candidates[c];
            std::size_t n1 = 0;
            double s1 = 0;
            for (int tok : present) {
                if (grammar.member(l, tok)) {
                    n1 += tok_cnt[tok];
                    s1 += tok_sum[tok];
                }
            }
            if (n1 == 0 || n1 == n) continue;
            const double varb = double(n1) * double(n - n1) / double(n);
            sums[c] += std::clamp((s1 - double(n1) * mean) / std::sqrt(ss * varb), -1.0, 1.0);
        }
        for (int tok : present) {
            tok_cnt[tok] = 0;
            tok_sum[tok] = 0;
        }
    }
    (void)cand_index;
    LabelScore best{candidates[0], sums[0] / double(corpus.size())};
    for (std::size_t c = 1; c < candidates.size(); ++c) {
        const double s = sums[c] / double(corpus.size());
        if (better(grammar, s, candidates[c], best.score, best.label)) best = {candidates[c], s};
    }
    return best;
}

LabelScore label_feature(const ActivationBank& bank, const LabelGrammar& grammar, std::span<const float> v, int layer,
                         std::span<const Label> candidates) {
    const auto acts = bank.activations(v, layer);
    return label_feature(grammar, bank.corpus(), acts, candidates);
}

std::vector<int> render_feature_prompt(const pipeline::Vocab& v, int template_id, int layer, std::size_t& slot_index) {
    const int L = v.layer_token(layer);
    std::vector<int> out{v.bos};
    auto words = [&](std::initializer_list<const char*> w) {
        for (int t : v.ids(w)) out.push_back(t);
    };
    auto slot = [&] {
        out.push_back(v.open);
        slot_index = out.size();
        out.push_back(v.slot);
        out.push_back(v.close);
    };
    switch (template_id) {
        case 0:
            words({"at", "layer"});
            out.push_back(L);
            words({","});
            slot();
            words({"encodes"});
            break;
        case 1:
            slot();
            words({"activates", "at", "layer"});
            out.push_back(L);
            words({"for"});
            break;
        case 2:
            words({"we", "can", "describe"});
            slot();
            words({"at", "layer"});
            out.push_back(L);
            words({"as", "encoding"});
            break;
        case 3:
            words({"what", "does"});
            slot();
            words({"mean", "at", "layer"});
            out.push_back(L);
            words({"?"});
            break;
        default: throw std::out_of_range("feature template id must be in [0, 4)");
    }
    return out;
}

lm::TrainingExample FeatureRecord::example() const {
    lm::TrainingExample e;
    e.ids = prompt;
    e.ids.insert(e.ids.end(), gold_tokens.begin(), gold_tokens.end());
    e.weights.assign(e.ids.size(), 0.0f);
    std::fill(e.weights.begin() + static_cast<std::ptrdiff_t>(prompt.size()), e.weights.end(), 1.0f);
    e.slots.push_back({slot_index, v, layer});
    return e;
}

nlohmann::json FeatureRecord::to_json(const LabelGrammar& grammar) const {
    return {{"feature_id", feature_id},
            {"layer", layer},
            {"template_id", template_id},
            {"prompt", prompt},
            {"slot_index", slot_index},
            {"gold_label_id", grammar.index(gold)},
            {"gold_label", grammar.render_string(gold)},
            {"gold_tokens", gold_tokens},
            {"score", score},
            {"vector", util::encode_f32(v)}};
}

FeatureRecord FeatureRecord::from_json(const nlohmann::json& j, const LabelGrammar& grammar) {
    FeatureRecord r;
    r.feature_id = j.at("feature_id");
    r.layer = j.at("layer");
    r.template_id = j.at("template_id");
    r.prompt = j.at("prompt").get<std::vector<int>>();
    r.slot_index = j.at("slot_index");
    r.gold = grammar.at(j.at("gold_label_id").get<std::size_t>());
    r.gold_tokens = j.at("gold_tokens").get<std::vector<int>>();
    r.score = j.at("score");
    r.v = util::decode_f32(j.at("vector").get<std::string>());
    return r;
}

namespace {

FeatureRecord make_record(const sae::FeatureDirection& f, const LabelScore& ls, const LabelGrammar& g, int tmpl) {
    FeatureRecord r;
    r.feature_id = f.id;
    r.layer = f.layer;
    r.template_id = tmpl;
    r.prompt = render_feature_prompt(g.vocab(), tmpl, f.layer, r.slot_index);
    r.gold = ls.label;
    r.gold_tokens = g.render(ls.label);
    r.gold_tokens.push_back(g.vocab().eos);
    r.v = f.v;
    r.score = ls.score;
    return r;
}

}  // namespace

FeatureDataset build_feature_dataset(std::span<const sae::FeatureDirection> features, std::span<const LabelScore> labels,
                                     const LabelGrammar& grammar, const std::set<int>& covered_layers,
                                     const FeatureDatasetOptions& options) {
    if (features.size() != labels.size()) throw std::invalid_argument("build_feature_dataset: labels do not match features");
    std::map<int, std::vector<std::size_t>> by_layer;
    FeatureDataset ds;
    for (std::size_t i = 0; i < features.size(); ++i) {
        if (!covered_layers.count(features[i].layer)) {
            throw std::invalid_argument("build_feature_dataset: feature " + features[i].id + " is at layer " +
                                        std::to_string(features[i].layer) + ", which the labeling corpus does not cover");
        }
        if (labels[i].score < options.min_score) {
            ++ds.dropped_low_score;
            continue;
        }
        by_layer[features[i].layer].push_back(i);
    }
    std::mt19937_64 rng(options.seed);
    std::set<std::size_t> heldout;
    for (auto& [layer, idx] : by_layer) {
        std::vector<std::size_t> perm = idx;
        std::shuffle(perm.begin(), perm.end(), rng);
        const std::size_t k = std::min<std::size_t>(perm.size(), static_cast<std::size_t>(std::max(0, options.holdout_per_layer)));
        heldout.insert(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(k));
    }
    std::uniform_int_distribution<int> tmpl(0, kFeatureTemplates - 1);
    for (auto& [layer, idx] : by_layer) {
        for (std::size_t i : idx) {
            if (heldout.count(i)) {
                ds.heldout_ids.push_back(features[i].id);
                for (int t = 0; t < kFeatureTemplates; ++t) ds.heldout.push_back(make_record(features[i], labels[i], grammar, t));
            } else {
                ds.train.push_back(make_record(features[i], labels[i], grammar, tmpl(rng)));
            }
        }
    }
    return ds;
}

std::vector<FeatureRecord> subsample_train(std::span<const FeatureRecord> train, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("fraction must lie in (0, 1]");
    std::map<int, std::vector<std::size_t>> by_layer;
    for (std::size_t i = 0; i < train.size(); ++i) by_layer[train[i].layer].push_back(i);
    std::vector<std::size_t> keep;
    for (auto& [layer, idx] : by_layer) {
        std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(layer + 1)));
        std::shuffle(idx.begin(), idx.end(), rng);
        const auto k = static_cast<std::size_t>(std::floor(fraction * double(idx.size()) + 0.5));
        keep.insert(keep.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(std::min(k, idx.size())));
    }
    if (keep.empty()) {
        throw std::invalid_argument("fraction " + std::to_string(fraction) + " yields zero training records");
    }
    std::sort(keep.begin(), keep.end());
    std::vector<FeatureRecord> out;
    for (std::size_t i : keep) out.push_back(train[i]);
    return out;
}

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::pair<RowMat, RowMat> paired_taps(const lm::Model& target, const lm::Model& explainer,
                                      std::span<const std::vector<int>> corpus, int layer) {
    const int le = metrics::corresponding_layer(layer, target.layers(), explainer.layers());
    std::size_t n = 0;
    for (const auto& x : corpus) n += x.size();
    RowMat X(static_cast<Eigen::Index>(n), target.hidden()), Y(static_cast<Eigen::Index>(n), explainer.hidden());
    Eigen::Index r = 0;
    for (const auto& x : corpus) {
        if (x.empty()) continue;
        const lm::Trace tm = target.forward({.ids = x}, {layer});
        const lm::Trace te = explainer.forward({.ids = x}, {le});
        for (std::size_t t = 0; t < x.size(); ++t, ++r) {
            const auto hm = tm.at(layer, t), he = te.at(le, t);
            for (std::size_t c = 0; c < hm.size(); ++c) X(r, static_cast<Eigen::Index>(c)) = hm[c];
            for (std::size_t c = 0; c < he.size(); ++c) Y(r, static_cast<Eigen::Index>(c)) = he[c];
        }
    }
    return {X, Y};
}

}  // namespace

AlignmentResult pretrain_projection(const lm::Model& target, const lm::Model& explainer,
                                    std::span<const std::vector<int>> corpus) {
    AlignmentResult res;
    res.projections.source_dim = target.hidden();
    res.projections.target_dim = explainer.hidden();
    for (int l = 0; l < target.layers(); ++l) {
        auto [X, Y] = paired_taps(target, explainer, corpus, l);
        if (X.rows() == 0) throw std::invalid_argument("pretrain_projection: empty alignment corpus");
        Eigen::MatrixXd G = X.transpose() * X;
        const Eigen::MatrixXd B = X.transpose() * Y;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(G, Eigen::EigenvaluesOnly);
        const double emax = eig.eigenvalues().maxCoeff(), emin = eig.eigenvalues().minCoeff();
        const bool degenerate = X.rows() < X.cols() || emin <= 1e-10 * std::max(emax, 1e-300);
        if (degenerate) {
            const double lambda = 1e-3 * G.trace() / double(G.rows());
            G.diagonal().array() += lambda;
        }
        const Eigen::MatrixXd Pt = G.ldlt().solve(B);  // [dM x dE]
        lm::Parameter<float> p("proj." + std::to_string(l), static_cast<std::size_t>(explainer.hidden()),
                               static_cast<std::size_t>(target.hidden()), false);
        for (Eigen::Index i = 0; i < Pt.cols(); ++i) {
            for (Eigen::Index j = 0; j < Pt.rows(); ++j) p.value(i, j) = static_cast<float>(Pt(j, i));
        }
        const double resid = (Y - X * Pt).squaredNorm(), total = Y.squaredNorm();
        res.residual[l] = total > 0 ? resid / total : 0.0;
        res.ridge[l] = degenerate;
        res.projections.maps.emplace(l, std::move(p));
    }
    return res;
}

std::map<int, double> projection_residual(const lm::Model& target, const lm::Model& explainer,
                                          const lm::ProjectionSet& projections, std::span<const std::vector<int>> corpus) {
    std::map<int, double> out;
    for (const auto& [l, p] : projections.maps) {
        auto [X, Y] = paired_taps(target, explainer, corpus, l);
        RowMat P(static_cast<Eigen::Index>(p.value.rows()), static_cast<Eigen::Index>(p.value.cols()));
        for (std::size_t i = 0; i < p.value.rows(); ++i) {
            for (std::size_t j = 0; j < p.value.cols(); ++j) P(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = p.value(i, j);
        }
        const double total = Y.squaredNorm();
        out[l] = total > 0 ? (Y - X * P.transpose()).squaredNorm() / total : 0.0;
    }
    return out;
}

std::string mode_name(ProjectionMode m) {
    switch (m) {
        case ProjectionMode::Joint: return "joint";
        case ProjectionMode::Frozen: return "frozen";
        case ProjectionMode::Random: return "random";
    }
    throw std::logic_error("bad mode");
}

ProjectionMode parse_mode(const std::string& s) {
    if (s == "joint") return ProjectionMode::Joint;
    if (s == "frozen") return ProjectionMode::Frozen;
    if (s == "random") return ProjectionMode::Random;
    throw std::invalid_argument("unknown projection mode '" + s + "' (expected joint, frozen or random)");
}

lm::ProjectionSet initial_projections(ProjectionMode mode, const lm::Model& target, const lm::Model& explainer,
                                      std::span<const std::vector<int>> alignment_corpus, std::uint64_t seed) {
    switch (mode) {
        case ProjectionMode::Joint:
            if (target.hidden() == explainer.hidden()) return lm::ProjectionSet::identity(target.layers(), target.hidden());
            return pretrain_projection(target, explainer, alignment_corpus).projections;
        case ProjectionMode::Frozen: return pretrain_projection(target, explainer, alignment_corpus).projections;
        case ProjectionMode::Random:
            return lm::ProjectionSet::random(target.layers(), target.hidden(), explainer.hidden(), seed);
    }
    throw std::logic_error("bad mode");
}

lm::LossCurve train_explainer_feat(lm::Model& explainer, std::span<const FeatureRecord> records,
                                   lm::ProjectionSet& projections, ProjectionMode mode,
                                   const lm::OptimizerConfig& config) {
    std::vector<lm::TrainingExample> data;
    data.reserve(records.size());
    for (const auto& r : records) {
        if (r.v.size() != static_cast<std::size_t>(projections.source_dim)) {
            throw std::invalid_argument("train_explainer_feat: feature " + r.feature_id + " has dimension " +
                                        std::to_string(r.v.size()) + " but the projection expects " +
                                        std::to_string(projections.source_dim));
        }
        data.push_back(r.example());
    }
    projections.set_trainable(mode != ProjectionMode::Frozen);
    return lm::fine_tune(explainer, data, config, {.projections = &projections, .train_model = true});
}

Description describe_annotated(const lm::Model& explainer, const lm::ProjectionSet* projections,
                               const LabelGrammar& grammar, std::span<const float> v, int layer, int annotated_layer,
                               int template_id, int max_tokens) {
    std::size_t slot = 0;
    lm::TokenSeq seq;
    seq.ids = render_feature_prompt(grammar.vocab(), template_id, annotated_layer, slot);
    std::vector<float> sv = projections ? projections->apply(layer, v) : std::vector<float>(v.begin(), v.end());
    seq.slots.push_back({slot, std::move(sv)});
    Description d;
    d.tokens = lm::greedy_decode(explainer, seq, max_tokens, grammar.vocab().eos);
    d.label = grammar.parse(d.tokens);
    return d;
}

Description describe(const lm::Model& explainer, const lm::ProjectionSet* projections, const LabelGrammar& grammar,
                     std::span<const float> v, int layer, int template_id, int max_tokens) {
    return describe_annotated(explainer, projections, grammar, v, layer, layer, template_id, max_tokens);
}

}  // namespace introspect::feat
