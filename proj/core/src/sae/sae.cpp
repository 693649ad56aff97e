#include "introspect/sae/sae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "introspect/lm/checkpoint.hpp"
#include "introspect/lm/ops.hpp"
#include "introspect/lm/train.hpp"
#include "introspect/util/encoding.hpp"
#include "introspect/util/jsonl.hpp"

namespace introspect::sae {

using lm::Graph;
using lm::Parameter;
using lm::Var;

std::vector<ActivationTap> collect_activations(const lm::Model& model, std::span<const std::vector<int>> corpus,
                                               const lm::LayerSet& layers) {
    std::vector<ActivationTap> out;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        for (int id : corpus[i]) {
            if (id < 0 || id >= model.vocab()) {
                throw std::invalid_argument("collect_activations: input " + std::to_string(i) + " has token " +
                                            std::to_string(id) + " outside the vocabulary");
            }
        }
        if (corpus[i].empty()) continue;
        const lm::Trace tr = model.forward({.ids = corpus[i]}, layers);
        for (int l : layers) {
            for (std::size_t t = 0; t < corpus[i].size(); ++t) {
                const auto h = tr.at(l, t);
                out.push_back({i, l, t, {h.begin(), h.end()}});
            }
        }
    }
    return out;
}

Matrix<float> tap_matrix(std::span<const ActivationTap> taps, int layer) {
    std::size_t n = 0, d = 0;
    for (const auto& t : taps) {
        if (t.layer == layer) {
            ++n;
            d = t.h.size();
        }
    }
    Matrix<float> m(n, d);
    std::size_t r = 0;
    for (const auto& t : taps) {
        if (t.layer == layer) std::copy(t.h.begin(), t.h.end(), m.row(r++).begin());
    }
    return m;
}

std::vector<float> SaeModel::encode(std::span<const float> x) const {
    const std::size_t d = w_enc.cols(), m = w_enc.rows();
    if (x.size() != d) throw std::invalid_argument("SaeModel::encode: dimension mismatch");
    std::vector<float> code(m);
    for (std::size_t j = 0; j < m; ++j) {
        float s = b_enc(0, j);
        for (std::size_t c = 0; c < d; ++c) s += w_enc(j, c) * x[c] * input_scale;
        code[j] = std::max(0.0f, s);
    }
    return code;
}

std::vector<float> SaeModel::decode(std::span<const float> code) const {
    const std::size_t d = w_dec.rows(), m = w_dec.cols();
    if (code.size() != m) throw std::invalid_argument("SaeModel::decode: dimension mismatch");
    std::vector<float> x(d);
    for (std::size_t c = 0; c < d; ++c) {
        float s = b_dec(0, c);
        for (std::size_t j = 0; j < m; ++j) s += w_dec(c, j) * code[j];
        x[c] = s / input_scale;
    }
    return x;
}

std::pair<double, double> SaeModel::evaluate(const Matrix<float>& x) const {
    if (x.rows() == 0) return {0.0, 0.0};
    double se = 0, l0 = 0;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto code = encode(x.row(r));
        const auto rec = decode(code);
        for (std::size_t c = 0; c < rec.size(); ++c) {
            const double e = (double(rec[c]) - x(r, c)) * input_scale;
            se += e * e;
        }
        for (float v : code) l0 += v > 0.0f;
    }
    return {se / double(x.size()), l0 / double(x.rows())};
}

void SaeModel::save(const std::filesystem::path& path) const {
    lm::Container c;
    c.meta = {{"kind", "sae"}, {"layer", layer}, {"l1", l1}, {"input_scale", input_scale},
              {"final_mse", final_mse}, {"final_l0", final_l0}};
    c.tensors = {{"w_enc", w_enc}, {"b_enc", b_enc}, {"w_dec", w_dec}, {"b_dec", b_dec}};
    lm::write_container(path, c);
}

SaeModel SaeModel::load(const std::filesystem::path& path) {
    const lm::Container c = lm::read_container(path);
    if (c.meta.value("kind", "") != "sae") throw std::runtime_error(path.string() + " does not hold an SAE");
    SaeModel s;
    s.layer = c.meta.at("layer");
    s.l1 = c.meta.at("l1");
    s.input_scale = c.meta.at("input_scale");
    s.final_mse = c.meta.at("final_mse");
    s.final_l0 = c.meta.at("final_l0");
    s.w_enc = c.get("w_enc");
    s.b_enc = c.get("b_enc");
    s.w_dec = c.get("w_dec");
    s.b_dec = c.get("b_dec");
    return s;
}

namespace {

void normalize_columns(Matrix<float>& w) {
    for (std::size_t j = 0; j < w.cols(); ++j) {
        double n2 = 0;
        for (std::size_t r = 0; r < w.rows(); ++r) n2 += double(w(r, j)) * w(r, j);
        const double n = std::sqrt(n2);
        if (n == 0) continue;
        for (std::size_t r = 0; r < w.rows(); ++r) w(r, j) = static_cast<float>(w(r, j) / n);
    }
}

}  // namespace

SaeModel train_sae(const Matrix<float>& taps, int layer, const SaeConfig& config) {
    const std::size_t n = taps.rows(), d = taps.cols();
    const auto m = static_cast<std::size_t>(config.features);
    if (n == 0) throw std::invalid_argument("train_sae: no taps for layer " + std::to_string(layer));
    if (m <= d) throw std::invalid_argument("train_sae: dictionary size must exceed the input dimension");
    if (config.l1 < 0) throw std::invalid_argument("train_sae: sparsity weight must be >= 0");
    if (config.steps < 1) throw std::invalid_argument("train_sae: steps must be >= 1");

    double sq = 0;
    for (float v : taps.storage()) sq += double(v) * v;
    const double mean_sq = sq / double(n);
    const float scale = mean_sq > 0 ? static_cast<float>(std::sqrt(double(d) / mean_sq)) : 1.0f;

    std::mt19937_64 rng(config.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Parameter<float> w_enc("w_enc", m, d, false), b_enc("b_enc", 1, m, false), w_dec("w_dec", d, m, false),
        b_dec("b_dec", 1, d, false);
    for (auto& v : w_dec.value.storage()) v = static_cast<float>(normal(rng));
    normalize_columns(w_dec.value);
    for (std::size_t j = 0; j < m; ++j) {
        for (std::size_t c = 0; c < d; ++c) w_enc.value(j, c) = w_dec.value(c, j);
    }

    lm::OptimizerConfig opt;
    opt.steps = config.steps;
    opt.lr = config.lr;
    opt.weight_decay = 0;
    opt.clip = 0;
    opt.warmup_frac = 0.02f;
    lm::AdamW adam({&w_enc, &b_enc, &w_dec, &b_dec}, opt);

    const std::size_t B = std::min<std::size_t>(static_cast<std::size_t>(config.batch_size), n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t cursor = 0;
    for (int step = 0; step < config.steps; ++step) {
        Matrix<float> x(B, d);
        for (std::size_t b = 0; b < B; ++b) {
            if (cursor == n) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            const auto src = taps.row(order[cursor++]);
            for (std::size_t c = 0; c < d; ++c) x(b, c) = src[c] * scale;
        }
        for (auto* p : {&w_enc, &b_enc, &w_dec, &b_dec}) p->zero_grad();
        Graph<float> g(true);
        Var xv = g.input(std::move(x));
        Var code = lm::ops::relu(g, lm::ops::add_bias(g, lm::ops::matmul_nt(g, xv, g.parameter(w_enc)), g.parameter(b_enc)));
        Var rec = lm::ops::add_bias(g, lm::ops::matmul_nt(g, code, g.parameter(w_dec)), g.parameter(b_dec));
        Var loss = lm::ops::mean_squared_error(g, rec, xv);
        if (config.l1 > 0) loss = lm::ops::add(g, loss, lm::ops::scale(g, lm::ops::l1_per_row(g, code), config.l1));
        const double lv = g.value(loss)(0, 0);
        if (!std::isfinite(lv)) throw lm::DivergenceError(step, lv);
        g.backward(loss);
        adam.step(step);
        normalize_columns(w_dec.value);
    }

    SaeModel s;
    s.layer = layer;
    s.w_enc = w_enc.value;
    s.b_enc = b_enc.value;
    s.w_dec = w_dec.value;
    s.b_dec = b_dec.value;
    s.l1 = config.l1;
    s.input_scale = scale;
    std::tie(s.final_mse, s.final_l0) = s.evaluate(taps);
    return s;
}

std::string source_name(Source s) {
    switch (s) {
        case Source::SAE: return "SAE";
        case Source::ACT: return "ACT";
        case Source::DACT: return "dACT";
    }
    throw std::logic_error("bad source");
}

Source parse_source(const std::string& s) {
    if (s == "SAE") return Source::SAE;
    if (s == "ACT") return Source::ACT;
    if (s == "dACT") return Source::DACT;
    throw std::invalid_argument("unknown feature source '" + s + "'");
}

namespace {

std::optional<std::vector<float>> normalized(std::span<const float> v, double min_norm) {
    double n2 = 0;
    for (float x : v) n2 += double(x) * x;
    const double n = std::sqrt(n2);
    if (n < min_norm) return std::nullopt;
    std::vector<float> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] / n);
    return out;
}

}  // namespace

std::vector<FeatureDirection> extract_features(std::span<const SaeModel> saes) {
    std::vector<const SaeModel*> sorted;
    for (const auto& s : saes) sorted.push_back(&s);
    std::stable_sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->layer < b->layer; });
    std::vector<FeatureDirection> out;
    for (const SaeModel* s : sorted) {
        const std::size_t d = s->w_dec.rows();
        for (std::size_t j = 0; j < s->w_dec.cols(); ++j) {
            std::vector<float> col(d);
            for (std::size_t c = 0; c < d; ++c) col[c] = s->w_dec(c, j);
            auto v = normalized(col, 0.0);
            if (!v) v = std::vector<float>(d, 0.0f);
            out.push_back({"sae/L" + std::to_string(s->layer) + "/" + std::to_string(j), s->layer, Source::SAE, *v});
        }
    }
    return out;
}

std::vector<FeatureDirection> act_features(std::span<const ActivationTap> taps) {
    std::vector<FeatureDirection> out;
    for (const auto& t : taps) {
        auto v = normalized(t.h, 1e-8);
        if (!v) continue;
        out.push_back({"act/" + std::to_string(t.input) + "/L" + std::to_string(t.layer) + "/" + std::to_string(t.position),
                       t.layer, Source::ACT, *v});
    }
    return out;
}

DeltaResult delta_features(const lm::Model& model, std::span<const CounterfactualTap> pairs, int layer) {
    if (layer < 0 || layer >= model.layers()) throw std::out_of_range("delta_features: layer out of range");
    DeltaResult res;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& p = pairs[i];
        if (p.position >= p.x.size() || p.position >= p.x_prime.size()) {
            throw std::invalid_argument("delta_features: pair " + std::to_string(i) + " is not aligned at position " +
                                        std::to_string(p.position));
        }
        const lm::Trace a = model.forward({.ids = p.x}, {layer});
        const lm::Trace b = model.forward({.ids = p.x_prime}, {layer});
        const auto ha = a.at(layer, p.position), hb = b.at(layer, p.position);
        std::vector<float> diff(ha.size());
        for (std::size_t c = 0; c < diff.size(); ++c) diff[c] = ha[c] - hb[c];
        auto v = normalized(diff, 1e-8);
        if (!v) {
            ++res.skipped;
            continue;
        }
        res.features.push_back({"dact/" + std::to_string(i) + "/L" + std::to_string(layer), layer, Source::DACT, *v});
    }
    return res;
}

std::vector<float> feature_activation(const lm::Model& model, std::span<const float> v, int layer,
                                      std::span<const int> x) {
    if (v.size() != static_cast<std::size_t>(model.hidden())) throw std::invalid_argument("feature_activation: dimension mismatch");
    if (x.empty()) return {};
    const lm::Trace tr = model.forward({.ids = {x.begin(), x.end()}}, {layer});
    std::vector<float> out(x.size());
    for (std::size_t t = 0; t < x.size(); ++t) {
        const auto h = tr.at(layer, t);
        double s = 0;
        for (std::size_t c = 0; c < v.size(); ++c) s += double(h[c]) * v[c];
        out[t] = static_cast<float>(s);
    }
    return out;
}

void save_features(const std::filesystem::path& path, std::span<const FeatureDirection> features) {
    std::vector<nlohmann::json> rows;
    for (const auto& f : features) {
        rows.push_back({{"id", f.id}, {"layer", f.layer}, {"source", source_name(f.source)}, {"vector", util::encode_f32(f.v)}});
    }
    util::write_jsonl(path, rows);
}

std::vector<FeatureDirection> load_features(const std::filesystem::path& path) {
    std::vector<FeatureDirection> out;
    for (const auto& r : util::read_jsonl(path)) {
        out.push_back({r.at("id").get<std::string>(), r.at("layer").get<int>(),
                       parse_source(r.at("source").get<std::string>()),
                       util::decode_f32(r.at("vector").get<std::string>())});
    }
    return out;
}

}  // namespace introspect::sae
