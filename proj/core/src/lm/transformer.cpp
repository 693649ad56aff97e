#include "introspect/lm/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <type_traits>

#include "introspect/lm/ops.hpp"

namespace introspect::lm {

void ModelConfig::validate() const {
    if (layers < 1) throw std::invalid_argument("ModelConfig: layers must be >= 1");
    if (hidden < 1 || heads < 1) throw std::invalid_argument("ModelConfig: hidden and heads must be positive");
    if (hidden % heads != 0) throw std::invalid_argument("ModelConfig: hidden must be divisible by heads");
    if (vocab < 2) throw std::invalid_argument("ModelConfig: vocab must be >= 2");
    if (context < 1) throw std::invalid_argument("ModelConfig: context must be positive");
    if (mlp_ratio < 1) throw std::invalid_argument("ModelConfig: mlp_ratio must be positive");
}

nlohmann::json ModelConfig::to_json() const {
    return {{"layers", layers},       {"hidden", hidden}, {"heads", heads},
            {"vocab", vocab},         {"context", context}, {"mlp_ratio", mlp_ratio},
            {"seed", seed},           {"rescale_slots", rescale_slots}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.layers = j.at("layers").get<int>();
    c.hidden = j.at("hidden").get<int>();
    c.heads = j.at("heads").get<int>();
    c.vocab = j.at("vocab").get<int>();
    c.context = j.at("context").get<int>();
    c.mlp_ratio = j.at("mlp_ratio").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.rescale_slots = j.value("rescale_slots", false);
    c.validate();
    return c;
}

LayerSet all_layers(int layers) {
    LayerSet s(static_cast<std::size_t>(layers));
    for (int l = 0; l < layers; ++l) s[l] = l;
    return s;
}

template <typename Real>
const Matrix<Real>& ResidualTrace<Real>::layer(int l) const {
    auto it = taps.find(l);
    if (it == taps.end()) throw std::out_of_range("ResidualTrace: layer " + std::to_string(l) + " was not tapped");
    return it->second;
}

template <typename Real>
Transformer<Real>::Transformer(const ModelConfig& config) : config_(config) {
    config_.validate();
    const std::size_t d = config_.hidden, V = config_.vocab, C = config_.context;
    const std::size_t f = d * config_.mlp_ratio;
    tok_emb_ = Parameter<Real>("tok_emb", V, d);
    pos_emb_ = Parameter<Real>("pos_emb", C, d);
    blocks_.resize(config_.layers);
    for (int l = 0; l < config_.layers; ++l) {
        const std::string p = "h" + std::to_string(l) + ".";
        Block& b = blocks_[l];
        b.ln1_g = Parameter<Real>(p + "ln1_g", 1, d, false);
        b.ln1_b = Parameter<Real>(p + "ln1_b", 1, d, false);
        b.w_qkv = Parameter<Real>(p + "w_qkv", 3 * d, d);
        b.b_qkv = Parameter<Real>(p + "b_qkv", 1, 3 * d, false);
        b.w_o = Parameter<Real>(p + "w_o", d, d);
        b.b_o = Parameter<Real>(p + "b_o", 1, d, false);
        b.ln2_g = Parameter<Real>(p + "ln2_g", 1, d, false);
        b.ln2_b = Parameter<Real>(p + "ln2_b", 1, d, false);
        b.w_fc = Parameter<Real>(p + "w_fc", f, d);
        b.b_fc = Parameter<Real>(p + "b_fc", 1, f, false);
        b.w_proj = Parameter<Real>(p + "w_proj", d, f);
        b.b_proj = Parameter<Real>(p + "b_proj", 1, d, false);
    }
    lnf_g_ = Parameter<Real>("lnf_g", 1, d, false);
    lnf_b_ = Parameter<Real>("lnf_b", 1, d, false);
    init_weights();
}

template <typename Real>
void Transformer<Real>::init_weights() {
    std::mt19937_64 rng(config_.seed);
    auto normal = [&rng](Parameter<Real>& p, double stddev) {
        std::normal_distribution<double> dist(0.0, stddev);
        for (auto& v : p.value.storage()) v = static_cast<Real>(dist(rng));
    };
    const double resid_std = 0.02 / std::sqrt(2.0 * config_.layers);
    normal(tok_emb_, 0.02);
    normal(pos_emb_, 0.01);
    for (Block& b : blocks_) {
        b.ln1_g.value.fill(Real(1));
        b.ln1_b.value.fill(Real(0));
        normal(b.w_qkv, 0.02);
        b.b_qkv.value.fill(Real(0));
        normal(b.w_o, resid_std);
        b.b_o.value.fill(Real(0));
        b.ln2_g.value.fill(Real(1));
        b.ln2_b.value.fill(Real(0));
        normal(b.w_fc, 0.02);
        b.b_fc.value.fill(Real(0));
        normal(b.w_proj, resid_std);
        b.b_proj.value.fill(Real(0));
    }
    lnf_g_.value.fill(Real(1));
    lnf_b_.value.fill(Real(0));
}

template <typename Real>
void Transformer<Real>::zero_weights() {
    for (Parameter<Real>* p : parameters()) p->value.fill(Real(0));
}

template <typename Real>
std::vector<Parameter<Real>*> Transformer<Real>::parameters() {
    std::vector<Parameter<Real>*> out{&tok_emb_, &pos_emb_};
    for (Block& b : blocks_) {
        for (Parameter<Real>* p : {&b.ln1_g, &b.ln1_b, &b.w_qkv, &b.b_qkv, &b.w_o, &b.b_o, &b.ln2_g, &b.ln2_b,
                                   &b.w_fc, &b.b_fc, &b.w_proj, &b.b_proj}) {
            out.push_back(p);
        }
    }
    out.push_back(&lnf_g_);
    out.push_back(&lnf_b_);
    return out;
}

template <typename Real>
std::vector<const Parameter<Real>*> Transformer<Real>::parameters() const {
    auto mut = const_cast<Transformer*>(this)->parameters();
    return {mut.begin(), mut.end()};
}

template <typename Real>
std::size_t Transformer<Real>::parameter_count() const {
    std::size_t n = 0;
    for (const Parameter<Real>* p : parameters()) n += p->value.size();
    return n;
}

template <typename Real>
void Transformer<Real>::zero_grad() {
    for (Parameter<Real>* p : parameters()) p->zero_grad();
}

template <typename Real>
Real Transformer<Real>::embedding_rms() const {
    double s = 0;
    for (Real v : tok_emb_.value.storage()) s += double(v) * double(v);
    return static_cast<Real>(std::sqrt(s / double(tok_emb_.value.rows())));
}

template <typename Real>
template <typename Self>
GraphResult Transformer<Real>::build_impl(Self& self, Graph<Real>& g, const BatchInput<Real>& in) {
    auto bind = [&g](auto& p) -> Var {
        if constexpr (std::is_const_v<std::remove_reference_t<decltype(p)>>) {
            return g.borrow(p.value);
        } else {
            return g.parameter(p);
        }
    };
    const ModelConfig& cfg = self.config_;
    const std::size_t rows = in.batch * in.seq_len;
    if (in.ids.size() != rows) throw std::invalid_argument("Transformer: ids size != batch * seq_len");
    if (in.seq_len > static_cast<std::size_t>(cfg.context)) {
        throw std::invalid_argument("Transformer: sequence length " + std::to_string(in.seq_len) +
                                    " exceeds context " + std::to_string(cfg.context));
    }

    GraphResult res;
    Var tok = bind(self.tok_emb_);
    Var x = ops::gather_rows(g, tok, in.ids);
    for (const SlotGroup& s : in.slots) {
        if (g.value(s.values).cols() != static_cast<std::size_t>(cfg.hidden)) {
            throw std::invalid_argument("Transformer: slot vector dimension does not match hidden size");
        }
        x = ops::replace_rows(g, x, s.rows, s.values);
    }
    std::vector<int> pos(rows);
    for (std::size_t r = 0; r < rows; ++r) pos[r] = static_cast<int>(r % in.seq_len);
    x = ops::add(g, x, ops::gather_rows(g, bind(self.pos_emb_), pos));

    // Group patches by layer, preserving order.
    std::vector<std::vector<const RowPatch<Real>*>> by_layer(cfg.layers);
    for (const auto& p : in.patches) {
        if (p.layer < 0 || p.layer >= cfg.layers) throw std::out_of_range("Transformer: patch layer out of range");
        if (p.row >= rows) throw std::out_of_range("Transformer: patch position out of range");
        if (p.value.size() != static_cast<std::size_t>(cfg.hidden)) {
            throw std::invalid_argument("Transformer: patch vector dimension does not match hidden size");
        }
        by_layer[p.layer].push_back(&p);
    }

    const std::size_t d = cfg.hidden;
    for (int l = 0; l < cfg.layers; ++l) {
        auto& b = self.blocks_[l];
        Var a = ops::layer_norm(g, x, bind(b.ln1_g), bind(b.ln1_b));
        Var qkv = ops::add_bias(g, ops::matmul_nt(g, a, bind(b.w_qkv)), bind(b.b_qkv));
        Var att = ops::causal_attention(g, qkv, in.batch, in.seq_len, static_cast<std::size_t>(cfg.heads));
        x = ops::add(g, x, ops::add_bias(g, ops::matmul_nt(g, att, bind(b.w_o)), bind(b.b_o)));
        Var m = ops::layer_norm(g, x, bind(b.ln2_g), bind(b.ln2_b));
        Var f = ops::gelu(g, ops::add_bias(g, ops::matmul_nt(g, m, bind(b.w_fc)), bind(b.b_fc)));
        x = ops::add(g, x, ops::add_bias(g, ops::matmul_nt(g, f, bind(b.w_proj)), bind(b.b_proj)));
        if (!by_layer[l].empty()) {
            std::vector<std::size_t> prow;
            Matrix<Real> vals(by_layer[l].size(), d);
            for (std::size_t j = 0; j < by_layer[l].size(); ++j) {
                const RowPatch<Real>& p = *by_layer[l][j];
                if (std::find(prow.begin(), prow.end(), p.row) != prow.end()) {
                    throw std::invalid_argument("Transformer: conflicting interventions on layer " +
                                                std::to_string(l) + ", row " + std::to_string(p.row));
                }
                prow.push_back(p.row);
                std::copy(p.value.begin(), p.value.end(), vals.row(j).begin());
            }
            x = ops::replace_rows(g, x, prow, g.input(std::move(vals)));
        }
        res.layer_outputs.push_back(x);
    }
    Var y = ops::layer_norm(g, x, bind(self.lnf_g_), bind(self.lnf_b_));
    res.logits = ops::matmul_nt(g, y, tok);
    return res;
}

template <typename Real>
GraphResult Transformer<Real>::build(Graph<Real>& g, const BatchInput<Real>& in) {
    return build_impl(*this, g, in);
}

template <typename Real>
GraphResult Transformer<Real>::build(Graph<Real>& g, const BatchInput<Real>& in) const {
    if (g.recording()) throw std::logic_error("Transformer::build const overload needs a non-recording graph");
    return build_impl(*this, g, in);
}

template <typename Real>
BatchInput<Real> Transformer<Real>::single_batch(Graph<Real>& g, const TokenSeq& seq) const {
    if (seq.ids.empty()) throw std::invalid_argument("Transformer: empty sequence");
    if (seq.ids.size() > static_cast<std::size_t>(config_.context)) {
        throw std::invalid_argument("Transformer: sequence length " + std::to_string(seq.ids.size()) +
                                    " exceeds context " + std::to_string(config_.context));
    }
    BatchInput<Real> in;
    in.batch = 1;
    in.seq_len = seq.ids.size();
    in.ids = seq.ids;
    if (!seq.slots.empty()) {
        SlotGroup grp;
        Matrix<Real> vals(seq.slots.size(), config_.hidden);
        const Real target_rms = config_.rescale_slots ? embedding_rms() : Real(0);
        for (std::size_t j = 0; j < seq.slots.size(); ++j) {
            const Slot& s = seq.slots[j];
            if (s.position >= seq.ids.size()) throw std::out_of_range("Transformer: slot position out of range");
            if (j > 0 && s.position <= seq.slots[j - 1].position) {
                throw std::invalid_argument("Transformer: slot positions must be strictly increasing");
            }
            if (s.vector.size() != static_cast<std::size_t>(config_.hidden)) {
                throw std::invalid_argument("Transformer: slot vector has dimension " +
                                            std::to_string(s.vector.size()) + ", expected " +
                                            std::to_string(config_.hidden));
            }
            Real scale = Real(1);
            if (config_.rescale_slots) {
                double ss = 0;
                for (float v : s.vector) ss += double(v) * v;
                const double rms = std::sqrt(ss);
                if (rms > 0) scale = static_cast<Real>(target_rms / rms);
            }
            for (std::size_t c = 0; c < s.vector.size(); ++c) vals(j, c) = static_cast<Real>(s.vector[c]) * scale;
            grp.rows.push_back(s.position);
        }
        grp.values = g.input(std::move(vals));
        in.slots.push_back(std::move(grp));
    }
    return in;
}

namespace {

template <typename Real>
ResidualTrace<Real> collect(const Graph<Real>& g, const GraphResult& res, const LayerSet& taps, int layers) {
    ResidualTrace<Real> trace;
    trace.logits = g.value(res.logits);
    for (int l : taps) {
        if (l < 0 || l >= layers) throw std::out_of_range("forward: tap layer " + std::to_string(l) + " out of range");
        trace.taps[l] = g.value(res.layer_outputs[l]);
    }
    return trace;
}

}  // namespace

template <typename Real>
ResidualTrace<Real> Transformer<Real>::forward(const TokenSeq& seq, const LayerSet& taps) const {
    Graph<Real> g(false);
    BatchInput<Real> in = single_batch(g, seq);
    GraphResult res = build(g, in);
    return collect(g, res, taps, config_.layers);
}

template <typename Real>
ResidualTrace<Real> Transformer<Real>::forward_patched(const TokenSeq& seq, std::span<const Intervention> interventions,
                                                       const LayerSet& taps) const {
    Graph<Real> g(false);
    BatchInput<Real> in = single_batch(g, seq);
    std::set<std::pair<int, std::size_t>> seen;
    for (const Intervention& iv : interventions) {
        if (iv.position >= seq.ids.size()) throw std::out_of_range("forward_patched: position out of range");
        for (int l : iv.layers) {
            if (l < 0 || l >= config_.layers) throw std::out_of_range("forward_patched: layer out of range");
            if (!seen.insert({l, iv.position}).second) {
                throw std::invalid_argument("forward_patched: conflicting interventions at layer " + std::to_string(l) +
                                            ", position " + std::to_string(iv.position));
            }
            RowPatch<Real> p;
            p.layer = l;
            p.row = iv.position;
            p.value.assign(iv.value.begin(), iv.value.end());
            in.patches.push_back(std::move(p));
        }
    }
    GraphResult res = build(g, in);
    return collect(g, res, taps, config_.layers);
}

template <typename Dst, typename Src>
void copy_weights(Transformer<Dst>& dst, const Transformer<Src>& src) {
    auto d = dst.parameters();
    auto s = src.parameters();
    if (d.size() != s.size()) throw std::invalid_argument("copy_weights: architecture mismatch");
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (d[i]->value.rows() != s[i]->value.rows() || d[i]->value.cols() != s[i]->value.cols()) throw std::invalid_argument("copy_weights: shape mismatch");
        for (std::size_t k = 0; k < d[i]->value.size(); ++k) {
            d[i]->value.data()[k] = static_cast<Dst>(s[i]->value.data()[k]);
        }
    }
}

template struct ResidualTrace<float>;
template struct ResidualTrace<double>;
template class Transformer<float>;
template class Transformer<double>;
template void copy_weights<float, float>(Transformer<float>&, const Transformer<float>&);
template void copy_weights<double, float>(Transformer<double>&, const Transformer<float>&);
template void copy_weights<float, double>(Transformer<float>&, const Transformer<double>&);
template void copy_weights<double, double>(Transformer<double>&, const Transformer<double>&);

}  // namespace introspect::lm
