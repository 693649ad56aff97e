#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "introspect/lm/autodiff.hpp"
#include "introspect/lm/tensor.hpp"

namespace introspect::lm {

struct ModelConfig {
    int layers = 8;
    int hidden = 64;
    int heads = 4;
    int vocab = 160;
    int context = 64;
    int mlp_ratio = 4;
    std::uint64_t seed = 0;
    // Rescale continuous tokens to the mean embedding RMS before insertion.
    bool rescale_slots = false;

    /// Throws std::invalid_argument when the configuration is unusable.
    void validate() const;

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// A continuous vector placed at an embedding-layer position instead of a token.
struct Slot {
    std::size_t position = 0;
    std::vector<float> vector;
};

struct TokenSeq {
    std::vector<int> ids;
    std::vector<Slot> slots;  // positions strictly increasing

    std::size_t size() const { return ids.size(); }
};

/// Replace h_{l,t} for every l in `layers` with `value` before layer l + 1 reads it.
struct Intervention {
    std::vector<int> layers;
    std::size_t position = 0;
    std::vector<float> value;
};

using LayerSet = std::vector<int>;

LayerSet all_layers(int layers);

/// Residual-stream taps and output logits of one forward pass.
template <typename Real>
struct ResidualTrace {
    std::map<int, Matrix<Real>> taps;  // layer -> [T x d], output of that layer
    Matrix<Real> logits;               // [T x V]

    const Matrix<Real>& layer(int l) const;
    std::span<const Real> at(int l, std::size_t t) const { return layer(l).row(t); }
    std::span<const Real> logits_at(std::size_t t) const { return logits.row(t); }
};

/// Rows (in the packed B*T layout) that receive continuous vectors, all sharing one node.
struct SlotGroup {
    std::vector<std::size_t> rows;
    Var values;  // [rows.size() x hidden]
};

template <typename Real>
struct RowPatch {
    int layer = 0;
    std::size_t row = 0;
    std::vector<Real> value;
};

/// Packed batch for graph construction; sequences are right-padded to seq_len.
template <typename Real>
struct BatchInput {
    std::size_t batch = 0;
    std::size_t seq_len = 0;
    std::vector<int> ids;  // batch * seq_len
    std::vector<SlotGroup> slots;
    std::vector<RowPatch<Real>> patches;
};

struct GraphResult {
    Var logits;
    std::vector<Var> layer_outputs;  // one per layer
};

/// Pre-norm decoder-only transformer with learned positions and tied
/// input/output embeddings.
template <typename Real>
class Transformer {
public:
    struct Block {
        Parameter<Real> ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o;
        Parameter<Real> ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
    };

    explicit Transformer(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    int hidden() const { return config_.hidden; }
    int layers() const { return config_.layers; }
    int vocab() const { return config_.vocab; }

    /// Deterministic re-initialisation from config().seed.
    void init_weights();
    void zero_weights();

    std::vector<Parameter<Real>*> parameters();
    std::vector<const Parameter<Real>*> parameters() const;
    std::size_t parameter_count() const;
    void zero_grad();

    const Parameter<Real>& token_embedding() const { return tok_emb_; }

    /// Training-mode graph: parameters become differentiable leaves.
    GraphResult build(Graph<Real>& g, const BatchInput<Real>& in);
    /// Inference graph over frozen weights; `g` must not be recording.
    GraphResult build(Graph<Real>& g, const BatchInput<Real>& in) const;

    ResidualTrace<Real> forward(const TokenSeq& seq, const LayerSet& taps = {}) const;
    ResidualTrace<Real> forward_patched(const TokenSeq& seq, std::span<const Intervention> interventions,
                                        const LayerSet& taps = {}) const;

    /// Root-mean-square of the token embedding table entries.
    Real embedding_rms() const;

private:
    template <typename Self>
    static GraphResult build_impl(Self& self, Graph<Real>& g, const BatchInput<Real>& in);

    BatchInput<Real> single_batch(Graph<Real>& g, const TokenSeq& seq) const;

    ModelConfig config_;
    Parameter<Real> tok_emb_, pos_emb_;
    std::vector<Block> blocks_;
    Parameter<Real> lnf_g_, lnf_b_;
};

extern template class Transformer<float>;
extern template class Transformer<double>;

using Model = Transformer<float>;
using Trace = ResidualTrace<float>;

/// Copies all weights between models of identical configuration.
template <typename Dst, typename Src>
void copy_weights(Transformer<Dst>& dst, const Transformer<Src>& src);

}  // namespace introspect::lm
