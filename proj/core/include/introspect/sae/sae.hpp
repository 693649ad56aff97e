#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "introspect/lm/tensor.hpp"
#include "introspect/lm/transformer.hpp"

namespace introspect::sae {

using lm::Matrix;

struct ActivationTap {
    std::size_t input = 0;  // index into the corpus
    int layer = 0;
    std::size_t position = 0;
    std::vector<float> h;
};

/// One tap per (input, layer, position), ordered by input, then layer, then position.
std::vector<ActivationTap> collect_activations(const lm::Model& model, std::span<const std::vector<int>> corpus,
                                               const lm::LayerSet& layers);

/// Stacks the taps of one layer into an [n x d] matrix.
Matrix<float> tap_matrix(std::span<const ActivationTap> taps, int layer);

struct SaeConfig {
    int features = 256;  // m
    float l1 = 1e-3f;    // lambda
    int steps = 2000;
    int batch_size = 128;
    float lr = 1e-3f;
    std::uint64_t seed = 0;
};

struct SaeModel {
    int layer = 0;
    Matrix<float> w_enc;  // [m x d]
    Matrix<float> b_enc;  // [1 x m]
    Matrix<float> w_dec;  // [d x m], unit-norm columns
    Matrix<float> b_dec;  // [1 x d]
    float l1 = 0;
    float input_scale = 1;  // taps are multiplied by this before encoding
    double final_mse = 0;   // on scaled inputs
    double final_l0 = 0;

    int dim() const { return static_cast<int>(w_enc.cols()); }
    int features() const { return static_cast<int>(w_enc.rows()); }
    std::vector<float> encode(std::span<const float> x) const;
    std::vector<float> decode(std::span<const float> code) const;
    /// Mean squared reconstruction error and mean L0 over the rows of `x` (unscaled).
    std::pair<double, double> evaluate(const Matrix<float>& x) const;

    void save(const std::filesystem::path& path) const;
    static SaeModel load(const std::filesystem::path& path);
};

/// Taps are rescaled so their mean squared norm equals d before training.
SaeModel train_sae(const Matrix<float>& taps, int layer, const SaeConfig& config);

enum class Source { SAE, ACT, DACT };
std::string source_name(Source s);
Source parse_source(const std::string& s);

struct FeatureDirection {
    std::string id;
    int layer = 0;
    Source source = Source::SAE;
    std::vector<float> v;  // unit norm
};

/// One direction per decoder column, ordered by (layer, column).
std::vector<FeatureDirection> extract_features(std::span<const SaeModel> saes);

/// Normalized full activations, one per tap.
std::vector<FeatureDirection> act_features(std::span<const ActivationTap> taps);

struct CounterfactualTap {
    std::vector<int> x, x_prime;
    std::size_t position = 0;
};

struct DeltaResult {
    std::vector<FeatureDirection> features;
    std::size_t skipped = 0;  // pairs whose difference was below 1e-8
};

DeltaResult delta_features(const lm::Model& model, std::span<const CounterfactualTap> pairs, int layer);

/// a_v(x, l, t) = <h_{l,t}(x), v> for every t.
std::vector<float> feature_activation(const lm::Model& model, std::span<const float> v, int layer,
                                      std::span<const int> x);

void save_features(const std::filesystem::path& path, std::span<const FeatureDirection> features);
std::vector<FeatureDirection> load_features(const std::filesystem::path& path);

}  // namespace introspect::sae
