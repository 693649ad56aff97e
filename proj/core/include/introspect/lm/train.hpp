#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "introspect/lm/projection.hpp"
#include "introspect/lm/transformer.hpp"

namespace introspect::lm {

struct OptimizerConfig {
    int steps = 1000;
    int batch_size = 16;
    float lr = 3e-3f;
    float min_lr_ratio = 0.1f;  // cosine floor as a fraction of lr
    float warmup_frac = 0.05f;
    float weight_decay = 0.01f;
    float beta1 = 0.9f;
    float beta2 = 0.99f;
    float eps = 1e-8f;
    float clip = 1.0f;  // global gradient-norm clip; <= 0 disables
    std::uint64_t seed = 0;

    float lr_at(int step) const;
};

struct LossCurve {
    std::vector<double> loss;  // one entry per optimizer step

    /// Mean of the trailing `window` entries ending at `step` (inclusive).
    double moving_average(std::size_t step, std::size_t window) const;
    void write_csv(const std::filesystem::path& path) const;
};

/// Raised when a training step produces a non-finite loss.
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(int step, double loss);
    int step() const { return step_; }

private:
    int step_;
};

/// A continuous vector to insert at `position`; `layer` selects the projection
/// applied to it when a ProjectionSet is in use.
struct SlotSource {
    std::size_t position = 0;
    std::vector<float> vector;
    int layer = 0;
};

/// One supervised sequence. weights[i] scales the loss of predicting ids[i]
/// from the prefix ids[0..i); weights[0] is ignored.
struct TrainingExample {
    std::vector<int> ids;
    std::vector<float> weights;
    std::vector<SlotSource> slots;

    std::size_t supervised_tokens() const;
};

class AdamW {
public:
    AdamW(std::vector<Parameter<float>*> params, const OptimizerConfig& config);
    /// Applies one update using the gradients currently stored in the parameters.
    /// Returns the pre-clip global gradient norm.
    double step(int step_index);

private:
    std::vector<Parameter<float>*> params_;
    std::vector<std::vector<float>> m_, v_;
    OptimizerConfig config_;
};

/// Next-token pre-training on raw token sequences.
LossCurve train_lm(Model& model, std::span<const std::vector<int>> corpus, const OptimizerConfig& config);

struct FineTuneOptions {
    ProjectionSet* projections = nullptr;  // null: slot vectors are inserted raw
    bool train_model = true;
};

/// Masked cross-entropy fine-tuning; only tokens with non-zero weight count.
LossCurve fine_tune(Model& model, std::span<const TrainingExample> data, const OptimizerConfig& config,
                    const FineTuneOptions& options = {});

/// Weighted mean loss of a batch without updating anything.
double evaluate_loss(const Model& model, std::span<const TrainingExample> batch, const ProjectionSet* projections = nullptr);

}  // namespace introspect::lm
