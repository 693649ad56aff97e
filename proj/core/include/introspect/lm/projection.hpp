#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "introspect/lm/tensor.hpp"

namespace introspect::lm {

/// Per-target-layer linear maps from the target's hidden size to the explainer's.
struct ProjectionSet {
    int source_dim = 0;
    int target_dim = 0;
    std::map<int, Parameter<float>> maps;  // layer -> [target_dim x source_dim]

    static ProjectionSet identity(int layers, int dim);
    /// Gaussian entries with variance 1 / source_dim.
    static ProjectionSet random(int layers, int source_dim, int target_dim, std::uint64_t seed);

    const Parameter<float>& at(int layer) const;
    Parameter<float>& at(int layer);
    std::vector<float> apply(int layer, std::span<const float> v) const;
    std::vector<Parameter<float>*> parameters();
    void set_trainable(bool trainable);
};

}  // namespace introspect::lm
