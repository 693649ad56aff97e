#include "introspect/lm/projection.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>

namespace introspect::lm {

ProjectionSet ProjectionSet::identity(int layers, int dim) {
    ProjectionSet s;
    s.source_dim = s.target_dim = dim;
    for (int l = 0; l < layers; ++l) {
        Parameter<float> p("proj." + std::to_string(l), dim, dim, false);
        for (int i = 0; i < dim; ++i) p.value(i, i) = 1.0f;
        s.maps.emplace(l, std::move(p));
    }
    return s;
}

ProjectionSet ProjectionSet::random(int layers, int source_dim, int target_dim, std::uint64_t seed) {
    ProjectionSet s;
    s.source_dim = source_dim;
    s.target_dim = target_dim;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(double(source_dim)));
    for (int l = 0; l < layers; ++l) {
        Parameter<float> p("proj." + std::to_string(l), target_dim, source_dim, false);
        for (auto& v : p.value.storage()) v = static_cast<float>(dist(rng));
        s.maps.emplace(l, std::move(p));
    }
    return s;
}

const Parameter<float>& ProjectionSet::at(int layer) const {
    auto it = maps.find(layer);
    if (it == maps.end()) throw std::out_of_range("ProjectionSet: no projection for layer " + std::to_string(layer));
    return it->second;
}

Parameter<float>& ProjectionSet::at(int layer) {
    return const_cast<Parameter<float>&>(std::as_const(*this).at(layer));
}

std::vector<float> ProjectionSet::apply(int layer, std::span<const float> v) const {
    const Parameter<float>& p = at(layer);
    if (v.size() != static_cast<std::size_t>(source_dim)) {
        throw std::invalid_argument("ProjectionSet: vector has dimension " + std::to_string(v.size()) + ", expected " +
                                    std::to_string(source_dim));
    }
    std::vector<float> out(target_dim, 0.0f);
    for (int i = 0; i < target_dim; ++i) {
        float s = 0.0f;
        for (int j = 0; j < source_dim; ++j) s += p.value(i, j) * v[j];
        out[i] = s;
    }
    return out;
}

std::vector<Parameter<float>*> ProjectionSet::parameters() {
    std::vector<Parameter<float>*> out;
    for (auto& [l, p] : maps) out.push_back(&p);
    return out;
}

void ProjectionSet::set_trainable(bool trainable) {
    for (auto& [l, p] : maps) p.trainable = trainable;
}

}  // namespace introspect::lm
