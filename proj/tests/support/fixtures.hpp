#pragma once

#include <vector>

#include "introspect/lm/transformer.hpp"
#include "introspect/pipeline/world.hpp"

namespace fixtures {

inline const introspect::pipeline::World& world() {
    static const introspect::pipeline::World w = [] {
        introspect::pipeline::WorldConfig c;
        c.seed = 5;
        c.text_sentences = 60;
        return introspect::pipeline::gen_world(c);
    }();
    return w;
}

inline introspect::lm::Model tiny_model(std::uint64_t seed = 1, int layers = 4, int hidden = 16) {
    introspect::lm::ModelConfig c;
    c.layers = layers;
    c.hidden = hidden;
    c.heads = 2;
    c.vocab = world().vocab.size();
    c.context = 64;
    c.seed = seed;
    return introspect::lm::Model(c);
}

inline std::vector<std::vector<int>> text(std::size_t n) {
    const auto& t = world().text;
    return {t.begin(), t.begin() + static_cast<std::ptrdiff_t>(std::min(n, t.size()))};
}

}  // namespace fixtures
