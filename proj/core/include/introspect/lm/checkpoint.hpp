#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "introspect/lm/projection.hpp"
#include "introspect/lm/transformer.hpp"

namespace introspect::lm {

struct NamedTensor {
    std::string name;
    Matrix<float> value;
};

/// Binary container: 8-byte magic, u64 header length, JSON header, then the
/// tensors as little-endian row-major f32 in header order.
struct Container {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<NamedTensor> tensors;

    const Matrix<float>& get(const std::string& name) const;
};

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

void save_model(const std::filesystem::path& path, const Model& model, const nlohmann::json& meta = nlohmann::json::object());
Model load_model(const std::filesystem::path& path);

void save_projections(const std::filesystem::path& path, const ProjectionSet& projections);
ProjectionSet load_projections(const std::filesystem::path& path);

}  // namespace introspect::lm
