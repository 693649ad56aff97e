#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace introspect::pipeline {

inline constexpr const char* kToolVersion = "0.1.0";

struct ArtifactRef {
    std::string path;  // relative to the workspace root
    std::string sha256;
};

struct RunManifest {
    std::string id;     // unique per stage invocation, e.g. "train-explainer/feat-AonA-joint-f1-none"
    std::string stage;
    std::string config_hash;
    std::uint64_t seed = 0;
    std::string tool_version = kToolVersion;
    double wall_seconds = 0;
    std::vector<ArtifactRef> inputs, outputs;

    nlohmann::json to_json() const;
    static RunManifest from_json(const nlohmann::json& j);
};

/// Raised when an input artifact is absent or differs from what its producer recorded.
class ArtifactError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Manifests live under <root>/manifests; each output path belongs to exactly one of them.
class ManifestStore {
public:
    explicit ManifestStore(std::filesystem::path root);

    const std::filesystem::path& root() const { return root_; }
    std::filesystem::path manifest_path(const std::string& id) const;
    std::optional<RunManifest> find(const std::string& id) const;

    /// Hashes each input and checks it against the manifest that produced it.
    std::vector<ArtifactRef> verify_inputs(const std::vector<std::string>& paths) const;
    /// True when the manifest exists and all its outputs are present with matching hashes.
    bool up_to_date(const std::string& id) const;
    void write(const RunManifest& m) const;
    std::vector<RunManifest> all() const;

private:
    std::optional<RunManifest> producer(const std::string& path) const;

    std::filesystem::path root_;
};

}  // namespace introspect::pipeline
