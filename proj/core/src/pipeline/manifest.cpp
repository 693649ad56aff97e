#include "introspect/pipeline/manifest.hpp"

#include <algorithm>
#include <fstream>

#include "introspect/util/encoding.hpp"

namespace introspect::pipeline {

namespace fs = std::filesystem;

namespace {

nlohmann::json refs_json(const std::vector<ArtifactRef>& refs) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& r : refs) a.push_back({{"path", r.path}, {"sha256", r.sha256}});
    return a;
}

std::vector<ArtifactRef> refs_from(const nlohmann::json& a) {
    std::vector<ArtifactRef> out;
    for (const auto& r : a) out.push_back({r.at("path"), r.at("sha256")});
    return out;
}

std::string file_id(const std::string& id) {
    std::string s = id;
    for (char& c : s) {
        if (c == '/') c = '_';
    }
    return s;
}

}  // namespace

nlohmann::json RunManifest::to_json() const {
    return {{"id", id},
            {"stage", stage},
            {"config_hash", config_hash},
            {"seed", seed},
            {"tool_version", tool_version},
            {"wall_seconds", wall_seconds},
            {"inputs", refs_json(inputs)},
            {"outputs", refs_json(outputs)}};
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
    RunManifest m;
    m.id = j.at("id");
    m.stage = j.at("stage");
    m.config_hash = j.at("config_hash");
    m.seed = j.at("seed");
    m.tool_version = j.at("tool_version");
    m.wall_seconds = j.at("wall_seconds");
    m.inputs = refs_from(j.at("inputs"));
    m.outputs = refs_from(j.at("outputs"));
    return m;
}

ManifestStore::ManifestStore(fs::path root) : root_(std::move(root)) {}

fs::path ManifestStore::manifest_path(const std::string& id) const { return root_ / "manifests" / (file_id(id) + ".json"); }

std::optional<RunManifest> ManifestStore::find(const std::string& id) const {
    const auto p = manifest_path(id);
    if (!fs::exists(p)) return std::nullopt;
    std::ifstream in(p);
    return RunManifest::from_json(nlohmann::json::parse(in));
}

std::vector<RunManifest> ManifestStore::all() const {
    std::vector<RunManifest> out;
    const auto dir = root_ / "manifests";
    if (!fs::exists(dir)) return out;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        std::ifstream in(f);
        out.push_back(RunManifest::from_json(nlohmann::json::parse(in)));
    }
    return out;
}

std::optional<RunManifest> ManifestStore::producer(const std::string& path) const {
    for (auto& m : all()) {
        for (const auto& o : m.outputs) {
            if (o.path == path) return m;
        }
    }
    return std::nullopt;
}

std::vector<ArtifactRef> ManifestStore::verify_inputs(const std::vector<std::string>& paths) const {
    std::vector<ArtifactRef> out;
    for (const auto& p : paths) {
        const auto full = root_ / p;
        const auto prod = producer(p);
        if (!fs::exists(full)) {
            throw ArtifactError("missing input artifact " + full.string() +
                                (prod ? " (expected from stage " + prod->stage + ")" : " (run the stage that produces it first)"));
        }
        const auto h = util::sha256_file(full);
        if (prod) {
            for (const auto& o : prod->outputs) {
                if (o.path == p && o.sha256 != h) {
                    throw ArtifactError("hash mismatch for " + full.string() + ": manifest " + prod->id + " recorded " +
                                        o.sha256 + ", file has " + h);
                }
            }
        }
        out.push_back({p, h});
    }
    return out;
}

bool ManifestStore::up_to_date(const std::string& id) const {
    const auto m = find(id);
    if (!m) return false;
    for (const auto& o : m->outputs) {
        const auto full = root_ / o.path;
        if (!fs::exists(full) || util::sha256_file(full) != o.sha256) return false;
    }
    return true;
}

void ManifestStore::write(const RunManifest& m) const {
    const auto p = manifest_path(m.id);
    fs::create_directories(p.parent_path());
    std::ofstream out(p);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << m.to_json().dump(2) << '\n';
}

}  // namespace introspect::pipeline
