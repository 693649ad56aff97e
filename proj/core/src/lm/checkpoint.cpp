#include "introspect/lm/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace introspect::lm {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'I', 'N', 'T', 'R', 'C', 'K', 'P', '1'};

}  // namespace

const Matrix<float>& Container::get(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return t.value;
    }
    throw std::out_of_range("container has no tensor named '" + name + "'");
}

void write_container(const std::filesystem::path& path, const Container& c) {
    nlohmann::json header;
    header["meta"] = c.meta;
    header["tensors"] = nlohmann::json::array();
    for (const auto& t : c.tensors) {
        header["tensors"].push_back({{"name", t.name}, {"rows", t.value.rows()}, {"cols", t.value.cols()}});
    }
    const std::string text = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(kMagic, sizeof kMagic);
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : c.tensors) {
        out.write(reinterpret_cast<const char*>(t.value.data()), static_cast<std::streamsize>(t.value.size() * sizeof(float)));
    }
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

Container read_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) {
        throw std::runtime_error(path.string() + " is not a weight container (bad magic)");
    }
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || len > (1u << 28)) throw std::runtime_error(path.string() + ": corrupt header length");
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw std::runtime_error(path.string() + ": truncated header");
    const auto header = nlohmann::json::parse(text);
    Container c;
    c.meta = header.at("meta");
    for (const auto& t : header.at("tensors")) {
        NamedTensor nt{t.at("name").get<std::string>(),
                       Matrix<float>(t.at("rows").get<std::size_t>(), t.at("cols").get<std::size_t>())};
        in.read(reinterpret_cast<char*>(nt.value.data()), static_cast<std::streamsize>(nt.value.size() * sizeof(float)));
        if (!in) throw std::runtime_error(path.string() + ": truncated tensor '" + nt.name + "'");
        c.tensors.push_back(std::move(nt));
    }
    return c;
}

void save_model(const std::filesystem::path& path, const Model& model, const nlohmann::json& meta) {
    Container c;
    c.meta = meta;
    c.meta["kind"] = "transformer";
    c.meta["config"] = model.config().to_json();
    for (const Parameter<float>* p : model.parameters()) c.tensors.push_back({p->name, p->value});
    write_container(path, c);
}

Model load_model(const std::filesystem::path& path) {
    const Container c = read_container(path);
    if (c.meta.value("kind", "") != "transformer") throw std::runtime_error(path.string() + " does not hold a transformer");
    Model model(ModelConfig::from_json(c.meta.at("config")));
    for (Parameter<float>* p : model.parameters()) {
        const Matrix<float>& v = c.get(p->name);
        if (!v.same_shape(p->value)) throw std::runtime_error(path.string() + ": shape mismatch for " + p->name);
        p->value = v;
    }
    return model;
}

void save_projections(const std::filesystem::path& path, const ProjectionSet& projections) {
    Container c;
    c.meta = {{"kind", "projections"}, {"source_dim", projections.source_dim}, {"target_dim", projections.target_dim}};
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& [l, p] : projections.maps) {
        layers.push_back(l);
        c.tensors.push_back({"proj." + std::to_string(l), p.value});
    }
    c.meta["layers"] = layers;
    write_container(path, c);
}

ProjectionSet load_projections(const std::filesystem::path& path) {
    const Container c = read_container(path);
    if (c.meta.value("kind", "") != "projections") throw std::runtime_error(path.string() + " does not hold projections");
    ProjectionSet s;
    s.source_dim = c.meta.at("source_dim").get<int>();
    s.target_dim = c.meta.at("target_dim").get<int>();
    for (int l : c.meta.at("layers")) {
        Parameter<float> p("proj." + std::to_string(l), s.target_dim, s.source_dim, false);
        p.value = c.get(p.name);
        p.grad = Matrix<float>(p.value.rows(), p.value.cols());
        s.maps.emplace(l, std::move(p));
    }
    return s;
}

}  // namespace introspect::lm
