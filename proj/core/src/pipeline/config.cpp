#include "introspect/pipeline/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "introspect/util/encoding.hpp"

namespace introspect::pipeline {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

template <typename T>
T number(const std::string& key, const std::string& s) {
    T v{};
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) {
        throw std::invalid_argument("config key '" + key + "': cannot parse '" + s + "' as a number");
    }
    return v;
}

}  // namespace

Config Config::parse(const std::string& text, const std::filesystem::path& base_dir) {
    Config c;
    c.parse_into(text, base_dir, 0);
    return c;
}

Config Config::load(const std::filesystem::path& path) {
    Config c;
    c.parse_into(read_file(path), path.parent_path(), 0);
    return c;
}

void Config::parse_into(const std::string& text, const std::filesystem::path& base_dir, int depth) {
    if (depth > 16) throw std::runtime_error("config includes nest too deeply (cycle?)");
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(line.substr(0, line.find('#')));
        if (line.empty()) continue;
        if (line.rfind("include ", 0) == 0) {
            const auto path = base_dir / trim(line.substr(8));
            parse_into(read_file(path), path.parent_path(), depth + 1);
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value, got '" + line + "'");
        }
        const auto key = trim(line.substr(0, eq));
        if (key.empty()) throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
        values_[key] = trim(line.substr(eq + 1));
    }
}

std::string Config::get(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

int Config::get_int(const std::string& key, int fallback) const {
    return has(key) ? number<int>(key, values_.at(key)) : fallback;
}

double Config::get_double(const std::string& key, double fallback) const {
    return has(key) ? number<double>(key, values_.at(key)) : fallback;
}

std::uint64_t Config::get_u64(const std::string& key, std::uint64_t fallback) const {
    return has(key) ? number<std::uint64_t>(key, values_.at(key)) : fallback;
}

bool Config::get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const auto& v = values_.at(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw std::invalid_argument("config key '" + key + "': expected a boolean, got '" + v + "'");
}

std::vector<double> Config::get_doubles(const std::string& key, const std::vector<double>& fallback) const {
    if (!has(key)) return fallback;
    std::vector<double> out;
    std::istringstream in(values_.at(key));
    std::string item;
    while (std::getline(in, item, ',')) out.push_back(number<double>(key, trim(item)));
    return out;
}

std::string Config::canonical() const {
    std::string s;
    for (const auto& [k, v] : values_) s += k + "=" + v + "\n";
    return s;
}

std::string Config::hash() const { return util::sha256_hex(canonical()); }

}  // namespace introspect::pipeline
