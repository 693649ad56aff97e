#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace introspect::pipeline {

/// Flat `key = value` settings. '#' starts a comment and
/// `include <path>` pulls in another file relative to the including one;
/// later assignments win.
class Config {
public:
    static Config parse(const std::string& text, const std::filesystem::path& base_dir = ".");
    static Config load(const std::filesystem::path& path);

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    std::string get(const std::string& key, const std::string& fallback) const;
    int get_int(const std::string& key, int fallback) const;
    double get_double(const std::string& key, double fallback) const;
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<double> get_doubles(const std::string& key, const std::vector<double>& fallback) const;

    const std::map<std::string, std::string>& values() const { return values_; }
    /// Sorted `key=value` lines; hashing this gives the config hash.
    std::string canonical() const;
    std::string hash() const;

private:
    void parse_into(const std::string& text, const std::filesystem::path& base_dir, int depth);

    std::map<std::string, std::string> values_;
};

}  // namespace introspect::pipeline
