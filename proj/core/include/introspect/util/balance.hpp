#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace introspect::util {

struct CellCount {
    std::size_t available = 0;
    std::size_t kept = 0;
};

/// Cell key -> counts. Keys are tuples of strings so the CSV can split them into columns.
using Census = std::map<std::vector<std::string>, CellCount>;

template <typename T>
struct Balanced {
    std::vector<T> records;
    Census census;
};

/// Uniform without-replacement downsampling of every cell to min(cap, size).
/// `expected` cells are listed in the census even when empty. Output order is
/// by cell key, then by original index.
template <typename T, typename KeyFn>
Balanced<T> balance_cells(std::span<const T> items, KeyFn&& key, std::size_t cap, std::uint64_t seed,
                          const std::vector<std::vector<std::string>>& expected = {}) {
    std::map<std::vector<std::string>, std::vector<std::size_t>> cells;
    for (const auto& k : expected) cells[k];
    for (std::size_t i = 0; i < items.size(); ++i) cells[key(items[i])].push_back(i);
    Balanced<T> out;
    std::mt19937_64 rng(seed);
    for (auto& [k, idx] : cells) {
        std::vector<std::size_t> pick = idx;
        std::shuffle(pick.begin(), pick.end(), rng);
        pick.resize(std::min(cap, pick.size()));
        std::sort(pick.begin(), pick.end());
        out.census[k] = {idx.size(), pick.size()};
        for (std::size_t i : pick) out.records.push_back(items[i]);
    }
    return out;
}

inline void write_census_csv(const std::filesystem::path& path, const std::vector<std::string>& key_columns,
                             const Census& census) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& c : key_columns) out << c << ',';
    out << "available,kept\n";
    for (const auto& [k, n] : census) {
        if (k.size() != key_columns.size()) throw std::invalid_argument("census key has the wrong arity");
        for (const auto& part : k) out << part << ',';
        out << n.available << ',' << n.kept << '\n';
    }
}

}  // namespace introspect::util
