#pragma once

#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

namespace introspect::util {

void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& rows);
std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);

}  // namespace introspect::util
