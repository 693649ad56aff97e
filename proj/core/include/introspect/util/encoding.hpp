#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace introspect::util {

/// Base64 of the little-endian f32 bytes of `v`.
std::string encode_f32(std::span<const float> v);
std::vector<float> decode_f32(std::string_view text);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace introspect::util
