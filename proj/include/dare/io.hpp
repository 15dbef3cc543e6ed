#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

namespace dare {

/// Shortest decimal representation that round-trips to the same double.
std::string format_double(double v);

/// Writes to `<path>.tmp` and renames over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

std::string read_file(const std::filesystem::path& path);

/// 64-bit FNV-1a, hex encoded.
std::string fnv1a_hex(const std::string& data);

}  // namespace dare
