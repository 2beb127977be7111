#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace pivot {

std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temporary file, then renames over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

/// FNV-1a 64 of the file contents, as 16 lowercase hex digits.
std::string file_checksum(const std::filesystem::path& path);

std::string hex64(std::uint64_t v);

} // namespace pivot
