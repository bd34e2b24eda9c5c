#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace lcmigrate {

/// Writes bytes to a sibling temp file and renames it over `path`, so readers
/// never observe a partially written file.
void atomic_write(const std::filesystem::path& path, std::string_view bytes);

std::string read_file(const std::filesystem::path& path);

/// Lower-case hex SHA-256 of a byte string / of a file's contents.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace lcmigrate
