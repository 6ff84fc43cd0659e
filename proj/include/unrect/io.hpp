#pragma once

#include <filesystem>
#include <string>

namespace unrect {

/// Writes `content` to a temporary sibling and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);

/// "%.17g" formatting.
std::string format_double(double v);

}  // namespace unrect
