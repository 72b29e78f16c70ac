#pragma once

#include <string>
#include <string_view>

namespace msf {

/// Writes `contents` to a sibling temporary file and renames it over `path`,
/// so readers observe either the old file or the complete new one.
void write_file_atomic(const std::string& path, std::string_view contents);

}  // namespace msf
