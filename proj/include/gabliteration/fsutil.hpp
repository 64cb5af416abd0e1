#pragma once

#include <string>

namespace gabl::fsutil {

std::string read_text_file(const std::string& path);

// Writes to <path>.tmp then renames, so readers never see a torn file.
void write_text_atomic(const std::string& path, const std::string& content);

}  // namespace gabl::fsutil
