#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace latentlab {

// P6 maxval-255 image from channel-major [-1, 1] floats [3, side, side].
void write_ppm(const std::string& path, std::span<const float> chw, std::size_t side);

// Reads a square P6 file back to channel-major [-1, 1] floats.
std::vector<float> read_ppm(const std::string& path, std::size_t* side_out);

// RFC-4180-style quoting: wraps the field when it contains a comma, quote,
// or newline.
std::string csv_field(const std::string& v);
std::string csv_join(const std::vector<std::string>& fields);
// Splits one CSV line written by csv_join (quoted fields unescaped).
std::vector<std::string> csv_split(const std::string& line);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

// mkdir -p; reports failure as IoError.
void ensure_dir(const std::string& path);

}  // namespace latentlab
