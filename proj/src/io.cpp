#include "latentlab/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "latentlab/error.hpp"

namespace latentlab {

void write_ppm(const std::string& path, std::span<const float> chw, std::size_t side) {
  if (side == 0 || chw.size() != 3 * side * side)
    throw ShapeError("write_ppm: expected [3, side, side] pixel data");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_ppm: cannot open " + path);
  out << "P6\n" << side << " " << side << "\n255\n";
  const std::size_t plane = side * side;
  std::vector<unsigned char> row(3 * side);
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = chw[c * plane + y * side + x];
        const float scaled = (std::clamp(v, -1.0f, 1.0f) + 1.0f) * 0.5f * 255.0f;
        row[x * 3 + c] = static_cast<unsigned char>(std::lround(scaled));
      }
    }
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw IoError("write_ppm: write failed for " + path);
}

std::vector<float> read_ppm(const std::string& path, std::size_t* side_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_ppm: cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw IoError("read_ppm: not a P6 file: " + path);
  std::size_t w = 0, h = 0, maxval = 0;
  in >> w >> h >> maxval;
  if (!in || w == 0 || w != h || maxval != 255)
    throw IoError("read_ppm: unsupported header in " + path);
  in.get();  // single whitespace after the header
  std::vector<unsigned char> raw(3 * w * h);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw IoError("read_ppm: truncated pixel data in " + path);
  const std::size_t plane = w * h;
  std::vector<float> chw(3 * plane);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      chw[c * plane + i] = static_cast<float>(raw[i * 3 + c]) / 255.0f * 2.0f - 1.0f;
  if (side_out) *side_out = w;
  return chw;
}

std::string csv_field(const std::string& v) {
  if (v.find_first_of(",\"\n") == std::string::npos) return v;
  std::string out = "\"";
  for (char c : v) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::string csv_join(const std::vector<std::string>& fields) {
  std::string line;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) line += ',';
    line += csv_field(fields[i]);
  }
  return line;
}

std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_text_file: cannot open " + path);
  out << content;
  if (!out) throw IoError("write_text_file: write failed for " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_text_file: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void ensure_dir(const std::string& path) {
  std::error_code ec;
  std::filesystem::create_directories(path, ec);
  if (ec) throw IoError("ensure_dir: " + path + ": " + ec.message());
}

}  // namespace latentlab
