#include "vf/io_util.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "vf/error.hpp"

namespace vf {

std::vector<uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::io, "cannot open: " + path);
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(f)),
                              std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::string& path, std::span<const uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::io, "cannot open for write: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) fail(ErrorCode::io, "write failed: " + path);
}

std::string read_file_text(const std::string& path) {
  auto bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

void write_file_text(const std::string& path, const std::string& text) {
  write_file_bytes(path, std::span<const uint8_t>(
                             reinterpret_cast<const uint8_t*>(text.data()), text.size()));
}

std::vector<uint8_t> encode_ppm(const ImageRgb& img) {
  char header[64];
  int n = std::snprintf(header, sizeof(header), "P6\n%d %d\n255\n", img.width, img.height);
  std::vector<uint8_t> out(header, header + n);
  out.reserve(out.size() + static_cast<size_t>(img.width) * img.height * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        double v = std::clamp(img.at(c, y, x), 0.0, 1.0);
        out.push_back(static_cast<uint8_t>(std::lround(v * 255.0)));
      }
    }
  }
  return out;
}

namespace {

// Reads one whitespace-delimited ASCII token, skipping '#' comments.
size_t next_token(std::span<const uint8_t> b, size_t pos, std::string& tok) {
  tok.clear();
  while (pos < b.size()) {
    char c = static_cast<char>(b[pos]);
    if (c == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
    } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
      if (!tok.empty()) return pos;
      ++pos;
    } else {
      tok.push_back(c);
      ++pos;
    }
  }
  return pos;
}

}  // namespace

ImageRgb decode_ppm(std::span<const uint8_t> bytes) {
  std::string tok;
  size_t pos = next_token(bytes, 0, tok);
  if (tok != "P6") fail(ErrorCode::parse, "ppm: bad magic '" + tok + "'");
  pos = next_token(bytes, pos, tok);
  int w = std::atoi(tok.c_str());
  pos = next_token(bytes, pos, tok);
  int h = std::atoi(tok.c_str());
  pos = next_token(bytes, pos, tok);
  int maxval = std::atoi(tok.c_str());
  if (w <= 0 || h <= 0 || maxval != 255) fail(ErrorCode::parse, "ppm: bad header");
  pos += 1;  // single whitespace after maxval
  size_t need = static_cast<size_t>(w) * h * 3;
  if (bytes.size() < pos + need) fail(ErrorCode::parse, "ppm: truncated pixel data");
  ImageRgb img;
  img.width = w;
  img.height = h;
  img.data.assign(static_cast<size_t>(3) * w * h, 0.0);
  size_t i = pos;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        img.at(c, y, x) = static_cast<double>(bytes[i++]) / 255.0;
      }
    }
  }
  return img;
}

std::vector<uint8_t> encode_pgm16(int width, int height, std::span<const uint16_t> samples) {
  if (static_cast<size_t>(width) * height != samples.size()) {
    fail(ErrorCode::invalid_argument, "pgm16: sample count does not match extent");
  }
  char header[64];
  int n = std::snprintf(header, sizeof(header), "P5\n%d %d\n65535\n", width, height);
  std::vector<uint8_t> out(header, header + n);
  out.reserve(out.size() + samples.size() * 2);
  for (uint16_t s : samples) {
    out.push_back(static_cast<uint8_t>(s >> 8));  // most significant byte first
    out.push_back(static_cast<uint8_t>(s & 0xff));
  }
  return out;
}

uint64_t fnv1a64(std::span<const uint8_t> bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

}  // namespace vf
