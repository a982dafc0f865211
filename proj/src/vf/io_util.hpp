#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace vf {

std::vector<uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, std::span<const uint8_t> bytes);
std::string read_file_text(const std::string& path);
void write_file_text(const std::string& path, const std::string& text);

// Planar float image in [0,1], channel-major (3 x H x W).
struct ImageRgb {
  int width = 0;
  int height = 0;
  std::vector<double> data;

  double& at(int c, int y, int x) {
    return data[static_cast<size_t>((c * height + y) * width + x)];
  }
  double at(int c, int y, int x) const {
    return data[static_cast<size_t>((c * height + y) * width + x)];
  }
};

// Binary P6, 8-bit per sample. Values are rounded to bytes on write; a
// written-then-read image therefore re-serializes to identical bytes.
std::vector<uint8_t> encode_ppm(const ImageRgb& img);
ImageRgb decode_ppm(std::span<const uint8_t> bytes);

// Binary P5, 16-bit big-endian samples, maxval 65535.
std::vector<uint8_t> encode_pgm16(int width, int height, std::span<const uint16_t> samples);

// FNV-1a 64-bit, used for config hashes.
uint64_t fnv1a64(std::span<const uint8_t> bytes);
std::string hex64(uint64_t v);

}  // namespace vf
