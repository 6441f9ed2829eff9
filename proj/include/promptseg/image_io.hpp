#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace promptseg::io {

/// 8-bit raster with 1 (gray) or 3 (RGB) interleaved channels.
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<std::uint8_t> pixels;
};

/// Throws LoadError when the file is missing or not a decodable PNG.
Raster read_png(const std::filesystem::path& path);
/// Throws InputError when the bytes are not a decodable PNG.
Raster decode_png(const std::vector<std::uint8_t>& bytes);
void write_png(const std::filesystem::path& path, const Raster& raster);
std::vector<std::uint8_t> encode_png(const Raster& raster);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
/// Throws InputError on characters outside the standard alphabet.
std::vector<std::uint8_t> base64_decode(const std::string& text);

}  // namespace promptseg::io
