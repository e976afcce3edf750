#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "garfont/image.hpp"

namespace garfont {

// Grayscale 8-bit PNG read/write (the dataset's on-disk glyph format).
void write_png_gray(const std::string& path, int w, int h,
                    const std::vector<uint8_t>& pixels);
std::vector<uint8_t> read_png_gray(const std::string& path, int* w, int* h);

void save_glyph_png(const std::string& path, const GlyphImage& g);
GlyphImage load_glyph_png(const std::string& path, int char_id = -1,
                          int style_id = -1);

std::string sha256_hex(const uint8_t* data, size_t len);
std::string sha256_hex(const std::string& s);
std::string sha256_file(const std::string& path);

}  // namespace garfont
