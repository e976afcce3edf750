#pragma once

#include <cstdint>
#include <vector>

#include "garfont/tensor.hpp"

namespace garfont {

// Single-channel raster glyph in [0,1]. Background is 1.0 (white paper), ink
// approaches 0.0. Square, with H == W.
struct GlyphImage {
  int char_id = -1;
  int style_id = -1;
  int h = 0, w = 0;
  std::vector<double> pixels;  // row-major, h*w

  double at(int y, int x) const { return pixels[static_cast<size_t>(y) * w + x]; }
  double& at(int y, int x) { return pixels[static_cast<size_t>(y) * w + x]; }

  static GlyphImage blank(int resolution, double value = 1.0) {
    GlyphImage g;
    g.h = g.w = resolution;
    g.pixels.assign(static_cast<size_t>(resolution) * resolution, value);
    return g;
  }
};

inline Tensor image_to_tensor(const GlyphImage& g) {
  return Tensor::from_data({1, g.h, g.w}, g.pixels);
}

inline GlyphImage tensor_to_image(const Tensor& t, int char_id = -1,
                                  int style_id = -1) {
  GlyphImage g;
  g.char_id = char_id;
  g.style_id = style_id;
  if (t.shape().ndim() == 3) {
    g.h = t.shape()[1];
    g.w = t.shape()[2];
  } else {
    g.h = t.shape()[0];
    g.w = t.shape()[1];
  }
  g.pixels = t.data();
  return g;
}

inline double image_l1(const GlyphImage& a, const GlyphImage& b) {
  double s = 0;
  for (size_t i = 0; i < a.pixels.size(); ++i)
    s += std::abs(a.pixels[i] - b.pixels[i]);
  return s / static_cast<double>(a.pixels.size());
}

// 8-bit quantization used for PNG persistence (round-half-up).
std::vector<uint8_t> image_to_bytes(const GlyphImage& g);
GlyphImage image_from_bytes(const std::vector<uint8_t>& bytes, int h, int w);

}  // namespace garfont
