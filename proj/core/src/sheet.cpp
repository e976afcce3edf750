#include "garfont/sheet.hpp"

#include <algorithm>
#include <cctype>

#include "garfont/common.hpp"
#include "garfont/image_io.hpp"

namespace garfont::sheet {

namespace {

// 5x7 column bitmaps, LSB = top row. Uppercase letters, digits, and the
// separators that appear in labels and hex hashes.
struct Glyph5x7 {
  char ch;
  uint8_t col[5];
};

constexpr Glyph5x7 kFont[] = {
    {'A', {0x7E, 0x09, 0x09, 0x09, 0x7E}}, {'B', {0x7F, 0x49, 0x49, 0x49, 0x36}},
    {'C', {0x3E, 0x41, 0x41, 0x41, 0x22}}, {'D', {0x7F, 0x41, 0x41, 0x41, 0x3E}},
    {'E', {0x7F, 0x49, 0x49, 0x49, 0x41}}, {'F', {0x7F, 0x09, 0x09, 0x09, 0x01}},
    {'G', {0x3E, 0x41, 0x49, 0x49, 0x7A}}, {'H', {0x7F, 0x08, 0x08, 0x08, 0x7F}},
    {'I', {0x00, 0x41, 0x7F, 0x41, 0x00}}, {'J', {0x20, 0x40, 0x41, 0x3F, 0x01}},
    {'K', {0x7F, 0x08, 0x14, 0x22, 0x41}}, {'L', {0x7F, 0x40, 0x40, 0x40, 0x40}},
    {'M', {0x7F, 0x02, 0x0C, 0x02, 0x7F}}, {'N', {0x7F, 0x04, 0x08, 0x10, 0x7F}},
    {'O', {0x3E, 0x41, 0x41, 0x41, 0x3E}}, {'P', {0x7F, 0x09, 0x09, 0x09, 0x06}},
    {'Q', {0x3E, 0x41, 0x51, 0x21, 0x5E}}, {'R', {0x7F, 0x09, 0x19, 0x29, 0x46}},
    {'S', {0x46, 0x49, 0x49, 0x49, 0x31}}, {'T', {0x01, 0x01, 0x7F, 0x01, 0x01}},
    {'U', {0x3F, 0x40, 0x40, 0x40, 0x3F}}, {'V', {0x1F, 0x20, 0x40, 0x20, 0x1F}},
    {'W', {0x3F, 0x40, 0x38, 0x40, 0x3F}}, {'X', {0x63, 0x14, 0x08, 0x14, 0x63}},
    {'Y', {0x07, 0x08, 0x70, 0x08, 0x07}}, {'Z', {0x61, 0x51, 0x49, 0x45, 0x43}},
    {'0', {0x3E, 0x51, 0x49, 0x45, 0x3E}}, {'1', {0x00, 0x42, 0x7F, 0x40, 0x00}},
    {'2', {0x42, 0x61, 0x51, 0x49, 0x46}}, {'3', {0x21, 0x41, 0x45, 0x4B, 0x31}},
    {'4', {0x18, 0x14, 0x12, 0x7F, 0x10}}, {'5', {0x27, 0x45, 0x45, 0x45, 0x39}},
    {'6', {0x3C, 0x4A, 0x49, 0x49, 0x30}}, {'7', {0x01, 0x71, 0x09, 0x05, 0x03}},
    {'8', {0x36, 0x49, 0x49, 0x49, 0x36}}, {'9', {0x06, 0x49, 0x49, 0x29, 0x1E}},
    {' ', {0x00, 0x00, 0x00, 0x00, 0x00}}, {'-', {0x08, 0x08, 0x08, 0x08, 0x08}},
    {'_', {0x40, 0x40, 0x40, 0x40, 0x40}}, {':', {0x00, 0x36, 0x36, 0x00, 0x00}},
    {'.', {0x00, 0x60, 0x60, 0x00, 0x00}}, {'/', {0x20, 0x10, 0x08, 0x04, 0x02}},
};

const uint8_t* lookup(char c) {
  const char up = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  for (const auto& g : kFont)
    if (g.ch == up) return g.col;
  return kFont[36].col;  // space for anything unmapped
}

}  // namespace

void draw_text(std::vector<double>& canvas, int canvas_w, int x, int y,
               const std::string& text, double ink) {
  const int canvas_h = static_cast<int>(canvas.size()) / canvas_w;
  for (char c : text) {
    const uint8_t* cols = lookup(c);
    for (int cx = 0; cx < 5; ++cx)
      for (int cy = 0; cy < 7; ++cy)
        if (cols[cx] & (1 << cy)) {
          const int px = x + cx, py = y + cy;
          if (px >= 0 && px < canvas_w && py >= 0 && py < canvas_h)
            canvas[static_cast<size_t>(py) * canvas_w + px] = ink;
        }
    x += 6;
    if (x >= canvas_w) break;
  }
}

void render_sheet(const std::vector<GlyphImage>& generated,
                  const std::vector<GlyphImage>& reference,
                  const std::string& out_path, const std::string& row_label,
                  const std::string& config_hash) {
  if (generated.empty() || generated.size() != reference.size())
    throw ValidationError("render_sheet: lists must be non-empty and equal");
  const int res = generated[0].h;
  for (const auto& g : generated)
    if (g.h != res || g.w != res)
      throw ValidationError("render_sheet: mixed glyph sizes");

  const int n = static_cast<int>(generated.size());
  const int pad = 2;
  const int label_w = 70;
  const int cell = res + pad;
  const int footer_h = 11;
  const int width = label_w + n * cell + pad;
  const int height = pad + 2 * cell + footer_h;

  std::vector<double> canvas(static_cast<size_t>(width) * height, 1.0);
  auto blit = [&](const GlyphImage& img, int x0, int y0) {
    for (int y = 0; y < res; ++y)
      for (int x = 0; x < res; ++x)
        canvas[static_cast<size_t>(y0 + y) * width + x0 + x] = img.at(y, x);
  };
  for (int i = 0; i < n; ++i) {
    blit(generated[i], label_w + i * cell, pad);
    blit(reference[i], label_w + i * cell, pad + cell);
  }
  draw_text(canvas, width, 2, pad + res / 2 - 3, row_label.substr(0, 10));
  draw_text(canvas, width, 2, pad + cell + res / 2 - 3, "TRUTH");
  // footer: provenance strip
  draw_text(canvas, width, 2, height - footer_h + 2,
            "CFG " + config_hash.substr(0, 16));

  GlyphImage sheet;
  sheet.h = height;
  sheet.w = width;
  sheet.pixels = std::move(canvas);
  write_png_gray(out_path, width, height, image_to_bytes(sheet));
}

}  // namespace garfont::sheet
