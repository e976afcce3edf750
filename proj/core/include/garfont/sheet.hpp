#pragma once

#include <string>
#include <vector>

#include "garfont/image.hpp"

namespace garfont::sheet {

// PNG grid with generated glyphs above their references, a text label per
// row, and a footer strip carrying the config hash for provenance.
void render_sheet(const std::vector<GlyphImage>& generated,
                  const std::vector<GlyphImage>& reference,
                  const std::string& out_path, const std::string& row_label,
                  const std::string& config_hash);

// 5x7 bitmap text used for sheet labels (A-Z, digits, a few separators).
void draw_text(std::vector<double>& canvas, int canvas_w, int x, int y,
               const std::string& text, double ink = 0.0);

}  // namespace garfont::sheet
