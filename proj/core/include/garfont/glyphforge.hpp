#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "garfont/image.hpp"
#include "garfont/rng.hpp"

namespace garfont::glyphforge {

// ---------------------------------------------------------------------------
// domain types
// ---------------------------------------------------------------------------

struct Stroke {
  enum class Kind { Polyline, Quadratic };
  Kind kind = Kind::Polyline;
  // Control points in the unit square. Quadratic strokes carry exactly three
  // (start, control, end); polylines carry two or more vertices.
  std::vector<std::array<double, 2>> points;
  double width_scale = 1.0;
};

struct CharSpec {
  int char_id = 0;
  std::vector<Stroke> strokes;  // 1..12
  void validate() const;
};

struct StyleSpec {
  int style_id = 0;
  double stroke_width = 0.06;  // fraction of image width, [0.02, 0.12]
  double slant = 0.0;          // radians, [-0.3, 0.3]
  double roundness = 0.5;      // corner rounding, [0, 1]
  double contrast = 0.5;       // horizontal-vs-vertical width ratio, [0, 1]
  bool serif = false;
  double jitter = 0.0;   // per-vertex perturbation scale, [0, 0.02]
  double density = 1.0;  // bounding-box scale, [0.8, 1.2]
  uint64_t seed = 0;

  void validate() const;
  // The fixed content-source style (the "Kaiti" analog at style id 0).
  static StyleSpec neutral(int id = 0);
};

enum class Split { Train, Ufsc, Ufuc, Aux };
const char* split_name(Split s);
Split split_from_name(const std::string& s);

struct DatasetConfig {
  int train_styles = 40;
  int eval_styles = 8;
  int train_chars = 96;
  int eval_chars = 32;
  int resolution = 32;
  uint64_t seed = 0;
  int render_threads = 0;  // 0 = hardware concurrency
  void validate() const;
};

struct DatasetManifest {
  int version = 1;
  DatasetConfig config;
  std::vector<StyleSpec> styles;  // ids 0..train-1 train, then eval
  std::vector<CharSpec> chars;    // ids 0..train-1 train, then eval
  std::vector<std::string> style_descriptions;

  int n_styles() const { return static_cast<int>(styles.size()); }
  int n_chars() const { return static_cast<int>(chars.size()); }
  bool style_is_eval(int style_id) const {
    return style_id >= config.train_styles;
  }
  bool char_is_eval(int char_id) const { return char_id >= config.train_chars; }
  Split split_of(int style_id, int char_id) const;
};

// ---------------------------------------------------------------------------
// operations
// ---------------------------------------------------------------------------

// Deterministic anti-aliased raster of a stroke program under a style.
// resolution must be 32 or 64.
GlyphImage render_glyph(const CharSpec& ch, const StyleSpec& style,
                        int resolution);

// Deterministic templated description ("A font that ..."), a function of the
// binned stylistic fields only (never the seed).
std::string describe_style(const StyleSpec& style);

// Additive Gaussian noise (std = sigma) over a contiguous rectangular region
// covering floor(area_fraction * H * W) pixels; result clamped to [0,1].
// Pixels outside the region are bit-unchanged.
GlyphImage corrupt(const GlyphImage& image, double sigma, double area_fraction,
                   uint64_t seed);

// Generates the style/char universe, renders every (style, char) pair, and
// persists manifest.json, glyphs/<style>/<char>.png, and meta.jsonl.
DatasetManifest build_dataset(const DatasetConfig& config,
                              const std::string& out_dir);

// Universe generation without rendering to disk (used by tests).
DatasetManifest generate_universe(const DatasetConfig& config);

void save_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest load_manifest(const std::string& path);

// ---------------------------------------------------------------------------
// in-memory dataset
// ---------------------------------------------------------------------------

struct Dataset {
  DatasetManifest manifest;
  std::string dir;
  std::vector<GlyphImage> images;  // [style_id * n_chars + char_id]

  const GlyphImage& glyph(int style_id, int char_id) const;
  std::vector<std::pair<int, int>> pairs(Split split) const;  // (style, char)
};

Dataset load_dataset(const std::string& dir);

// Seeded uniform sampling of reference characters from a style, excluding the
// target character when possible.
std::vector<int> sample_style_refs(const DatasetManifest& m, int style_id,
                                   int exclude_char, int n, Rng& rng);

}  // namespace garfont::glyphforge
