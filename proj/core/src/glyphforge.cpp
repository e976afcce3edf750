#include "garfont/glyphforge.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "garfont/common.hpp"
#include "garfont/image_io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace garfont::glyphforge {

// ---------------------------------------------------------------------------
// validation
// ---------------------------------------------------------------------------

void CharSpec::validate() const {
  if (char_id < 0) throw ValidationError("CharSpec: char_id must be >= 0");
  if (strokes.empty() && char_id >= 0) {
    // empty stroke list is allowed (renders to blank) but capped at 12
  }
  if (strokes.size() > 12)
    throw ValidationError("CharSpec: at most 12 strokes");
  for (const auto& s : strokes) {
    if (s.kind == Stroke::Kind::Quadratic && s.points.size() != 3)
      throw ValidationError("CharSpec: quadratic stroke needs 3 points");
    if (s.kind == Stroke::Kind::Polyline && s.points.size() < 2)
      throw ValidationError("CharSpec: polyline needs >= 2 points");
    for (const auto& p : s.points)
      if (p[0] < 0 || p[0] > 1 || p[1] < 0 || p[1] > 1)
        throw ValidationError("CharSpec: control point outside unit square");
  }
}

void StyleSpec::validate() const {
  auto in = [](double v, double lo, double hi) { return v >= lo && v <= hi; };
  if (!in(stroke_width, 0.02, 0.12))
    throw ValidationError("StyleSpec: stroke_width outside [0.02, 0.12]");
  if (!in(slant, -0.3, 0.3))
    throw ValidationError("StyleSpec: slant outside [-0.3, 0.3]");
  if (!in(roundness, 0, 1))
    throw ValidationError("StyleSpec: roundness outside [0, 1]");
  if (!in(contrast, 0, 1))
    throw ValidationError("StyleSpec: contrast outside [0, 1]");
  if (!in(jitter, 0, 0.02))
    throw ValidationError("StyleSpec: jitter outside [0, 0.02]");
  if (!in(density, 0.8, 1.2))
    throw ValidationError("StyleSpec: density outside [0.8, 1.2]");
}

StyleSpec StyleSpec::neutral(int id) {
  StyleSpec s;
  s.style_id = id;
  s.stroke_width = 0.06;
  s.slant = 0.0;
  s.roundness = 0.3;
  s.contrast = 0.5;
  s.serif = false;
  s.jitter = 0.0;
  s.density = 1.0;
  s.seed = 0;
  return s;
}

void DatasetConfig::validate() const {
  if (train_styles <= 0 || train_chars <= 0)
    throw ConfigError("dataset: held-out counts consume the whole universe");
  if (eval_styles <= 0)
    throw ValidationError("dataset: zero unseen styles (UFSC/UFUC undefined)");
  if (eval_chars <= 0)
    throw ValidationError("dataset: zero unseen characters (UFUC undefined)");
  if (resolution != 32 && resolution != 64)
    throw ConfigError("dataset: resolution must be 32 or 64");
}

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Ufsc: return "ufsc";
    case Split::Ufuc: return "ufuc";
    case Split::Aux: return "aux";
  }
  return "?";
}

Split split_from_name(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "ufsc") return Split::Ufsc;
  if (s == "ufuc") return Split::Ufuc;
  if (s == "aux") return Split::Aux;
  throw ValidationError("unknown split name: " + s);
}

Split DatasetManifest::split_of(int style_id, int char_id) const {
  const bool es = style_is_eval(style_id);
  const bool ec = char_is_eval(char_id);
  if (!es && !ec) return Split::Train;
  if (es && !ec) return Split::Ufsc;
  if (es && ec) return Split::Ufuc;
  return Split::Aux;
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

namespace {

using Pt = std::array<double, 2>;

Pt lerp(const Pt& a, const Pt& b, double t) {
  return {a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t};
}

double dist(const Pt& a, const Pt& b) {
  return std::hypot(a[0] - b[0], a[1] - b[1]);
}

std::vector<Pt> subdivide_quadratic(const Pt& p0, const Pt& c, const Pt& p1,
                                    int segments) {
  std::vector<Pt> out;
  out.reserve(segments + 1);
  for (int i = 0; i <= segments; ++i) {
    const double t = static_cast<double>(i) / segments;
    const Pt a = lerp(p0, c, t);
    const Pt b = lerp(c, p1, t);
    out.push_back(lerp(a, b, t));
  }
  return out;
}

// Replaces interior polyline corners with quadratic arcs whose span grows
// with the roundness factor.
std::vector<Pt> round_corners(const std::vector<Pt>& pts, double roundness) {
  if (pts.size() < 3 || roundness <= 1e-9) return pts;
  std::vector<Pt> out;
  out.push_back(pts.front());
  for (size_t i = 1; i + 1 < pts.size(); ++i) {
    const Pt& prev = pts[i - 1];
    const Pt& v = pts[i];
    const Pt& next = pts[i + 1];
    const double lin = dist(prev, v), lout = dist(v, next);
    const double r = roundness * 0.4 * std::min(lin, lout);
    if (r < 1e-6 || lin < 1e-9 || lout < 1e-9) {
      out.push_back(v);
      continue;
    }
    const Pt a = lerp(v, prev, r / lin);
    const Pt b = lerp(v, next, r / lout);
    auto arc = subdivide_quadratic(a, v, b, 8);
    out.insert(out.end(), arc.begin(), arc.end());
  }
  out.push_back(pts.back());
  return out;
}

struct Segment {
  Pt a, b;
  double half_width;  // unit coordinates, orientation-adjusted
};

double contrast_scale(double contrast, const Pt& a, const Pt& b) {
  const double dx = b[0] - a[0], dy = b[1] - a[1];
  const double len2 = dx * dx + dy * dy;
  if (len2 < 1e-18) return 1.0;
  // cos(2*theta) from the direction vector, theta = 0 for horizontal strokes
  const double cos2t = (dx * dx - dy * dy) / len2;
  return 1.0 + 0.8 * (contrast - 0.5) * cos2t;
}

double point_segment_dist(double px, double py, const Segment& s) {
  const double vx = s.b[0] - s.a[0], vy = s.b[1] - s.a[1];
  const double wx = px - s.a[0], wy = py - s.a[1];
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 1e-18 ? (wx * vx + wy * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(px - (s.a[0] + t * vx), py - (s.a[1] + t * vy));
}

}  // namespace

GlyphImage render_glyph(const CharSpec& ch, const StyleSpec& style,
                        int resolution) {
  if (resolution != 32 && resolution != 64)
    throw ConfigError("render_glyph: resolution must be 32 or 64, got " +
                      std::to_string(resolution));
  ch.validate();
  style.validate();

  GlyphImage img = GlyphImage::blank(resolution);
  img.char_id = ch.char_id;
  img.style_id = style.style_id;
  if (ch.strokes.empty()) return img;

  Rng jitter_rng(substream_seed(style.seed,
                                "jitter/" + std::to_string(ch.char_id)));

  const double shear = std::tan(style.slant);
  std::vector<Segment> segs;
  auto emit_polyline = [&](const std::vector<Pt>& pts, double width_scale) {
    for (size_t i = 0; i + 1 < pts.size(); ++i) {
      Pt a = pts[i], b = pts[i + 1];
      // density about the canvas center, then slant shear
      for (Pt* p : {&a, &b}) {
        (*p)[0] = 0.5 + ((*p)[0] - 0.5) * style.density;
        (*p)[1] = 0.5 + ((*p)[1] - 0.5) * style.density;
        (*p)[0] += shear * (0.5 - (*p)[1]);
      }
      const double hw = 0.5 * style.stroke_width * width_scale *
                        contrast_scale(style.contrast, a, b);
      segs.push_back({a, b, hw});
    }
  };

  for (const auto& stroke : ch.strokes) {
    // jitter control points (draws happen even when scale is zero would be
    // wasteful; zero jitter consumes no RNG state)
    std::vector<Pt> pts = stroke.points;
    if (style.jitter > 0)
      for (auto& p : pts) {
        p[0] += jitter_rng.normal(0, style.jitter);
        p[1] += jitter_rng.normal(0, style.jitter);
      }
    std::vector<Pt> poly;
    if (stroke.kind == Stroke::Kind::Quadratic)
      poly = subdivide_quadratic(pts[0], pts[1], pts[2], 24);
    else
      poly = round_corners(pts, style.roundness);
    emit_polyline(poly, stroke.width_scale);

    if (style.serif && poly.size() >= 2) {
      // short perpendicular caps at both terminals
      for (int end = 0; end < 2; ++end) {
        const Pt p = end == 0 ? poly.front() : poly.back();
        const Pt q = end == 0 ? poly[1] : poly[poly.size() - 2];
        const double dx = p[0] - q[0], dy = p[1] - q[1];
        const double len = std::hypot(dx, dy);
        if (len < 1e-9) continue;
        const double nx = -dy / len, ny = dx / len;
        const double half = 1.1 * style.stroke_width * stroke.width_scale;
        emit_polyline({{p[0] - nx * half, p[1] - ny * half},
                       {p[0] + nx * half, p[1] + ny * half}},
                      0.7 * stroke.width_scale);
      }
    }
  }

  // coverage = max over segments of a signed-distance ramp one pixel wide
  const double aa = 1.0 / resolution;
  std::vector<double> coverage(img.pixels.size(), 0.0);
  for (const auto& s : segs) {
    const double pad = s.half_width + aa;
    const int x0 = std::max(0, static_cast<int>(std::floor(
                                   (std::min(s.a[0], s.b[0]) - pad) * resolution)));
    const int x1 = std::min(resolution - 1,
                            static_cast<int>(std::ceil(
                                (std::max(s.a[0], s.b[0]) + pad) * resolution)));
    const int y0 = std::max(0, static_cast<int>(std::floor(
                                   (std::min(s.a[1], s.b[1]) - pad) * resolution)));
    const int y1 = std::min(resolution - 1,
                            static_cast<int>(std::ceil(
                                (std::max(s.a[1], s.b[1]) + pad) * resolution)));
    for (int y = y0; y <= y1; ++y) {
      const double py = (y + 0.5) / resolution;
      for (int x = x0; x <= x1; ++x) {
        const double px = (x + 0.5) / resolution;
        const double d = point_segment_dist(px, py, s);
        const double cov = std::clamp((s.half_width - d) / aa + 0.5, 0.0, 1.0);
        double& cell = coverage[static_cast<size_t>(y) * resolution + x];
        cell = std::max(cell, cov);
      }
    }
  }
  for (size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = 1.0 - coverage[i];
  return img;
}

// ---------------------------------------------------------------------------
// style description
// ---------------------------------------------------------------------------

namespace {

struct StyleBins {
  std::string weight, posture, corners, serif, edges, wcontrast, proportions;
};

StyleBins bin_style(const StyleSpec& s) {
  StyleBins b;
  b.weight = s.stroke_width < 0.045 ? "light"
             : s.stroke_width < 0.08 ? "medium"
                                     : "bold";
  b.posture = std::abs(s.slant) < 0.08 ? "upright" : "slanted";
  b.corners = s.roundness < 0.5 ? "angular" : "rounded";
  b.serif = s.serif ? "subtle serifs" : "no serifs";
  b.edges = s.jitter < 0.008 ? "smooth" : "rough";
  b.wcontrast = std::abs(s.contrast - 0.5) < 0.15 ? "uniform" : "contrasting";
  b.proportions = s.density < 0.95  ? "compact"
                  : s.density <= 1.05 ? "balanced"
                                      : "generous";
  return b;
}

std::string tone_for(const StyleBins& b) {
  const bool serif = b.serif == "subtle serifs";
  const bool rounded = b.corners == "rounded";
  if (serif && rounded) return "classical";
  if (serif) return "formal";
  if (rounded) return "gentle";
  return "modern";
}

}  // namespace

std::string describe_style(const StyleSpec& style) {
  style.validate();
  const StyleBins b = bin_style(style);
  std::string out = "A font that features " + b.weight + " strokes with " +
                    b.corners + " corners and " + b.edges + " edges, an " +
                    b.posture + " posture, " + b.serif + ", " + b.wcontrast +
                    " stroke weight, and " + b.proportions +
                    " proportions, conveying a " + tone_for(b) +
                    ", coherent overall tone across the full glyph set.";
  return out;
}

// ---------------------------------------------------------------------------
// corruption
// ---------------------------------------------------------------------------

GlyphImage corrupt(const GlyphImage& image, double sigma, double area_fraction,
                   uint64_t seed) {
  if (area_fraction < 0 || area_fraction > 1)
    throw ValidationError("corrupt: area_fraction outside [0, 1]");
  if (sigma < 0) throw ValidationError("corrupt: sigma must be >= 0");
  GlyphImage out = image;
  if (sigma == 0) return out;
  const int64_t target = static_cast<int64_t>(
      std::floor(area_fraction * image.h * image.w));
  if (target <= 0) return out;

  // Most-square factor pair of `target` that fits the canvas; when none
  // exists the rectangle is padded and trimmed to the exact count in raster
  // order.
  int best_rh = -1, best_rw = -1;
  for (int rh = static_cast<int>(std::sqrt(static_cast<double>(target)));
       rh >= 1; --rh) {
    if (target % rh != 0) continue;
    const int64_t rw = target / rh;
    if (rh <= image.h && rw <= image.w) {
      best_rh = rh;
      best_rw = static_cast<int>(rw);
      break;
    }
  }
  if (best_rh < 0) {
    best_rh = std::min<int64_t>(
        image.h, static_cast<int64_t>(std::ceil(std::sqrt((double)target))));
    best_rw = std::min<int64_t>(
        image.w, (target + best_rh - 1) / best_rh);
    while (static_cast<int64_t>(best_rh) * best_rw < target && best_rh < image.h)
      ++best_rh;
  }

  Rng rng(seed);
  const int top = static_cast<int>(rng.uniform_int(image.h - best_rh + 1));
  const int left = static_cast<int>(rng.uniform_int(image.w - best_rw + 1));
  int64_t remaining = target;
  for (int y = top; y < top + best_rh && remaining > 0; ++y)
    for (int x = left; x < left + best_rw && remaining > 0; ++x) {
      const double noisy = out.at(y, x) + rng.normal(0, sigma);
      out.at(y, x) = std::clamp(noisy, 0.0, 1.0);
      --remaining;
    }
  return out;
}

// ---------------------------------------------------------------------------
// universe generation
// ---------------------------------------------------------------------------

namespace {

constexpr double kLattice[5] = {0.15, 0.325, 0.5, 0.675, 0.85};

Pt lattice_point(Rng& rng) {
  return {kLattice[rng.uniform_int(5)], kLattice[rng.uniform_int(5)]};
}

CharSpec random_char(int char_id, Rng& rng) {
  CharSpec ch;
  ch.char_id = char_id;
  const int n_strokes = 3 + static_cast<int>(rng.uniform_int(7));  // 3..9
  for (int i = 0; i < n_strokes; ++i) {
    Stroke s;
    const double kind_draw = rng.uniform();
    for (int attempt = 0; attempt < 32; ++attempt) {
      s.points.clear();
      if (kind_draw < 0.70) {
        s.kind = Stroke::Kind::Polyline;
        s.points = {lattice_point(rng), lattice_point(rng)};
      } else if (kind_draw < 0.85) {
        s.kind = Stroke::Kind::Polyline;
        s.points = {lattice_point(rng), lattice_point(rng), lattice_point(rng)};
      } else {
        s.kind = Stroke::Kind::Quadratic;
        s.points = {lattice_point(rng), lattice_point(rng), lattice_point(rng)};
      }
      bool ok = true;
      for (size_t j = 0; j + 1 < s.points.size(); ++j)
        if (dist(s.points[j], s.points[j + 1]) < 0.15) ok = false;
      if (ok) break;
    }
    ch.strokes.push_back(std::move(s));
  }
  return ch;
}

StyleSpec random_style(int style_id, Rng& rng) {
  StyleSpec s;
  s.style_id = style_id;
  s.stroke_width = rng.uniform(0.025, 0.115);
  s.slant = rng.uniform(-0.28, 0.28);
  s.roundness = rng.uniform(0.0, 1.0);
  s.contrast = rng.uniform(0.15, 0.85);
  s.serif = rng.uniform() < 0.4;
  s.jitter = rng.uniform(0.0, 0.018);
  s.density = rng.uniform(0.85, 1.15);
  s.seed = rng.next_u64();
  return s;
}

}  // namespace

DatasetManifest generate_universe(const DatasetConfig& config) {
  config.validate();
  DatasetManifest m;
  m.config = config;

  const int n_styles = config.train_styles + config.eval_styles;
  const int n_chars = config.train_chars + config.eval_chars;

  Rng style_rng(substream_seed(config.seed, "styles"));
  m.styles.push_back(StyleSpec::neutral(0));  // content-source style
  for (int i = 1; i < n_styles; ++i) m.styles.push_back(random_style(i, style_rng));

  // Characters must be visually distinct: reject stroke programs whose
  // neutral-style raster sits within L1 0.05 of an accepted one.
  Rng char_rng(substream_seed(config.seed, "chars"));
  const StyleSpec base = StyleSpec::neutral();
  std::vector<GlyphImage> renders;
  int next_id = 0;
  int attempts = 0;
  while (static_cast<int>(m.chars.size()) < n_chars) {
    if (++attempts > n_chars * 200)
      throw DiagnosticError("character generation failed to find " +
                            std::to_string(n_chars) + " distinct programs");
    CharSpec cand = random_char(next_id, char_rng);
    GlyphImage r = render_glyph(cand, base, 32);
    bool distinct = true;
    for (const auto& prev : renders)
      if (image_l1(r, prev) <= 0.05) {
        distinct = false;
        break;
      }
    if (!distinct) continue;
    renders.push_back(std::move(r));
    m.chars.push_back(std::move(cand));
    ++next_id;
  }

  m.style_descriptions.reserve(m.styles.size());
  for (const auto& s : m.styles) m.style_descriptions.push_back(describe_style(s));
  return m;
}

// ---------------------------------------------------------------------------
// manifest (de)serialization
// ---------------------------------------------------------------------------

namespace {

json stroke_to_json(const Stroke& s) {
  json j;
  j["kind"] = s.kind == Stroke::Kind::Polyline ? "polyline" : "quadratic";
  j["width_scale"] = s.width_scale;
  json pts = json::array();
  for (const auto& p : s.points) pts.push_back({p[0], p[1]});
  j["points"] = pts;
  return j;
}

Stroke stroke_from_json(const json& j) {
  Stroke s;
  s.kind = j.at("kind") == "polyline" ? Stroke::Kind::Polyline
                                      : Stroke::Kind::Quadratic;
  s.width_scale = j.at("width_scale");
  for (const auto& p : j.at("points"))
    s.points.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
  return s;
}

json style_to_json(const StyleSpec& s) {
  return json{{"style_id", s.style_id},
              {"stroke_width", s.stroke_width},
              {"slant", s.slant},
              {"roundness", s.roundness},
              {"contrast", s.contrast},
              {"serif", s.serif},
              {"jitter", s.jitter},
              {"density", s.density},
              {"seed", s.seed}};
}

StyleSpec style_from_json(const json& j) {
  StyleSpec s;
  s.style_id = j.at("style_id");
  s.stroke_width = j.at("stroke_width");
  s.slant = j.at("slant");
  s.roundness = j.at("roundness");
  s.contrast = j.at("contrast");
  s.serif = j.at("serif");
  s.jitter = j.at("jitter");
  s.density = j.at("density");
  s.seed = j.at("seed");
  return s;
}

json manifest_to_json(const DatasetManifest& m) {
  json j;
  j["version"] = m.version;
  j["config"] = {{"train_styles", m.config.train_styles},
                 {"eval_styles", m.config.eval_styles},
                 {"train_chars", m.config.train_chars},
                 {"eval_chars", m.config.eval_chars},
                 {"resolution", m.config.resolution},
                 {"seed", m.config.seed}};
  json styles = json::array();
  for (const auto& s : m.styles) styles.push_back(style_to_json(s));
  j["styles"] = styles;
  json chars = json::array();
  for (const auto& c : m.chars) {
    json cj;
    cj["char_id"] = c.char_id;
    json strokes = json::array();
    for (const auto& s : c.strokes) strokes.push_back(stroke_to_json(s));
    cj["strokes"] = strokes;
    chars.push_back(cj);
  }
  j["chars"] = chars;
  j["style_descriptions"] = m.style_descriptions;
  j["layout"] = {{"manifest", "manifest.json"},
                 {"glyphs", "glyphs/<style_id>/<char_id>.png"},
                 {"meta", "meta.jsonl"}};
  return j;
}

DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  m.version = j.at("version");
  const auto& c = j.at("config");
  m.config.train_styles = c.at("train_styles");
  m.config.eval_styles = c.at("eval_styles");
  m.config.train_chars = c.at("train_chars");
  m.config.eval_chars = c.at("eval_chars");
  m.config.resolution = c.at("resolution");
  m.config.seed = c.at("seed");
  for (const auto& sj : j.at("styles")) m.styles.push_back(style_from_json(sj));
  for (const auto& cj : j.at("chars")) {
    CharSpec ch;
    ch.char_id = cj.at("char_id");
    for (const auto& sj : cj.at("strokes"))
      ch.strokes.push_back(stroke_from_json(sj));
    m.chars.push_back(std::move(ch));
  }
  m.style_descriptions =
      j.at("style_descriptions").get<std::vector<std::string>>();
  return m;
}

}  // namespace

void save_manifest(const DatasetManifest& m, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DiagnosticError("cannot write manifest: " + path);
  f << manifest_to_json(m).dump(2) << "\n";
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DiagnosticError("cannot read manifest: " + path);
  json j = json::parse(f);
  return manifest_from_json(j);
}

// ---------------------------------------------------------------------------
// dataset build / load
// ---------------------------------------------------------------------------

DatasetManifest build_dataset(const DatasetConfig& config,
                              const std::string& out_dir) {
  DatasetManifest m = generate_universe(config);
  fs::create_directories(out_dir);
  fs::create_directories(fs::path(out_dir) / "glyphs");

  struct Record {
    int style_id, char_id;
    std::string sha;
  };
  const int n_styles = m.n_styles(), n_chars = m.n_chars();
  std::vector<Record> records(static_cast<size_t>(n_styles) * n_chars);

  // Rendering is pure per (style, char); tasks carry their own seeds, so any
  // thread count gives bit-identical output.
  int threads = config.render_threads > 0
                    ? config.render_threads
                    : static_cast<int>(std::thread::hardware_concurrency());
  threads = std::max(1, std::min(threads, 16));
  std::vector<std::thread> pool;
  std::atomic<int> next{0};
  const int total = n_styles * n_chars;
  auto work = [&]() {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= total) return;
      const int style_id = i / n_chars;
      const int char_id = i % n_chars;
      GlyphImage g =
          render_glyph(m.chars[char_id], m.styles[style_id], config.resolution);
      auto bytes = image_to_bytes(g);
      const fs::path dir = fs::path(out_dir) / "glyphs" / std::to_string(style_id);
      fs::create_directories(dir);
      write_png_gray((dir / (std::to_string(char_id) + ".png")).string(),
                     g.w, g.h, bytes);
      records[i] = {style_id, char_id, sha256_hex(bytes.data(), bytes.size())};
    }
  };
  for (int t = 0; t < threads; ++t) pool.emplace_back(work);
  for (auto& t : pool) t.join();

  // manifest and meta are single-writer, emitted in fixed order
  save_manifest(m, (fs::path(out_dir) / "manifest.json").string());
  std::ofstream meta((fs::path(out_dir) / "meta.jsonl").string());
  for (const auto& r : records) {
    json rec{{"style_id", r.style_id},
             {"char_id", r.char_id},
             {"split", split_name(m.split_of(r.style_id, r.char_id))},
             {"sha256", r.sha},
             {"path", "glyphs/" + std::to_string(r.style_id) + "/" +
                          std::to_string(r.char_id) + ".png"}};
    meta << rec.dump() << "\n";
  }
  return m;
}

const GlyphImage& Dataset::glyph(int style_id, int char_id) const {
  return images[static_cast<size_t>(style_id) * manifest.n_chars() + char_id];
}

std::vector<std::pair<int, int>> Dataset::pairs(Split split) const {
  std::vector<std::pair<int, int>> out;
  for (int s = 0; s < manifest.n_styles(); ++s)
    for (int c = 0; c < manifest.n_chars(); ++c)
      if (manifest.split_of(s, c) == split) out.emplace_back(s, c);
  return out;
}

Dataset load_dataset(const std::string& dir) {
  Dataset d;
  d.dir = dir;
  d.manifest = load_manifest((fs::path(dir) / "manifest.json").string());
  const int n_styles = d.manifest.n_styles(), n_chars = d.manifest.n_chars();
  d.images.resize(static_cast<size_t>(n_styles) * n_chars);
  for (int s = 0; s < n_styles; ++s)
    for (int c = 0; c < n_chars; ++c) {
      const auto path = fs::path(dir) / "glyphs" / std::to_string(s) /
                        (std::to_string(c) + ".png");
      d.images[static_cast<size_t>(s) * n_chars + c] =
          load_glyph_png(path.string(), c, s);
    }
  return d;
}

std::vector<int> sample_style_refs(const DatasetManifest& m, int style_id,
                                   int exclude_char, int n, Rng& rng) {
  // References come from characters available for the style's split: train
  // characters (eval characters are never reference material).
  std::vector<int> candidates;
  for (int c = 0; c < m.config.train_chars; ++c)
    if (c != exclude_char) candidates.push_back(c);
  if (candidates.empty())
    candidates.push_back(exclude_char);  // degenerate single-char universe
  std::vector<int> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i)
    out.push_back(candidates[rng.uniform_int(candidates.size())]);
  (void)style_id;
  return out;
}

}  // namespace garfont::glyphforge
