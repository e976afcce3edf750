#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "garfont/common.hpp"
#include "garfont/glyphforge.hpp"
#include "garfont/image_io.hpp"

using namespace garfont;
using namespace garfont::glyphforge;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)),
                     std::istreambuf_iterator<char>());
}

CharSpec horizontal_stroke() {
  CharSpec ch;
  ch.char_id = 0;
  Stroke s;
  s.kind = Stroke::Kind::Polyline;
  s.points = {{0.0, 0.5}, {1.0, 0.5}};
  ch.strokes.push_back(s);
  return ch;
}

}  // namespace

TEST_CASE("empty stroke list renders all white") {
  CharSpec ch;
  ch.char_id = 3;
  GlyphImage g = render_glyph(ch, StyleSpec::neutral(), 32);
  for (double p : g.pixels) CHECK(p == 1.0);
}

TEST_CASE("horizontal stroke ink fraction matches analytic area") {
  StyleSpec st = StyleSpec::neutral();
  st.stroke_width = 0.1;
  st.roundness = 0;
  GlyphImage g = render_glyph(horizontal_stroke(), st, 32);
  int ink = 0;
  for (double p : g.pixels)
    if (p < 0.5) ++ink;
  const double frac = static_cast<double>(ink) / g.pixels.size();
  CHECK(frac >= 0.07);
  CHECK(frac <= 0.13);
}

TEST_CASE("rendering is bit-deterministic") {
  DatasetConfig cfg;
  cfg.seed = 5;
  Rng rng(9);
  StyleSpec st = StyleSpec::neutral();
  st.jitter = 0.015;
  st.seed = 77;
  CharSpec ch = horizontal_stroke();
  ch.strokes.push_back(ch.strokes[0]);
  ch.strokes[1].points = {{0.5, 0.1}, {0.5, 0.9}};
  GlyphImage a = render_glyph(ch, st, 32);
  GlyphImage b = render_glyph(ch, st, 32);
  CHECK(a.pixels == b.pixels);
}

TEST_CASE("invalid resolution is a configuration error") {
  CHECK_THROWS_AS(render_glyph(horizontal_stroke(), StyleSpec::neutral(), 48),
                  ConfigError);
}

TEST_CASE("style validation rejects out-of-range fields") {
  StyleSpec st = StyleSpec::neutral();
  st.stroke_width = 0.5;
  CHECK_THROWS_AS(st.validate(), ValidationError);
}

TEST_CASE("describe_style") {
  StyleSpec st = StyleSpec::neutral();
  st.stroke_width = 0.03;
  st.slant = 0;
  st.roundness = 0.9;
  st.serif = false;
  std::string d = describe_style(st);

  SUBCASE("starts with the required phrase") {
    CHECK(d.rfind("A font that", 0) == 0);
  }
  SUBCASE("mentions the binned values") {
    CHECK(d.find("light") != std::string::npos);
    CHECK(d.find("upright") != std::string::npos);
    CHECK(d.find("rounded") != std::string::npos);
  }
  SUBCASE("word count within 20..60") {
    int words = 1;
    for (char c : d)
      if (c == ' ') ++words;
    CHECK(words >= 20);
    CHECK(words <= 60);
  }
  SUBCASE("seed does not affect the description") {
    StyleSpec st2 = st;
    st2.seed = 999;
    CHECK(describe_style(st2) == d);
  }
  SUBCASE("bin change changes the description") {
    StyleSpec st2 = st;
    st2.stroke_width = 0.11;  // light -> bold
    CHECK(describe_style(st2) != d);
  }
  SUBCASE("within-bin change keeps the description") {
    StyleSpec st2 = st;
    st2.stroke_width = 0.035;  // still light
    CHECK(describe_style(st2) == d);
  }
}

TEST_CASE("corrupt") {
  StyleSpec st = StyleSpec::neutral();
  CharSpec ch = horizontal_stroke();
  GlyphImage g = render_glyph(ch, st, 32);

  SUBCASE("sigma zero is the identity") {
    GlyphImage out = corrupt(g, 0.0, 0.5, 123);
    CHECK(out.pixels == g.pixels);
  }
  SUBCASE("exact eligible pixel count and locality") {
    // mid-gray input: clamping cannot return a noisy pixel to its old value
    GlyphImage flat = GlyphImage::blank(32, 0.5);
    GlyphImage out = corrupt(flat, 0.2, 0.2, 123);
    const int64_t target = static_cast<int64_t>(std::floor(0.2 * 32 * 32));
    CHECK(target == 204);
    int changed = 0;
    for (size_t i = 0; i < flat.pixels.size(); ++i)
      if (out.pixels[i] != flat.pixels[i]) ++changed;
    CHECK(changed == target);
  }
  SUBCASE("region is a contiguous rectangle") {
    GlyphImage flat = GlyphImage::blank(32, 0.5);
    GlyphImage out = corrupt(flat, 0.2, 0.2, 7);
    int min_x = 32, max_x = -1, min_y = 32, max_y = -1;
    int changed = 0;
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        if (out.at(y, x) != flat.at(y, x)) {
          ++changed;
          min_x = std::min(min_x, x);
          max_x = std::max(max_x, x);
          min_y = std::min(min_y, y);
          max_y = std::max(max_y, y);
        }
    // 204 = 12 x 17: the changed pixels tile the rectangle exactly
    CHECK(changed == 204);
    CHECK((max_x - min_x + 1) * (max_y - min_y + 1) == 204);
  }
  SUBCASE("noise magnitude matches E|N(0,sigma)| on non-clamped pixels") {
    // flat mid-gray image avoids clamping almost everywhere
    GlyphImage flat = GlyphImage::blank(32, 0.5);
    double total = 0;
    int count = 0;
    for (int trial = 0; trial < 40; ++trial) {
      GlyphImage out = corrupt(flat, 0.2, 1.0, 1000 + trial);
      for (size_t i = 0; i < flat.pixels.size(); ++i) {
        if (out.pixels[i] > 0.0 && out.pixels[i] < 1.0) {
          total += std::abs(out.pixels[i] - flat.pixels[i]);
          ++count;
        }
      }
    }
    CHECK(count > 10000);
    const double mean_abs = total / count;  // E|N(0,0.2)| = 0.2 sqrt(2/pi)
    CHECK(mean_abs >= 0.14);
    CHECK(mean_abs <= 0.18);
  }
  SUBCASE("bad area fraction rejected") {
    CHECK_THROWS_AS(corrupt(g, 0.1, 1.5, 1), ValidationError);
    CHECK_THROWS_AS(corrupt(g, -0.1, 0.5, 1), ValidationError);
  }
}

TEST_CASE("dataset build") {
  DatasetConfig cfg;
  cfg.train_styles = 4;
  cfg.eval_styles = 2;
  cfg.train_chars = 6;
  cfg.eval_chars = 2;
  cfg.resolution = 32;
  cfg.seed = 11;
  const fs::path dir = fs::temp_directory_path() / "garfont_test_ds";
  fs::remove_all(dir);
  DatasetManifest m = build_dataset(cfg, dir.string());

  SUBCASE("counts and splits") {
    CHECK(m.n_styles() == 6);
    CHECK(m.n_chars() == 8);
    Dataset d = load_dataset(dir.string());
    CHECK(d.pairs(Split::Train).size() == 4 * 6);
    CHECK(d.pairs(Split::Ufsc).size() == 2 * 6);
    CHECK(d.pairs(Split::Ufuc).size() == 2 * 2);
    CHECK(d.pairs(Split::Aux).size() == 4 * 2);
    CHECK(d.images.size() == 6u * 8u);
  }
  SUBCASE("split soundness: no overlap, UFUC fully disjoint from train") {
    for (int s = 0; s < m.n_styles(); ++s)
      for (int c = 0; c < m.n_chars(); ++c) {
        const Split sp = m.split_of(s, c);
        if (sp == Split::Ufuc) {
          CHECK(m.style_is_eval(s));
          CHECK(m.char_is_eval(c));
        }
        if (sp == Split::Train) {
          CHECK_FALSE(m.style_is_eval(s));
          CHECK_FALSE(m.char_is_eval(c));
        }
      }
  }
  SUBCASE("characters are visually distinct under the neutral style") {
    const StyleSpec base = StyleSpec::neutral();
    std::vector<GlyphImage> renders;
    for (const auto& ch : m.chars)
      renders.push_back(render_glyph(ch, base, 32));
    for (size_t i = 0; i < renders.size(); ++i)
      for (size_t j = i + 1; j < renders.size(); ++j)
        CHECK(image_l1(renders[i], renders[j]) > 0.05);
  }
  SUBCASE("same seed twice gives byte-identical artifacts") {
    const fs::path dir2 = fs::temp_directory_path() / "garfont_test_ds2";
    fs::remove_all(dir2);
    build_dataset(cfg, dir2.string());
    CHECK(slurp(dir / "manifest.json") == slurp(dir2 / "manifest.json"));
    CHECK(slurp(dir / "meta.jsonl") == slurp(dir2 / "meta.jsonl"));
    CHECK(slurp(dir / "glyphs/0/0.png") == slurp(dir2 / "glyphs/0/0.png"));
    CHECK(slurp(dir / "glyphs/5/7.png") == slurp(dir2 / "glyphs/5/7.png"));
    fs::remove_all(dir2);
  }
  SUBCASE("parallel and serial builds are bit-identical") {
    DatasetConfig serial = cfg;
    serial.render_threads = 1;
    DatasetConfig parallel = cfg;
    parallel.render_threads = 4;
    const fs::path dir_s = fs::temp_directory_path() / "garfont_ds_serial";
    const fs::path dir_p = fs::temp_directory_path() / "garfont_ds_parallel";
    fs::remove_all(dir_s);
    fs::remove_all(dir_p);
    build_dataset(serial, dir_s.string());
    build_dataset(parallel, dir_p.string());
    CHECK(slurp(dir_s / "meta.jsonl") == slurp(dir_p / "meta.jsonl"));
    CHECK(slurp(dir_s / "glyphs/3/4.png") == slurp(dir_p / "glyphs/3/4.png"));
    fs::remove_all(dir_s);
    fs::remove_all(dir_p);
  }
  SUBCASE("manifest round-trip") {
    DatasetManifest m2 = load_manifest((dir / "manifest.json").string());
    CHECK(m2.n_styles() == m.n_styles());
    CHECK(m2.chars[3].strokes.size() == m.chars[3].strokes.size());
    CHECK(m2.styles[2].stroke_width ==
          doctest::Approx(m.styles[2].stroke_width).epsilon(1e-12));
  }
  SUBCASE("meta.jsonl hashes match file contents") {
    std::ifstream meta(dir / "meta.jsonl");
    std::string line;
    int checked = 0;
    while (std::getline(meta, line) && checked < 5) {
      const auto p0 = line.find("\"path\":\"") + 8;
      const auto p1 = line.find('"', p0);
      const std::string rel = line.substr(p0, p1 - p0);
      const auto h0 = line.find("\"sha256\":\"") + 10;
      const auto h1 = line.find('"', h0);
      const std::string sha = line.substr(h0, h1 - h0);
      int w, h;
      auto bytes = read_png_gray((dir / rel).string(), &w, &h);
      CHECK(sha256_hex(bytes.data(), bytes.size()) == sha);
      ++checked;
    }
    CHECK(checked == 5);
  }
  fs::remove_all(dir);
}

TEST_CASE("dataset config validation") {
  DatasetConfig cfg;
  cfg.eval_styles = 0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  DatasetConfig cfg2;
  cfg2.train_styles = 0;
  CHECK_THROWS_AS(cfg2.validate(), ConfigError);
  DatasetConfig cfg3;
  cfg3.resolution = 48;
  CHECK_THROWS_AS(cfg3.validate(), ConfigError);
}

TEST_CASE("reference sampling excludes the target char") {
  DatasetConfig cfg;
  DatasetManifest m;
  m.config = cfg;
  Rng rng(3);
  auto refs = sample_style_refs(m, 1, 17, 8, rng);
  CHECK(refs.size() == 8);
  for (int r : refs) {
    CHECK(r != 17);
    CHECK(r < cfg.train_chars);
  }
}

TEST_CASE("png round trip") {
  GlyphImage g = GlyphImage::blank(32);
  for (int i = 0; i < 32 * 32; ++i) g.pixels[i] = (i % 256) / 255.0;
  const fs::path p = fs::temp_directory_path() / "garfont_roundtrip.png";
  save_glyph_png(p.string(), g);
  GlyphImage g2 = load_glyph_png(p.string());
  CHECK(g2.h == 32);
  CHECK(g2.w == 32);
  for (int i = 0; i < 32 * 32; ++i)
    CHECK(g2.pixels[i] == doctest::Approx(g.pixels[i]).epsilon(1e-9));
  fs::remove(p);
}
