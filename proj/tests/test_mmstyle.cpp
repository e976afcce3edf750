#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "garfont/common.hpp"
#include "garfont/gradcheck.hpp"
#include "garfont/mmstyle.hpp"

using namespace garfont;
using namespace garfont::mmstyle;

namespace {

gtok::GtokConfig mini_tok() {
  gtok::GtokConfig cfg;
  cfg.codebook_size = 16;
  cfg.vit_depth = 1;
  cfg.base_channels = 3;
  return cfg;
}

argen::ArgenConfig mini_gen() {
  argen::ArgenConfig cfg;
  cfg.d_model = 32;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.n_refs = 4;
  cfg.content_channels = 3;
  cfg.style_channels = 2;
  return cfg;
}

MmConfig mini_mm() {
  MmConfig cfg;
  cfg.d_text = 16;
  cfg.text_layers = 2;
  cfg.text_heads = 2;
  cfg.adapter_layers = 2;
  cfg.adapter_heads = 2;
  cfg.k_refs = 2;
  return cfg;
}

Vocab demo_vocab() {
  return Vocab::build({"A font that features light strokes with rounded "
                       "corners and smooth edges, an upright posture"});
}

GlyphImage random_glyph(Rng& rng) {
  GlyphImage g = GlyphImage::blank(32);
  for (auto& p : g.pixels) p = rng.uniform();
  return g;
}

}  // namespace

TEST_CASE("vocab build and unknown handling") {
  Vocab v = demo_vocab();
  CHECK(v.words[0] == "<unk>");
  CHECK(v.size() > 5);
  auto ids = v.tokenize("light strokes zzz-unknown");
  CHECK(ids.size() == 4);  // zzz + unknown split into two words
  CHECK(ids[0] != 0);
  CHECK(ids[2] == 0);
  CHECK(ids[3] == 0);
}

TEST_CASE("text encoder determinism and unknown-word path") {
  MmStyleEncoder enc(mini_mm(), mini_gen(), demo_vocab(), 3);
  NoGradGuard ng;
  Tensor a = enc.encode_text("light strokes with rounded corners");
  Tensor b = enc.encode_text("light strokes with rounded corners");
  CHECK(a.data() == b.data());

  Tensor u = enc.encode_text("qqq zzz www");  // all unknown
  for (double x : u.data()) CHECK(std::isfinite(x));

  CHECK_THROWS_AS(enc.encode_text(""), ValidationError);
  CHECK_THROWS_AS(enc.encode_text("123 456"), ValidationError);  // no words
}

TEST_CASE("adapt shape substitution and init neutrality") {
  auto gen_cfg = mini_gen();
  gtok::GtokConfig tok_cfg = mini_tok();
  argen::ArgenModel gen(gen_cfg, tok_cfg, 5);
  MmStyleEncoder enc(mini_mm(), gen_cfg, demo_vocab(), 7);
  Rng rng(9);

  std::vector<Tensor> imgs = {image_to_tensor(random_glyph(rng)),
                              image_to_tensor(random_glyph(rng))};
  NoGradGuard ng;
  auto vis = gen.encode_style(imgs);
  Tensor text = enc.encode_text("light strokes");

  Tensor f_t = enc.adapt(text, vis);
  CHECK(f_t.shape() == vis[0].shape());  // shape-identical to one reference

  SUBCASE("zero-initialized projection gives F_t = 0") {
    for (double v : f_t.data()) CHECK(v == 0.0);
  }
  SUBCASE("token count arithmetic: (k+1) reference blocks") {
    auto mm = enc.multimodal_features("light strokes", vis);
    CHECK(mm.size() == 3);
    Tensor stacked = concat_rows(mm);
    CHECK(stacked.shape()[0] == (2 + 1) * gen_cfg.style_tokens);
  }
  SUBCASE("aggregation consumes multimodal features unchanged") {
    Tensor f_c = gen.encode_content(image_to_tensor(random_glyph(rng)));
    Tensor t_mm = gen.aggregate(f_c, enc.multimodal_features("light", vis));
    CHECK(t_mm.shape()[0] == gen.cond_len());
    for (double v : t_mm.data()) CHECK(std::isfinite(v));
  }
  SUBCASE("k >= N_s rejected") {
    std::vector<Tensor> too_many = {vis[0], vis[1], vis[0], vis[1]};
    CHECK_THROWS_AS(enc.adapt(text, too_many), ValidationError);
    CHECK_THROWS_AS(enc.adapt(text, {}), ValidationError);
  }
}

TEST_CASE("adapter loss properties") {
  Rng rng(11);
  std::vector<double> a(32), b(32);
  for (auto& v : a) v = rng.normal();
  for (auto& v : b) v = rng.normal();
  Tensor ta = Tensor::from_data({4, 8}, a);
  Tensor tb = Tensor::from_data({4, 8}, b);

  CHECK(adapter_loss(ta, ta).item() == 0.0);
  CHECK(adapter_loss(ta, tb).item() ==
        doctest::Approx(adapter_loss(tb, ta).item()).epsilon(1e-15));
  CHECK(adapter_loss(ta, tb).item() > 0.0);
  CHECK_THROWS_AS(adapter_loss(ta, Tensor::zeros({2, 8})), ValidationError);
}

TEST_CASE("eq.6 gradient check on a miniature") {
  auto gen_cfg = mini_gen();
  gtok::GtokConfig tok_cfg = mini_tok();
  argen::ArgenModel gen(gen_cfg, tok_cfg, 13);
  gen.params().set_trainable("", false);  // decoupled: visual path frozen
  MmStyleEncoder enc(mini_mm(), gen_cfg, demo_vocab(), 17);
  Rng rng(19);

  Tensor f_c, t_vis;
  std::vector<Tensor> vis_k;
  {
    NoGradGuard ng;
    f_c = gen.encode_content(image_to_tensor(random_glyph(rng)));
    std::vector<Tensor> imgs;
    for (int i = 0; i < 4; ++i)
      imgs.push_back(image_to_tensor(random_glyph(rng)));
    auto vis_all = gen.encode_style(imgs);
    t_vis = gen.aggregate(f_c, vis_all);
    vis_k = {vis_all[0], vis_all[1]};
  }
  // adapter output must be nonzero for a meaningful check
  Rng prng(23);
  MmStyleEncoder* ep = &enc;
  for (auto& [n, p] : ep->params().items())
    if (n == "adapter.proj_out.w")
      for (auto& v : p.data()) v = prng.normal(0, 0.1);

  auto loss_fn = [&]() {
    Tensor t_mm = gen.aggregate(f_c, enc.multimodal_features("light strokes",
                                                             vis_k));
    return adapter_loss(t_mm, t_vis);
  };
  Rng crng(29);
  auto rep = nn::grad_check(loss_fn, enc.params(), 1e-5, 1e-4, crng, 6);
  if (!rep.pass)
    for (const auto& it : rep.items)
      if (it.max_rel_err > 1e-4)
        MESSAGE("grad mismatch: ", it.name, " -> ", it.max_rel_err);
  CHECK(rep.pass);
  for (const auto& [name, p] : gen.params().items()) CHECK_FALSE(p.has_grad());
}

TEST_CASE("decoupled adapter training leaves the generator bit-identical") {
  glyphforge::DatasetConfig dcfg;
  dcfg.train_styles = 3;
  dcfg.eval_styles = 1;
  dcfg.train_chars = 8;
  dcfg.eval_chars = 2;
  dcfg.seed = 3;
  const std::string dir = "/tmp/garfont_mm_ds";
  std::filesystem::remove_all(dir);
  glyphforge::build_dataset(dcfg, dir);
  auto data = glyphforge::load_dataset(dir);

  gtok::GtokConfig tok_cfg = mini_tok();
  auto gen_cfg = mini_gen();
  gtok::GtokModel tok(tok_cfg, 1);
  tok.params().set_trainable("", false);
  argen::ArgenModel gen(gen_cfg, tok_cfg, 2);

  std::vector<std::string> corpus = data.manifest.style_descriptions;
  MmConfig mm_cfg = mini_mm();
  mm_cfg.steps = 3;
  mm_cfg.batch = 4;
  MmStyleEncoder enc(mm_cfg, gen_cfg, Vocab::build(corpus), 5);

  const std::string gen_hash = gen.params().hash_params();
  const std::string enc_hash = enc.params().hash_params();
  nn::AdamConfig acfg;
  acfg.lr = mm_cfg.lr;
  nn::Adam opt(enc.params(), acfg);
  Rng brng(7);
  auto res = train_adapter(enc, opt, gen, nullptr, tok, data, brng, 0, "");
  CHECK(res.log.size() == 3);
  CHECK(gen.params().hash_params() == gen_hash);   // decoupling contract
  CHECK(enc.params().hash_params() != enc_hash);   // adapter actually moved

  SUBCASE("joint flag changes generator weights") {
    argen::ArgenModel gen2(gen_cfg, tok_cfg, 2);
    MmConfig joint_cfg = mm_cfg;
    joint_cfg.joint = true;
    joint_cfg.steps = 2;
    joint_cfg.batch = 2;
    MmStyleEncoder enc2(joint_cfg, gen_cfg, Vocab::build(corpus), 5);
    const std::string gen2_hash = gen2.params().hash_params();
    nn::AdamConfig acfg2;
    acfg2.lr = joint_cfg.lr;
    nn::Adam opt_enc(enc2.params(), acfg2);
    nn::Adam opt_gen(gen2.params(), acfg2);
    Rng brng2(9);
    train_adapter(enc2, opt_enc, gen2, &opt_gen, tok, data, brng2, 0, "");
    CHECK(gen2.params().hash_params() != gen2_hash);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("generate_mm produces a valid glyph deterministically") {
  auto gen_cfg = mini_gen();
  gtok::GtokConfig tok_cfg = mini_tok();
  gtok::GtokModel tok(tok_cfg, 1);
  argen::ArgenModel gen(gen_cfg, tok_cfg, 2);
  MmStyleEncoder enc(mini_mm(), gen_cfg, demo_vocab(), 3);
  Rng rng(5);
  GlyphImage content = random_glyph(rng);
  content.style_id = 0;
  std::vector<GlyphImage> refs = {random_glyph(rng), random_glyph(rng)};

  auto a = generate_mm(enc, gen, tok, content, refs, "light strokes",
                       argen::DecodeMode::Soft, 0.0, 7);
  auto b = generate_mm(enc, gen, tok, content, refs, "light strokes",
                       argen::DecodeMode::Soft, 0.0, 7);
  CHECK(a.indices == b.indices);
  CHECK(a.image.pixels == b.image.pixels);
  for (double p : a.image.pixels) {
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
  }
}
