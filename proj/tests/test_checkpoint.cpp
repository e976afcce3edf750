#include <doctest.h>

#include <filesystem>

#include "garfont/checkpoint.hpp"
#include "garfont/common.hpp"
#include "garfont/gtok.hpp"

using namespace garfont;
namespace fs = std::filesystem;

namespace {

gtok::GtokConfig tiny_cfg() {
  gtok::GtokConfig cfg;
  cfg.codebook_size = 16;
  cfg.vit_depth = 1;
  cfg.base_channels = 2;
  cfg.batch = 2;
  cfg.lambda_per = 0.0;
  return cfg;
}

glyphforge::Dataset tiny_dataset(const std::string& dir) {
  glyphforge::DatasetConfig dcfg;
  dcfg.train_styles = 2;
  dcfg.eval_styles = 1;
  dcfg.train_chars = 4;
  dcfg.eval_chars = 1;
  dcfg.seed = 9;
  fs::remove_all(dir);
  glyphforge::build_dataset(dcfg, dir);
  return glyphforge::load_dataset(dir);
}

void train_steps(gtok::GtokModel& model, nn::Adam& opt,
                 const glyphforge::Dataset& data, Rng& rng, int from, int to) {
  gtok::GtokConfig cfg = model.config();
  auto pairs = data.pairs(glyphforge::Split::Train);
  for (int step = from; step < to; ++step) {
    model.params().zero_grad();
    Tensor total;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto& p = pairs[rng.uniform_int(pairs.size())];
      Tensor img = image_to_tensor(data.glyph(p.first, p.second));
      Tensor z = model.encode(img);
      auto q = model.quantize(z);
      Tensor l = add(l1_mean(img, model.decode(q.quantized)),
                     add(q.embedding_loss, scale(q.commitment_loss, 0.25)));
      total = total.defined() ? add(total, l) : l;
    }
    Tensor loss = scale(total, 1.0 / cfg.batch);
    loss.backward();
    opt.step();
  }
}

}  // namespace

TEST_CASE("checkpoint save/load round trip and bit-exact resume") {
  const std::string ds_dir = "/tmp/garfont_ckpt_ds";
  const std::string ck_dir = "/tmp/garfont_ckpt_test";
  auto data = tiny_dataset(ds_dir);
  auto cfg = tiny_cfg();

  // Run A: 3 steps, save (snaps in-memory state), 3 more steps.
  gtok::GtokModel model_a(cfg, 7);
  nn::AdamConfig acfg;
  acfg.lr = 1e-3;
  nn::Adam opt_a(model_a.params(), acfg);
  Rng rng_a(11);
  train_steps(model_a, opt_a, data, rng_a, 0, 3);
  fs::remove_all(ck_dir);
  ckpt::CheckpointMeta meta;
  meta.step = 3;
  meta.rng_state = rng_a.state_string();
  meta.config_hash = "testcfg";
  ckpt::save_checkpoint(ck_dir, model_a.params(), &opt_a, meta);
  train_steps(model_a, opt_a, data, rng_a, 3, 6);

  // Run B: fresh model, load the checkpoint, continue 3 steps.
  gtok::GtokModel model_b(cfg, 999);  // different init: must be overwritten
  nn::Adam opt_b(model_b.params(), acfg);
  auto loaded = ckpt::load_checkpoint(ck_dir, model_b.params(), &opt_b);
  CHECK(loaded.step == 3);
  CHECK(loaded.config_hash == "testcfg");
  Rng rng_b = Rng::from_state_string(loaded.rng_state);
  train_steps(model_b, opt_b, data, rng_b, 3, 6);

  REQUIRE(model_a.params().items().size() == model_b.params().items().size());
  for (size_t i = 0; i < model_a.params().items().size(); ++i) {
    const auto& [na, ta] = model_a.params().items()[i];
    const auto& [nb, tb] = model_b.params().items()[i];
    CHECK(na == nb);
    CHECK(ta.data() == tb.data());  // bitwise
  }

  SUBCASE("weights file is float32 little-endian with a tensor index") {
    auto meta2 = ckpt::peek_checkpoint(ck_dir);
    CHECK(meta2.step == 3);
    const auto bytes = fs::file_size(fs::path(ck_dir) / "weights.bin");
    // params + two Adam moment sets, 4 bytes each
    CHECK(bytes == 3u * 4u * model_a.params().param_count());
  }
  SUBCASE("loading into a mismatched store fails") {
    gtok::GtokConfig other = cfg;
    other.base_channels = 4;
    gtok::GtokModel wrong(other, 1);
    CHECK_THROWS_AS(ckpt::load_checkpoint(ck_dir, wrong.params(), nullptr),
                    DiagnosticError);
  }
  fs::remove_all(ds_dir);
  fs::remove_all(ck_dir);
}
