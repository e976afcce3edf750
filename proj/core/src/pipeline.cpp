#include "garfont/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "garfont/checkpoint.hpp"
#include "garfont/common.hpp"
#include "garfont/image_io.hpp"
#include "garfont/sheet.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace garfont::pipeline {

namespace {

double now_s() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

json read_json_file(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw DiagnosticError("cannot read " + p.string());
  return json::parse(f);
}

void write_json_file(const fs::path& p, const json& j) {
  fs::create_directories(p.parent_path());
  std::ofstream f(p);
  if (!f) throw DiagnosticError("cannot write " + p.string());
  f << j.dump(2) << "\n";
}

bool stage_done(const fs::path& dir, const std::string& config_hash,
                json* metrics_out) {
  const fs::path done = dir / "done.json";
  if (!fs::exists(done)) return false;
  json j = read_json_file(done);
  if (j.value("config_hash", "") != config_hash) return false;
  if (metrics_out) *metrics_out = j.value("metrics", json::object());
  return true;
}

void mark_done(const fs::path& dir, const std::string& config_hash,
               const json& metrics) {
  write_json_file(dir / "done.json",
                  {{"config_hash", config_hash}, {"metrics", metrics}});
}

void ledger_append(const config::ExperimentConfig& cfg, const std::string& stage,
                   const json& inputs, const json& outputs, double wall_s,
                   const json& metrics) {
  fs::create_directories(cfg.out_dir);
  std::ofstream f(fs::path(cfg.out_dir) / "ledger.jsonl", std::ios::app);
  if (!f) throw DiagnosticError("cannot append run ledger");
  json entry{{"stage", stage},        {"config_hash", cfg.hash()},
             {"inputs", inputs},      {"outputs", outputs},
             {"wall_time_s", wall_s}, {"metrics", metrics}};
  f << entry.dump() << "\n";
}

gtok::PerceptualFn make_phi(const evalkit::Classifier& clf) {
  return [&clf](const Tensor& img) { return clf.features(img); };
}

// Deterministic per-pair generation seed, independent of worker scheduling.
uint64_t pair_seed(uint64_t base, const char* tag, int style, int ch) {
  return substream_seed(base, std::string(tag) + "/" + std::to_string(style) +
                                  "/" + std::to_string(ch));
}

struct GenPairResult {
  GlyphImage soft, hard;
};

// Generation across many targets runs on worker threads over an immutable
// model snapshot; results land in a pre-sized vector by index.
std::vector<GenPairResult> generate_pairs(
    const argen::ArgenModel& gen, const gtok::GtokModel& tok,
    const glyphforge::Dataset& data,
    const std::vector<std::pair<int, int>>& pairs, uint64_t seed_base,
    int threads_hint = 0) {
  const auto& manifest = data.manifest;
  std::vector<GenPairResult> out(pairs.size());
  int threads = threads_hint > 0
                    ? threads_hint
                    : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<int>(threads, 4);
  std::atomic<size_t> next{0};
  auto work = [&]() {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= pairs.size()) return;
      const auto& [style, ch] = pairs[i];
      Rng rrng(pair_seed(seed_base, "refs", style, ch));
      auto ref_chars = glyphforge::sample_style_refs(
          manifest, style, ch, gen.config().n_refs, rrng);
      std::vector<GlyphImage> refs;
      refs.reserve(ref_chars.size());
      for (int rc : ref_chars) refs.push_back(data.glyph(style, rc));
      auto res = argen::generate(gen, tok, data.glyph(0, ch), refs,
                                 argen::DecodeMode::Soft, 0.0,
                                 pair_seed(seed_base, "gen", style, ch));
      out[i].soft = res.image;
      NoGradGuard ng;
      GlyphImage hard = tensor_to_image(
          tok.decode(gather_rows(tok.codebook(), res.indices)), ch, style);
      out[i].hard = std::move(hard);
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  return out;
}

}  // namespace

std::string stage_dir(const config::ExperimentConfig& cfg,
                      const std::string& stage) {
  return (fs::path(cfg.out_dir) / stage).string();
}

// ---------------------------------------------------------------------------
// artifact persistence
// ---------------------------------------------------------------------------

void save_classifier(const evalkit::Classifier& clf, const std::string& dir,
                     const std::string& config_hash) {
  ckpt::CheckpointMeta meta;
  meta.config_hash = config_hash;
  meta.extra = {{"target", clf.target() == evalkit::Classifier::Target::Content
                               ? "content"
                               : "style"},
                {"n_classes", clf.n_classes()},
                {"resolution", clf.resolution()},
                {"base_channels", clf.config().base_channels},
                {"seed", clf.config().seed},
                {"trained", clf.trained()}};
  ckpt::save_checkpoint(dir, const_cast<evalkit::Classifier&>(clf).params(),
                        nullptr, meta);
}

std::unique_ptr<evalkit::Classifier> load_classifier(const std::string& dir) {
  json manifest = read_json_file(fs::path(dir) / "manifest.json");
  const json& ex = manifest.at("extra");
  evalkit::ClassifierConfig cfg;
  cfg.base_channels = ex.at("base_channels");
  cfg.seed = ex.at("seed");
  auto target = ex.at("target") == "content"
                    ? evalkit::Classifier::Target::Content
                    : evalkit::Classifier::Target::Style;
  auto clf = std::make_unique<evalkit::Classifier>(
      target, ex.at("n_classes").get<int>(), ex.at("resolution").get<int>(),
      cfg, 0);
  ckpt::load_checkpoint(dir, clf->params(), nullptr);
  if (ex.value("trained", false)) clf->mark_trained();
  clf->params().set_trainable("", false);
  return clf;
}

glyphforge::Dataset load_dataset_artifact(const config::ExperimentConfig& cfg) {
  const std::string dir = stage_dir(cfg, "data");
  if (!fs::exists(fs::path(dir) / "manifest.json"))
    throw DiagnosticError("missing dataset artifact at " + dir +
                          "; run the data stage first");
  return glyphforge::load_dataset(dir);
}

std::unique_ptr<evalkit::Classifier> load_classifier_artifact(
    const config::ExperimentConfig& cfg, evalkit::Classifier::Target target) {
  const std::string dir =
      (fs::path(cfg.out_dir) / "classifiers" /
       (target == evalkit::Classifier::Target::Content ? "content" : "style"))
          .string();
  if (!ckpt::checkpoint_exists(dir))
    throw DiagnosticError("missing classifier artifact at " + dir +
                          "; stages that need it train it automatically");
  return load_classifier(dir);
}

std::unique_ptr<gtok::GtokModel> load_tokenizer_artifact(
    const config::ExperimentConfig& cfg) {
  const std::string dir = stage_dir(cfg, "tokenizer");
  if (!ckpt::checkpoint_exists(dir))
    throw DiagnosticError("missing tokenizer checkpoint at " + dir +
                          "; run the tokenizer stage first");
  auto model = std::make_unique<gtok::GtokModel>(
      cfg.tokenizer, substream_seed(cfg.seed, "tok/init"));
  ckpt::load_checkpoint(dir, model->params(), nullptr);
  model->params().set_trainable("", false);
  return model;
}

std::unique_ptr<argen::ArgenModel> load_generator_artifact(
    const config::ExperimentConfig& cfg, const std::string& which) {
  const std::string stage =
      which == "gen" ? "generator" : (which == "nfa" ? "nfa" : "se");
  const std::string dir = stage_dir(cfg, stage);
  if (!ckpt::checkpoint_exists(dir))
    throw DiagnosticError("missing generator checkpoint at " + dir +
                          "; run the " + stage + " stage first");
  auto model = std::make_unique<argen::ArgenModel>(
      cfg.generator, cfg.tokenizer, substream_seed(cfg.seed, "gen/init"));
  if (which != "gen") {
    Rng lrng(substream_seed(cfg.seed, "lora/init"));
    model->attach_lora(lrng);
  }
  ckpt::load_checkpoint(dir, model->params(), nullptr);
  return model;
}

std::unique_ptr<mmstyle::MmStyleEncoder> load_adapter_artifact(
    const config::ExperimentConfig& cfg, const argen::ArgenModel& gen) {
  const std::string dir = stage_dir(cfg, "adapter");
  if (!ckpt::checkpoint_exists(dir))
    throw DiagnosticError("missing adapter checkpoint at " + dir +
                          "; run the adapter stage first");
  json manifest = read_json_file(fs::path(dir) / "manifest.json");
  auto corpus = manifest.at("extra").at("vocab_corpus")
                    .get<std::vector<std::string>>();
  auto enc = std::make_unique<mmstyle::MmStyleEncoder>(
      cfg.adapter, gen.config(), mmstyle::Vocab::build(corpus),
      substream_seed(cfg.seed, "mm/init"));
  ckpt::load_checkpoint(dir, enc->params(), nullptr);
  return enc;
}

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

namespace {

struct Context {
  const config::ExperimentConfig& cfg;
  std::optional<glyphforge::Dataset> dataset;
  std::unique_ptr<evalkit::Classifier> content_clf, style_clf;
  std::unique_ptr<gtok::GtokModel> tokenizer;

  const glyphforge::Dataset& data() {
    if (!dataset) dataset = load_dataset_artifact(cfg);
    return *dataset;
  }

  // Classifiers are trained by the first stage that needs them (the
  // perceptual trunk must exist before the tokenizer trains); they do not
  // consume a run-ledger entry of their own.
  void ensure_classifiers(json* metrics) {
    const fs::path base = fs::path(cfg.out_dir) / "classifiers";
    auto ensure_one = [&](evalkit::Classifier::Target target,
                          const evalkit::ClassifierConfig& ccfg,
                          std::unique_ptr<evalkit::Classifier>& slot,
                          const char* name) {
      if (slot) return;
      const std::string dir = (base / name).string();
      if (ckpt::checkpoint_exists(dir)) {
        json manifest = read_json_file(fs::path(dir) / "manifest.json");
        if (manifest.value("config_hash", "") == cfg.hash()) {
          slot = load_classifier(dir);
          return;
        }
      }
      slot = std::make_unique<evalkit::Classifier>(
          evalkit::train_classifier(data(), target, ccfg));
      slot->params().set_trainable("", false);
      save_classifier(*slot, dir, cfg.hash());
    };
    ensure_one(evalkit::Classifier::Target::Content, cfg.clf_content,
               content_clf, "content");
    ensure_one(evalkit::Classifier::Target::Style, cfg.clf_style, style_clf,
               "style");
    if (metrics) {
      std::vector<const GlyphImage*> imgs;
      std::vector<int> content_labels, style_labels;
      const auto& d = data();
      Rng prng(substream_seed(cfg.seed, "clf/report"));
      for (int i = 0; i < 512; ++i) {
        const int s = static_cast<int>(prng.uniform_int(d.manifest.n_styles()));
        const int c = static_cast<int>(prng.uniform_int(d.manifest.n_chars()));
        imgs.push_back(&d.glyph(s, c));
        content_labels.push_back(c);
        style_labels.push_back(s);
      }
      (*metrics)["classifier_content_acc"] =
          evalkit::accuracy(*content_clf, imgs, content_labels);
      (*metrics)["classifier_style_acc"] =
          evalkit::accuracy(*style_clf, imgs, style_labels);
    }
  }

  const gtok::GtokModel& tok() {
    if (!tokenizer) tokenizer = load_tokenizer_artifact(cfg);
    return *tokenizer;
  }
};

json run_data_stage(Context& ctx) {
  const auto& cfg = ctx.cfg;
  glyphforge::DatasetConfig dcfg = cfg.dataset;
  auto manifest = glyphforge::build_dataset(dcfg, stage_dir(cfg, "data"));
  json metrics{{"styles", manifest.n_styles()},
               {"chars", manifest.n_chars()},
               {"glyphs", manifest.n_styles() * manifest.n_chars()},
               {"resolution", manifest.config.resolution}};
  ctx.dataset.reset();
  return metrics;
}

json run_tokenizer_stage(Context& ctx) {
  const auto& cfg = ctx.cfg;
  json metrics;
  if (cfg.tokenizer.lambda_per > 0) ctx.ensure_classifiers(&metrics);

  const std::string dir = stage_dir(cfg, "tokenizer");
  bool resume = false;
  if (ckpt::checkpoint_exists(dir)) {
    auto meta = ckpt::peek_checkpoint(dir);
    resume = meta.config_hash == cfg.hash() && meta.step < cfg.tokenizer.steps;
  }
  gtok::GtokModel model(cfg.tokenizer, substream_seed(cfg.seed, "tok/init"));
  nn::AdamConfig acfg;
  acfg.lr = cfg.tokenizer.lr;
  acfg.beta2 = 0.95;  // small-batch VQ training wants a short moment memory
  nn::Adam opt(model.params(), acfg);
  Rng batch_rng(substream_seed(cfg.seed, "tok/batch"));
  int start_step = 0;
  if (resume) {
    auto meta = ckpt::load_checkpoint(dir, model.params(), &opt);
    start_step = static_cast<int>(meta.step);
    batch_rng = Rng::from_state_string(meta.rng_state);
  } else {
    Rng cb_rng(substream_seed(cfg.seed, "tok/cbinit"));
    model.init_codebook_from_data(ctx.data(), 64, cb_rng);
  }

  gtok::PerceptualFn phi;
  if (cfg.tokenizer.lambda_per > 0) phi = make_phi(*ctx.content_clf);

  auto result = gtok::train_tokenizer(model, opt, ctx.data(), phi, batch_rng,
                                      start_step,
                                      (fs::path(dir) / "loss.csv").string());

  ckpt::CheckpointMeta meta;
  meta.step = cfg.tokenizer.steps;
  meta.rng_state = batch_rng.state_string();
  meta.config_hash = cfg.hash();
  meta.extra = {{"param_count", model.params().param_count()}};
  ckpt::save_checkpoint(dir, model.params(), &opt, meta);

  // smoke measurements (criterion inputs)
  double step50 = 0, final_rec = result.final_rec_l1;
  {
    int n = 0;
    for (const auto& row : result.log)
      if (row.step >= 40 && row.step < 60) {
        step50 += row.rec;
        ++n;
      }
    if (n) step50 /= n;
  }
  double roundtrip = 0;
  {
    NoGradGuard ng;
    Rng prng(substream_seed(cfg.seed, "tok/roundtrip"));
    auto pairs = ctx.data().pairs(glyphforge::Split::Train);
    const int n_eval = std::min<int>(256, static_cast<int>(pairs.size()));
    for (int i = 0; i < n_eval; ++i) {
      const auto& p = pairs[prng.uniform_int(pairs.size())];
      const auto& g = ctx.data().glyph(p.first, p.second);
      roundtrip += image_l1(model.reconstruct(g), g);
    }
    roundtrip /= n_eval;
  }
  metrics["param_count"] = model.params().param_count();
  metrics["rec_l1_step50"] = step50;
  metrics["rec_l1_final"] = final_rec;
  metrics["rec_ratio"] = step50 > 0 ? final_rec / step50 : 1.0;
  metrics["final_perplexity"] = result.final_perplexity;
  metrics["roundtrip_l1"] = roundtrip;
  ctx.tokenizer.reset();
  return metrics;
}

json run_generator_stage(Context& ctx) {
  const auto& cfg = ctx.cfg;
  json metrics;
  ctx.ensure_classifiers(nullptr);
  const auto& tok = ctx.tok();

  const std::string dir = stage_dir(cfg, "generator");
  bool resume = false;
  if (ckpt::checkpoint_exists(dir)) {
    auto meta = ckpt::peek_checkpoint(dir);
    resume = meta.config_hash == cfg.hash() && meta.step < cfg.generator.steps;
  }
  argen::ArgenModel model(cfg.generator, cfg.tokenizer,
                          substream_seed(cfg.seed, "gen/init"));
  nn::AdamConfig acfg;
  acfg.lr = cfg.generator.lr;
  acfg.beta1 = cfg.generator.beta1;
  acfg.beta2 = cfg.generator.beta2;
  nn::Adam opt(model.params(), acfg);
  Rng batch_rng(substream_seed(cfg.seed, "gen/batch"));
  int start_step = 0;
  if (resume) {
    auto meta = ckpt::load_checkpoint(dir, model.params(), &opt);
    start_step = static_cast<int>(meta.step);
    batch_rng = Rng::from_state_string(meta.rng_state);
  }

  auto result = argen::train_generator(model, opt, tok, ctx.data(), batch_rng,
                                       start_step,
                                       (fs::path(dir) / "loss.csv").string());

  ckpt::CheckpointMeta meta;
  meta.step = cfg.generator.steps;
  meta.rng_state = batch_rng.state_string();
  meta.config_hash = cfg.hash();
  meta.extra = {{"param_count", model.params().param_count()}};
  ckpt::save_checkpoint(dir, model.params(), &opt, meta);

  double step100 = 0;
  {
    int n = 0;
    for (const auto& row : result.log)
      if (row.step >= 90 && row.step < 110) {
        step100 += row.ce;
        ++n;
      }
    if (n) step100 /= n;
  }
  metrics["param_count"] = model.params().param_count();
  metrics["ce_step100"] = step100;
  metrics["ce_final"] = result.final_ce;
  metrics["ce_ratio"] = step100 > 0 ? result.final_ce / step100 : 1.0;

  // seen-pair content accuracy and soft-vs-hard validation pixel L1
  const auto& data = ctx.data();
  {
    Rng prng(substream_seed(cfg.seed, "gen/smoke"));
    auto train_pairs = data.pairs(glyphforge::Split::Train);
    std::vector<std::pair<int, int>> sample;
    for (int i = 0; i < cfg.eval.smoke_pairs; ++i)
      sample.push_back(train_pairs[prng.uniform_int(train_pairs.size())]);
    auto gen_out = generate_pairs(model, tok, data, sample,
                                  substream_seed(cfg.seed, "gen/smoke-run"));
    int hits = 0;
    for (size_t i = 0; i < sample.size(); ++i)
      if (ctx.content_clf->predict(gen_out[i].soft) == sample[i].second)
        ++hits;
    metrics["seen_content_acc"] =
        static_cast<double>(hits) / static_cast<double>(sample.size());
  }
  {
    Rng prng(substream_seed(cfg.seed, "gen/softhard"));
    auto ufsc = data.pairs(glyphforge::Split::Ufsc);
    std::vector<std::pair<int, int>> sample;
    for (int i = 0; i < cfg.eval.smoke_pairs && !ufsc.empty(); ++i)
      sample.push_back(ufsc[prng.uniform_int(ufsc.size())]);
    auto gen_out = generate_pairs(model, tok, data, sample,
                                  substream_seed(cfg.seed, "gen/softhard-run"));
    double soft_l1 = 0, hard_l1 = 0;
    for (size_t i = 0; i < sample.size(); ++i) {
      const auto& truth = data.glyph(sample[i].first, sample[i].second);
      soft_l1 += image_l1(gen_out[i].soft, truth);
      hard_l1 += image_l1(gen_out[i].hard, truth);
    }
    metrics["val_soft_l1"] = soft_l1 / sample.size();
    metrics["val_hard_l1"] = hard_l1 / sample.size();
  }
  return metrics;
}

json run_adapter_stage(Context& ctx) {
  const auto& cfg = ctx.cfg;
  auto gen = load_generator_artifact(cfg, "gen");
  const auto& tok = ctx.tok();
  const auto& data = ctx.data();

  mmstyle::Vocab vocab = mmstyle::Vocab::build(data.manifest.style_descriptions);
  mmstyle::MmStyleEncoder enc(cfg.adapter, gen->config(), vocab,
                              substream_seed(cfg.seed, "mm/init"));
  nn::AdamConfig acfg;
  acfg.lr = cfg.adapter.lr;
  nn::Adam opt(enc.params(), acfg);
  std::optional<nn::Adam> opt_gen;
  if (cfg.adapter.joint) opt_gen.emplace(gen->params(), acfg);
  Rng batch_rng(substream_seed(cfg.seed, "mm/batch"));

  const std::string gen_hash_before = gen->params().hash_params();
  const std::string dir = stage_dir(cfg, "adapter");
  auto result = mmstyle::train_adapter(
      enc, opt, *gen, opt_gen ? &*opt_gen : nullptr, tok, data, batch_rng, 0,
      (fs::path(dir) / "loss.csv").string());
  const std::string gen_hash_after = gen->params().hash_params();

  ckpt::CheckpointMeta meta;
  meta.step = cfg.adapter.steps;
  meta.rng_state = batch_rng.state_string();
  meta.config_hash = cfg.hash();
  meta.extra = {{"vocab_corpus", data.manifest.style_descriptions},
                {"k_refs", cfg.adapter.k_refs},
                {"joint", cfg.adapter.joint}};
  ckpt::save_checkpoint(dir, enc.params(), &opt, meta);
  if (cfg.adapter.joint)
    ckpt::save_checkpoint(stage_dir(cfg, "adapter") + "/joint_generator",
                          gen->params(), nullptr, meta);

  json metrics{{"initial_loss", result.initial_loss},
               {"final_loss", result.final_loss},
               {"loss_ratio", result.initial_loss > 0
                                  ? result.final_loss / result.initial_loss
                                  : 1.0},
               {"generator_hash_before", gen_hash_before},
               {"generator_hash_after", gen_hash_after},
               {"generator_unchanged", gen_hash_before == gen_hash_after},
               {"joint", cfg.adapter.joint}};
  return metrics;
}

json run_nfa_stage(Context& ctx, const std::string& input_override) {
  const auto& cfg = ctx.cfg;
  auto gen = input_override.empty()
                 ? load_generator_artifact(cfg, "gen")
                 : load_generator_from_dir(cfg, input_override);
  if (!gen->has_lora()) {
    Rng lrng(substream_seed(cfg.seed, "lora/init"));
    gen->attach_lora(lrng);
  }
  const auto& tok = ctx.tok();
  const auto& data = ctx.data();

  // one seeded unseen style is the adaptation target
  Rng srng(substream_seed(cfg.seed, "nfa/style"));
  const int target_style =
      cfg.dataset.train_styles +
      static_cast<int>(srng.uniform_int(cfg.dataset.eval_styles));

  const std::string dir = stage_dir(cfg, "nfa");
  auto result = refine::nfa_finetune(*gen, tok, data, target_style, cfg.nfa,
                                     (fs::path(dir) / "loss.csv").string());

  ckpt::CheckpointMeta meta;
  meta.step = cfg.nfa.epochs;
  meta.config_hash = cfg.hash();
  meta.rng_state = Rng(0).state_string();
  meta.extra = {{"target_style", target_style}};
  ckpt::save_checkpoint(dir, gen->params(), nullptr, meta);

  json metrics{{"target_style", result.target_style},
               {"val_l1_before", result.val_l1_before},
               {"val_l1_after", result.val_l1_after},
               {"improved", result.val_l1_after < result.val_l1_before},
               {"base_hash_invariant",
                result.base_hash_before == result.base_hash_after}};
  return metrics;
}

json run_se_stage(Context& ctx, const std::string& input_override) {
  const auto& cfg = ctx.cfg;
  ctx.ensure_classifiers(nullptr);
  const auto& tok = ctx.tok();
  const auto& data = ctx.data();

  // continue from NFA's adapters when available, else fresh adapters on the
  // pretrained generator
  std::unique_ptr<argen::ArgenModel> gen;
  if (!input_override.empty()) {
    gen = load_generator_from_dir(cfg, input_override);
  } else if (ckpt::checkpoint_exists(stage_dir(cfg, "nfa"))) {
    gen = load_generator_artifact(cfg, "nfa");
  } else {
    gen = load_generator_artifact(cfg, "gen");
  }
  if (!gen->has_lora()) {
    Rng lrng(substream_seed(cfg.seed, "lora/init"));
    gen->attach_lora(lrng);
  }

  const std::string dir = stage_dir(cfg, "se");
  auto result =
      refine::se_refine(*gen, tok, data, *ctx.content_clf, *ctx.style_clf,
                        cfg.se, (fs::path(dir) / "reward.csv").string());

  ckpt::CheckpointMeta meta;
  meta.step = cfg.se.epochs;
  meta.config_hash = cfg.hash();
  meta.rng_state = Rng(0).state_string();
  ckpt::save_checkpoint(dir, gen->params(), nullptr, meta);

  json metrics{{"epoch_mean_rewards", result.epoch_mean_rewards},
               {"reward_non_decreasing",
                result.epoch_mean_rewards.size() < 2 ||
                    result.epoch_mean_rewards.back() >=
                        result.epoch_mean_rewards.front()},
               {"degenerate_warning", result.degenerate_warning},
               {"base_hash_invariant",
                result.base_hash_before == result.base_hash_after}};
  return metrics;
}

json run_eval_stage(Context& ctx, const std::string& input_override) {
  const auto& cfg = ctx.cfg;
  ctx.ensure_classifiers(nullptr);
  const auto& tok = ctx.tok();
  const auto& data = ctx.data();
  auto gen = input_override.empty()
                 ? load_generator_artifact(cfg, cfg.eval.checkpoint)
                 : load_generator_from_dir(cfg, input_override);

  const fs::path dir = stage_dir(cfg, "eval");
  fs::create_directories(dir / "sheets");
  json metrics;

  for (const auto& split :
       {glyphforge::Split::Ufsc, glyphforge::Split::Ufuc}) {
    const std::string tag = glyphforge::split_name(split);
    auto pairs = data.pairs(split);
    Rng prng(substream_seed(cfg.seed, "eval/sample/" + tag));
    if (static_cast<int>(pairs.size()) > cfg.eval.max_per_split) {
      auto perm = prng.permutation(static_cast<int>(pairs.size()));
      std::vector<std::pair<int, int>> sub;
      for (int i = 0; i < cfg.eval.max_per_split; ++i)
        sub.push_back(pairs[perm[i]]);
      pairs = std::move(sub);
    }
    auto outs = generate_pairs(*gen, tok, data, pairs,
                               substream_seed(cfg.seed, "eval/" + tag));
    std::vector<GlyphImage> generated, truth;
    for (size_t i = 0; i < pairs.size(); ++i) {
      generated.push_back(outs[i].soft);
      truth.push_back(data.glyph(pairs[i].first, pairs[i].second));
    }
    auto report = evalkit::evaluate_generated(generated, truth,
                                              *ctx.content_clf, *ctx.style_clf,
                                              tag);
    report.save((dir / ("report_" + tag + ".json")).string());
    metrics[tag] = json::parse(report.to_json_string());

    const int n_sheet = std::min<size_t>(8, generated.size());
    sheet::render_sheet(
        {generated.begin(), generated.begin() + n_sheet},
        {truth.begin(), truth.begin() + n_sheet},
        (dir / "sheets" / (tag + ".png")).string(), cfg.eval.checkpoint,
        cfg.hash());
  }
  return metrics;
}

}  // namespace

PipelineResult pipeline_run(const config::ExperimentConfig& cfg) {
  static const std::vector<std::string> order = {
      "data", "tokenizer", "generator", "adapter", "nfa", "se", "eval"};
  PipelineResult result;
  Context ctx{cfg};
  fs::create_directories(cfg.out_dir);
  cfg.save((fs::path(cfg.out_dir) / "config.json").string());

  for (const auto& stage : order) {
    if (std::find(cfg.stages.begin(), cfg.stages.end(), stage) ==
        cfg.stages.end())
      continue;
    StageOutcome outcome;
    outcome.stage = stage;
    const fs::path dir = stage_dir(cfg, stage);
    json prior;
    if (stage_done(dir, cfg.hash(), &prior)) {
      outcome.skipped = true;
      outcome.metrics = prior;
      result.metrics[stage] = prior;
      result.stages.push_back(std::move(outcome));
      continue;
    }
    const double t0 = now_s();
    json metrics;
    if (stage == "data") metrics = run_data_stage(ctx);
    else if (stage == "tokenizer") metrics = run_tokenizer_stage(ctx);
    else if (stage == "generator") metrics = run_generator_stage(ctx);
    else if (stage == "adapter") metrics = run_adapter_stage(ctx);
    else if (stage == "nfa") metrics = run_nfa_stage(ctx, "");
    else if (stage == "se") metrics = run_se_stage(ctx, "");
    else if (stage == "eval") metrics = run_eval_stage(ctx, "");
    const double wall = now_s() - t0;

    json outputs = json::object();
    if (fs::exists(dir / "weights.bin"))
      outputs["weights"] = ckpt::checkpoint_weights_hash(dir.string());
    if (stage == "data")
      outputs["manifest"] = sha256_file((dir / "manifest.json").string());
    ledger_append(cfg, stage, json::object(), outputs, wall, metrics);
    mark_done(dir, cfg.hash(), metrics);
    outcome.metrics = metrics;
    result.metrics[stage] = metrics;
    result.stages.push_back(std::move(outcome));
    std::cerr << "[garfont] stage " << stage << " done in " << wall << " s\n";
  }
  write_json_file(fs::path(cfg.out_dir) / "pipeline_metrics.json",
                  result.metrics);
  return result;
}

nlohmann::json run_stage(const config::ExperimentConfig& cfg,
                         const std::string& stage,
                         const std::string& input_override) {
  Context ctx{cfg};
  fs::create_directories(cfg.out_dir);
  const double t0 = now_s();
  json metrics;
  if (stage == "data") metrics = run_data_stage(ctx);
  else if (stage == "tokenizer") metrics = run_tokenizer_stage(ctx);
  else if (stage == "generator") metrics = run_generator_stage(ctx);
  else if (stage == "adapter") metrics = run_adapter_stage(ctx);
  else if (stage == "nfa") metrics = run_nfa_stage(ctx, input_override);
  else if (stage == "se") metrics = run_se_stage(ctx, input_override);
  else if (stage == "eval") metrics = run_eval_stage(ctx, input_override);
  else throw ConfigError("unknown stage: " + stage);
  const double wall = now_s() - t0;
  const fs::path dir = stage_dir(cfg, stage);
  json outputs = json::object();
  if (fs::exists(dir / "weights.bin"))
    outputs["weights"] = ckpt::checkpoint_weights_hash(dir.string());
  ledger_append(cfg, stage, json::object(), outputs, wall, metrics);
  mark_done(dir, cfg.hash(), metrics);
  return metrics;
}

std::unique_ptr<argen::ArgenModel> load_generator_from_dir(
    const config::ExperimentConfig& cfg, const std::string& dir) {
  if (!ckpt::checkpoint_exists(dir))
    throw DiagnosticError("missing generator checkpoint at " + dir);
  json manifest = read_json_file(fs::path(dir) / "manifest.json");
  bool has_lora = false;
  for (const auto& t : manifest.at("tensors"))
    if (t.at("name").get<std::string>().find(".lora_") != std::string::npos)
      has_lora = true;
  auto model = std::make_unique<argen::ArgenModel>(
      cfg.generator, cfg.tokenizer, substream_seed(cfg.seed, "gen/init"));
  if (has_lora) {
    Rng lrng(substream_seed(cfg.seed, "lora/init"));
    model->attach_lora(lrng);
  }
  ckpt::load_checkpoint(dir, model->params(), nullptr);
  return model;
}

evalkit::MetricsReport eval_split(const config::ExperimentConfig& cfg,
                                  const std::string& gen_ckpt_dir,
                                  const std::string& split,
                                  const std::string& out_path) {
  Context ctx{cfg};
  ctx.ensure_classifiers(nullptr);
  const auto& tok = ctx.tok();
  const auto& data = ctx.data();
  auto gen = gen_ckpt_dir.empty()
                 ? load_generator_artifact(cfg, cfg.eval.checkpoint)
                 : load_generator_from_dir(cfg, gen_ckpt_dir);
  const glyphforge::Split sp = glyphforge::split_from_name(split);
  if (sp != glyphforge::Split::Ufsc && sp != glyphforge::Split::Ufuc)
    throw ValidationError("eval_split: split must be ufsc or ufuc");
  auto pairs = data.pairs(sp);
  Rng prng(substream_seed(cfg.seed, "eval/sample/" + split));
  if (static_cast<int>(pairs.size()) > cfg.eval.max_per_split) {
    auto perm = prng.permutation(static_cast<int>(pairs.size()));
    std::vector<std::pair<int, int>> sub;
    for (int i = 0; i < cfg.eval.max_per_split; ++i)
      sub.push_back(pairs[perm[i]]);
    pairs = std::move(sub);
  }
  auto outs = generate_pairs(*gen, tok, data, pairs,
                             substream_seed(cfg.seed, "eval/" + split));
  std::vector<GlyphImage> generated, truth;
  for (size_t i = 0; i < pairs.size(); ++i) {
    generated.push_back(outs[i].soft);
    truth.push_back(data.glyph(pairs[i].first, pairs[i].second));
  }
  auto report = evalkit::evaluate_generated(
      generated, truth, *ctx.content_clf, *ctx.style_clf, split);
  if (!out_path.empty()) report.save(out_path);
  return report;
}

// ---------------------------------------------------------------------------
// ablation harness
// ---------------------------------------------------------------------------

namespace {

json robustness_metrics(const gtok::GtokModel& tok,
                        const glyphforge::Dataset& data,
                        const evalkit::Classifier& content_clf, double sigma,
                        double area_fraction, int max_glyphs, uint64_t seed) {
  NoGradGuard ng;
  auto pairs = data.pairs(glyphforge::Split::Ufuc);
  Rng prng(substream_seed(seed, "robust/sample"));
  if (static_cast<int>(pairs.size()) > max_glyphs) {
    auto perm = prng.permutation(static_cast<int>(pairs.size()));
    std::vector<std::pair<int, int>> sub;
    for (int i = 0; i < max_glyphs; ++i) sub.push_back(pairs[perm[i]]);
    pairs = std::move(sub);
  }
  double r = 0, s = 0, p = 0;
  std::vector<std::vector<double>> f_rec, f_clean;
  for (size_t i = 0; i < pairs.size(); ++i) {
    const auto& clean = data.glyph(pairs[i].first, pairs[i].second);
    GlyphImage corrupted = glyphforge::corrupt(
        clean, sigma, area_fraction,
        substream_seed(seed, "robust/" + std::to_string(i)));
    GlyphImage rec = tok.reconstruct(corrupted);
    r += evalkit::rmse(rec, clean);
    s += evalkit::ssim(rec, clean);
    p += evalkit::perceptual_distance(rec, clean, content_clf);
    f_rec.push_back(content_clf.trunk_vector(rec));
    f_clean.push_back(content_clf.trunk_vector(clean));
  }
  const double n = static_cast<double>(pairs.size());
  return json{{"rmse", r / n},
              {"ssim", s / n},
              {"perceptual_proxy", p / n},
              {"frechet_proxy",
               evalkit::frechet_distance(evalkit::gaussian_stats(f_rec),
                                         evalkit::gaussian_stats(f_clean))},
              {"sample_count", pairs.size()},
              {"sigma", sigma},
              {"area_fraction", area_fraction}};
}

json linear_probe_metrics(const gtok::GtokModel& tok,
                          const glyphforge::Dataset& data, uint64_t seed) {
  NoGradGuard ng;
  const auto& m = data.manifest;
  auto flatten = [&](int s, int c) {
    Tensor z = tok.encode(image_to_tensor(data.glyph(s, c)));
    return z.data();
  };
  // content probe: train on train-style rows (all characters), eval on UFUC
  std::vector<std::vector<double>> ctr_x, cev_x, str_x, sev_x;
  std::vector<int> ctr_y, cev_y, str_y, sev_y;
  for (int s = 0; s < m.n_styles(); ++s)
    for (int c = 0; c < m.n_chars(); ++c) {
      const auto split = m.split_of(s, c);
      if (split == glyphforge::Split::Ufuc) {
        auto f = flatten(s, c);
        cev_x.push_back(f);
        cev_y.push_back(c);
        sev_x.push_back(f);
        sev_y.push_back(s);
        continue;
      }
      if (!m.style_is_eval(s)) {  // train styles: content probe training rows
        ctr_x.push_back(flatten(s, c));
        ctr_y.push_back(c);
      }
      if (!m.char_is_eval(c)) {  // train chars: style probe training rows
        str_x.push_back(flatten(s, c));
        str_y.push_back(s);
      }
    }
  const double acc_c = evalkit::linear_probe(ctr_x, ctr_y, cev_x, cev_y,
                                             m.n_chars(),
                                             substream_seed(seed, "probe/c"));
  const double acc_s = evalkit::linear_probe(str_x, str_y, sev_x, sev_y,
                                             m.n_styles(),
                                             substream_seed(seed, "probe/s"));
  return json{{"acc_content", acc_c}, {"acc_style", acc_s}};
}

}  // namespace

json run_ablation_harness(const config::ExperimentConfig& cfg) {
  Context ctx{cfg};
  ctx.ensure_classifiers(nullptr);
  const auto& data = ctx.data();
  const fs::path dir = fs::path(cfg.out_dir) / "ablations";
  fs::create_directories(dir);

  gtok::PerceptualFn phi = make_phi(*ctx.content_clf);
  auto train_small_tok = [&](int depth, bool causal, const std::string& tag) {
    gtok::GtokConfig tcfg = cfg.tokenizer;
    tcfg.vit_depth = depth;
    tcfg.causal_decoder = causal;
    tcfg.steps = cfg.eval.ablation_tok_steps;
    gtok::GtokModel model(tcfg, substream_seed(cfg.seed, "ablate/" + tag));
    nn::AdamConfig acfg;
    acfg.lr = tcfg.lr;
    acfg.beta2 = 0.95;
    nn::Adam opt(model.params(), acfg);
    Rng cb(substream_seed(cfg.seed, "ablate/cb/" + tag));
    model.init_codebook_from_data(data, 64, cb);
    Rng brng(substream_seed(cfg.seed, "ablate/batch/" + tag));
    gtok::train_tokenizer(model, opt, data, phi, brng, 0, "");
    return model;
  };

  // Table-3 shape: hybrid depth sweep, linear probing + robustness columns
  json sweep = json::array();
  std::unique_ptr<gtok::GtokModel> causal6;
  for (int depth : cfg.eval.hybrid_depths) {
    const std::string name = depth == 0 ? "CNN" : "CNN-ViT-" + std::to_string(depth);
    auto model = train_small_tok(depth, true, "depth" + std::to_string(depth));
    json row{{"method", name}, {"depth", depth}};
    row["linear_probing"] = linear_probe_metrics(model, data, cfg.seed);
    row["reconstruction_robustness"] = robustness_metrics(
        model, data, *ctx.content_clf, cfg.eval.sigma, cfg.eval.area_fraction,
        cfg.eval.ablation_eval_glyphs, cfg.seed);
    sweep.push_back(row);
    if (depth == 6)
      causal6 = std::make_unique<gtok::GtokModel>(std::move(model));
  }
  write_json_file(dir / "hybrid_depth_sweep.json",
                  {{"table", "linear-probing+reconstruction-robustness"},
                   {"rows", sweep}});

  // causal vs non-causal decoder comparison (Table-3 shaped columns)
  json causal_cmp;
  {
    auto noncausal = train_small_tok(6, false, "noncausal");
    json rows = json::array();
    if (causal6) {
      json r{{"method", "CNN+Causal ViT"}};
      r["reconstruction_robustness"] = robustness_metrics(
          *causal6, data, *ctx.content_clf, cfg.eval.sigma,
          cfg.eval.area_fraction, cfg.eval.ablation_eval_glyphs, cfg.seed);
      rows.push_back(r);
    }
    json r2{{"method", "CNN+Non-Causal ViT"}};
    r2["reconstruction_robustness"] = robustness_metrics(
        noncausal, data, *ctx.content_clf, cfg.eval.sigma,
        cfg.eval.area_fraction, cfg.eval.ablation_eval_glyphs, cfg.seed);
    rows.push_back(r2);
    causal_cmp = {{"table", "causal-vs-noncausal"}, {"rows", rows}};
    write_json_file(dir / "causal_vs_noncausal.json", causal_cmp);
  }

  // Table-4 shape: lambda_pixel on/off x soft/hard decoding
  json table4 = json::array();
  {
    if (!causal6)
      causal6 = std::make_unique<gtok::GtokModel>(train_small_tok(6, true,
                                                                  "depth6"));
    causal6->params().set_trainable("", false);
    for (const bool pixel_on : {false, true}) {
      argen::ArgenConfig gcfg = cfg.generator;
      gcfg.steps = cfg.eval.ablation_gen_steps;
      gcfg.batch = cfg.eval.ablation_gen_batch;
      gcfg.lambda_pixel = pixel_on ? cfg.generator.lambda_pixel : 0.0;
      gtok::GtokConfig tcfg = cfg.tokenizer;
      tcfg.steps = cfg.eval.ablation_tok_steps;
      argen::ArgenModel gen(gcfg, tcfg,
                            substream_seed(cfg.seed, "ablate/gen"));
      nn::AdamConfig acfg;
      acfg.lr = gcfg.lr;
      acfg.beta1 = gcfg.beta1;
      acfg.beta2 = gcfg.beta2;
      nn::Adam opt(gen.params(), acfg);
      Rng brng(substream_seed(cfg.seed, std::string("ablate/gen/batch/") +
                                            (pixel_on ? "on" : "off")));
      argen::train_generator(gen, opt, *causal6, data, brng, 0, "");

      auto ufsc = data.pairs(glyphforge::Split::Ufsc);
      Rng prng(substream_seed(cfg.seed, "ablate/gen/eval"));
      std::vector<std::pair<int, int>> sample;
      const int n_eval = std::min<int>(cfg.eval.ablation_eval_glyphs,
                                       static_cast<int>(ufsc.size()));
      auto perm = prng.permutation(static_cast<int>(ufsc.size()));
      for (int i = 0; i < n_eval; ++i) sample.push_back(ufsc[perm[i]]);
      auto outs = generate_pairs(gen, *causal6, data, sample,
                                 substream_seed(cfg.seed, "ablate/gen/run"));
      for (const bool soft : {false, true}) {
        std::vector<GlyphImage> generated, truth;
        for (size_t i = 0; i < sample.size(); ++i) {
          generated.push_back(soft ? outs[i].soft : outs[i].hard);
          truth.push_back(data.glyph(sample[i].first, sample[i].second));
        }
        auto rep = evalkit::evaluate_generated(
            generated, truth, *ctx.content_clf, *ctx.style_clf, "ufsc");
        table4.push_back({{"training_loss",
                           pixel_on ? "w/ pixel loss" : "w/o pixel loss"},
                          {"decoding", soft ? "soft" : "hard"},
                          {"metrics", json::parse(rep.to_json_string())}});
      }
    }
    write_json_file(dir / "decode_strategy.json",
                    {{"table", "pixel-loss-x-decoding"}, {"rows", table4}});
  }

  json combined{{"hybrid_depth_sweep", sweep},
                {"causal_vs_noncausal", causal_cmp},
                {"decode_strategy", table4}};
  write_json_file(dir / "combined.json", combined);
  return combined;
}

}  // namespace garfont::pipeline
