#include "garfont/config.hpp"

#include <fstream>
#include <set>

#include "garfont/common.hpp"
#include "garfont/image_io.hpp"

using json = nlohmann::json;

namespace garfont::config {

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed,
                const std::string& where) {
  if (!j.is_object())
    throw ConfigError("config: expected an object at " + where);
  for (const auto& [key, v] : j.items())
    if (!allowed.count(key))
      throw ConfigError("config: unknown key '" + key + "' in " + where);
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

json ExperimentConfig::to_json() const {
  json j;
  j["version"] = version;
  j["seed"] = seed;
  j["out_dir"] = out_dir;
  j["stages"] = stages;
  j["dataset"] = {{"train_styles", dataset.train_styles},
                  {"eval_styles", dataset.eval_styles},
                  {"train_chars", dataset.train_chars},
                  {"eval_chars", dataset.eval_chars},
                  {"resolution", dataset.resolution},
                  {"render_threads", dataset.render_threads}};
  auto clf_json = [](const evalkit::ClassifierConfig& c) {
    return json{{"base_channels", c.base_channels},
                {"batch", c.batch},
                {"lr", c.lr},
                {"max_epochs", c.max_epochs},
                {"floor", c.floor}};
  };
  j["classifier"] = {{"content", clf_json(clf_content)},
                     {"style", clf_json(clf_style)}};
  j["tokenizer"] = {{"codebook_size", tokenizer.codebook_size},
                    {"code_dim", tokenizer.code_dim},
                    {"vit_depth", tokenizer.vit_depth},
                    {"causal_decoder", tokenizer.causal_decoder},
                    {"base_channels", tokenizer.base_channels},
                    {"heads", tokenizer.heads},
                    {"mlp_ratio", tokenizer.mlp_ratio},
                    {"steps", tokenizer.steps},
                    {"batch", tokenizer.batch},
                    {"lr", tokenizer.lr},
                    {"lambda_rec", tokenizer.lambda_rec},
                    {"lambda_per", tokenizer.lambda_per},
                    {"lambda_vq", tokenizer.lambda_vq},
                    {"beta_commit", tokenizer.beta_commit},
                    {"entropy_weight", tokenizer.entropy_weight}};
  j["generator"] = {{"d_model", generator.d_model},
                    {"layers", generator.layers},
                    {"heads", generator.heads},
                    {"mlp_ratio", generator.mlp_ratio},
                    {"n_refs", generator.n_refs},
                    {"content_channels", generator.content_channels},
                    {"style_channels", generator.style_channels},
                    {"aggregator_layers", generator.aggregator_layers},
                    {"steps", generator.steps},
                    {"batch", generator.batch},
                    {"lr", generator.lr},
                    {"beta1", generator.beta1},
                    {"beta2", generator.beta2},
                    {"lambda_ce", generator.lambda_ce},
                    {"lambda_pixel", generator.lambda_pixel},
                    {"lora_rank", generator.lora_rank},
                    {"lora_alpha", generator.lora_alpha}};
  j["adapter"] = {{"d_text", adapter.d_text},
                  {"text_layers", adapter.text_layers},
                  {"text_heads", adapter.text_heads},
                  {"adapter_layers", adapter.adapter_layers},
                  {"adapter_heads", adapter.adapter_heads},
                  {"k_refs", adapter.k_refs},
                  {"steps", adapter.steps},
                  {"batch", adapter.batch},
                  {"lr", adapter.lr},
                  {"joint", adapter.joint}};
  j["refine"] = {{"nfa",
                  {{"glyphs", nfa.glyphs},
                   {"epochs", nfa.epochs},
                   {"batch", nfa.batch},
                   {"lr", nfa.lr},
                   {"lambda_ce", nfa.lambda_ce},
                   {"lambda_pixel", nfa.lambda_pixel},
                   {"val_glyphs", nfa.val_glyphs}}},
                 {"se",
                  {{"group_size", se.group_size},
                   {"beta_kl", se.beta_kl},
                   {"lambda_ocr", se.lambda_ocr},
                   {"lambda_style", se.lambda_style},
                   {"temperature", se.temperature},
                   {"epochs", se.epochs},
                   {"n_chars", se.n_chars},
                   {"n_styles", se.n_styles},
                   {"pair_batch", se.pair_batch},
                   {"lr", se.lr}}}};
  j["eval"] = {{"sigma", eval.sigma},
               {"area_fraction", eval.area_fraction},
               {"hybrid_depths", eval.hybrid_depths},
               {"max_per_split", eval.max_per_split},
               {"smoke_pairs", eval.smoke_pairs},
               {"ablation_tok_steps", eval.ablation_tok_steps},
               {"ablation_gen_steps", eval.ablation_gen_steps},
               {"ablation_gen_batch", eval.ablation_gen_batch},
               {"ablation_eval_glyphs", eval.ablation_eval_glyphs},
               {"checkpoint", eval.checkpoint}};
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  check_keys(j, {"version", "seed", "out_dir", "stages", "dataset",
                 "classifier", "tokenizer", "generator", "adapter", "refine",
                 "eval"},
             "<root>");
  ExperimentConfig c = desk_preset();
  get_if(j, "version", c.version);
  if (c.version != 1)
    throw ConfigError("config: unsupported version " + std::to_string(c.version));
  get_if(j, "seed", c.seed);
  get_if(j, "out_dir", c.out_dir);
  get_if(j, "stages", c.stages);

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    check_keys(d, {"train_styles", "eval_styles", "train_chars", "eval_chars",
                   "resolution", "render_threads"},
               "dataset");
    get_if(d, "train_styles", c.dataset.train_styles);
    get_if(d, "eval_styles", c.dataset.eval_styles);
    get_if(d, "train_chars", c.dataset.train_chars);
    get_if(d, "eval_chars", c.dataset.eval_chars);
    get_if(d, "resolution", c.dataset.resolution);
    get_if(d, "render_threads", c.dataset.render_threads);
  }
  if (j.contains("classifier")) {
    const auto& cl = j.at("classifier");
    check_keys(cl, {"content", "style"}, "classifier");
    auto read_clf = [](const json& cj, evalkit::ClassifierConfig& out,
                       const std::string& where) {
      check_keys(cj, {"base_channels", "batch", "lr", "max_epochs", "floor"},
                 where);
      get_if(cj, "base_channels", out.base_channels);
      get_if(cj, "batch", out.batch);
      get_if(cj, "lr", out.lr);
      get_if(cj, "max_epochs", out.max_epochs);
      get_if(cj, "floor", out.floor);
    };
    if (cl.contains("content"))
      read_clf(cl.at("content"), c.clf_content, "classifier.content");
    if (cl.contains("style"))
      read_clf(cl.at("style"), c.clf_style, "classifier.style");
  }
  if (j.contains("tokenizer")) {
    const auto& t = j.at("tokenizer");
    check_keys(t, {"codebook_size", "code_dim", "vit_depth", "causal_decoder",
                   "base_channels", "heads", "mlp_ratio", "steps", "batch",
                   "lr", "lambda_rec", "lambda_per", "lambda_vq", "beta_commit",
                   "entropy_weight"},
               "tokenizer");
    get_if(t, "codebook_size", c.tokenizer.codebook_size);
    get_if(t, "code_dim", c.tokenizer.code_dim);
    get_if(t, "vit_depth", c.tokenizer.vit_depth);
    get_if(t, "causal_decoder", c.tokenizer.causal_decoder);
    get_if(t, "base_channels", c.tokenizer.base_channels);
    get_if(t, "heads", c.tokenizer.heads);
    get_if(t, "mlp_ratio", c.tokenizer.mlp_ratio);
    get_if(t, "steps", c.tokenizer.steps);
    get_if(t, "batch", c.tokenizer.batch);
    get_if(t, "lr", c.tokenizer.lr);
    get_if(t, "lambda_rec", c.tokenizer.lambda_rec);
    get_if(t, "lambda_per", c.tokenizer.lambda_per);
    get_if(t, "lambda_vq", c.tokenizer.lambda_vq);
    get_if(t, "beta_commit", c.tokenizer.beta_commit);
    get_if(t, "entropy_weight", c.tokenizer.entropy_weight);
  }
  if (j.contains("generator")) {
    const auto& g = j.at("generator");
    check_keys(g, {"d_model", "layers", "heads", "mlp_ratio", "n_refs",
                   "content_channels", "style_channels", "aggregator_layers",
                   "steps", "batch", "lr", "beta1", "beta2", "lambda_ce",
                   "lambda_pixel", "lora_rank", "lora_alpha"},
               "generator");
    get_if(g, "d_model", c.generator.d_model);
    get_if(g, "layers", c.generator.layers);
    get_if(g, "heads", c.generator.heads);
    get_if(g, "mlp_ratio", c.generator.mlp_ratio);
    get_if(g, "n_refs", c.generator.n_refs);
    get_if(g, "content_channels", c.generator.content_channels);
    get_if(g, "style_channels", c.generator.style_channels);
    get_if(g, "aggregator_layers", c.generator.aggregator_layers);
    get_if(g, "steps", c.generator.steps);
    get_if(g, "batch", c.generator.batch);
    get_if(g, "lr", c.generator.lr);
    get_if(g, "beta1", c.generator.beta1);
    get_if(g, "beta2", c.generator.beta2);
    get_if(g, "lambda_ce", c.generator.lambda_ce);
    get_if(g, "lambda_pixel", c.generator.lambda_pixel);
    get_if(g, "lora_rank", c.generator.lora_rank);
    get_if(g, "lora_alpha", c.generator.lora_alpha);
  }
  if (j.contains("adapter")) {
    const auto& a = j.at("adapter");
    check_keys(a, {"d_text", "text_layers", "text_heads", "adapter_layers",
                   "adapter_heads", "k_refs", "steps", "batch", "lr", "joint"},
               "adapter");
    get_if(a, "d_text", c.adapter.d_text);
    get_if(a, "text_layers", c.adapter.text_layers);
    get_if(a, "text_heads", c.adapter.text_heads);
    get_if(a, "adapter_layers", c.adapter.adapter_layers);
    get_if(a, "adapter_heads", c.adapter.adapter_heads);
    get_if(a, "k_refs", c.adapter.k_refs);
    get_if(a, "steps", c.adapter.steps);
    get_if(a, "batch", c.adapter.batch);
    get_if(a, "lr", c.adapter.lr);
    get_if(a, "joint", c.adapter.joint);
  }
  if (j.contains("refine")) {
    const auto& r = j.at("refine");
    check_keys(r, {"nfa", "se"}, "refine");
    if (r.contains("nfa")) {
      const auto& n = r.at("nfa");
      check_keys(n, {"glyphs", "epochs", "batch", "lr", "lambda_ce",
                     "lambda_pixel", "val_glyphs"},
                 "refine.nfa");
      get_if(n, "glyphs", c.nfa.glyphs);
      get_if(n, "epochs", c.nfa.epochs);
      get_if(n, "batch", c.nfa.batch);
      get_if(n, "lr", c.nfa.lr);
      get_if(n, "lambda_ce", c.nfa.lambda_ce);
      get_if(n, "lambda_pixel", c.nfa.lambda_pixel);
      get_if(n, "val_glyphs", c.nfa.val_glyphs);
    }
    if (r.contains("se")) {
      const auto& s = r.at("se");
      check_keys(s, {"group_size", "beta_kl", "lambda_ocr", "lambda_style",
                     "temperature", "epochs", "n_chars", "n_styles",
                     "pair_batch", "lr"},
                 "refine.se");
      get_if(s, "group_size", c.se.group_size);
      get_if(s, "beta_kl", c.se.beta_kl);
      get_if(s, "lambda_ocr", c.se.lambda_ocr);
      get_if(s, "lambda_style", c.se.lambda_style);
      get_if(s, "temperature", c.se.temperature);
      get_if(s, "epochs", c.se.epochs);
      get_if(s, "n_chars", c.se.n_chars);
      get_if(s, "n_styles", c.se.n_styles);
      get_if(s, "pair_batch", c.se.pair_batch);
      get_if(s, "lr", c.se.lr);
    }
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    check_keys(e, {"sigma", "area_fraction", "hybrid_depths", "max_per_split",
                   "smoke_pairs", "ablation_tok_steps", "ablation_gen_steps",
                   "ablation_gen_batch", "ablation_eval_glyphs", "checkpoint"},
               "eval");
    get_if(e, "sigma", c.eval.sigma);
    get_if(e, "area_fraction", c.eval.area_fraction);
    get_if(e, "hybrid_depths", c.eval.hybrid_depths);
    get_if(e, "max_per_split", c.eval.max_per_split);
    get_if(e, "smoke_pairs", c.eval.smoke_pairs);
    get_if(e, "ablation_tok_steps", c.eval.ablation_tok_steps);
    get_if(e, "ablation_gen_steps", c.eval.ablation_gen_steps);
    get_if(e, "ablation_gen_batch", c.eval.ablation_gen_batch);
    get_if(e, "ablation_eval_glyphs", c.eval.ablation_eval_glyphs);
    get_if(e, "checkpoint", c.eval.checkpoint);
  }
  c.finalize();
  return c;
}

void ExperimentConfig::finalize() {
  const std::set<std::string> known = {"data", "tokenizer", "generator",
                                       "adapter", "nfa", "se", "eval"};
  for (const auto& s : stages)
    if (!known.count(s)) throw ConfigError("config: unknown stage '" + s + "'");

  dataset.seed = substream_seed(seed, "data");
  clf_content.seed = substream_seed(seed, "clf/content");
  clf_style.seed = substream_seed(seed, "clf/style");
  tokenizer.resolution = dataset.resolution;
  tokenizer.seed = substream_seed(seed, "tok");
  const int tokens = (dataset.resolution / 8) * (dataset.resolution / 8);
  generator.content_tokens = tokens;
  generator.style_tokens = tokens;
  generator.seed = substream_seed(seed, "gen");
  adapter.seed = substream_seed(seed, "mm");
  nfa.seed = substream_seed(seed, "nfa");
  se.seed = substream_seed(seed, "se");

  dataset.validate();
  tokenizer.validate();
  generator.validate();
  adapter.validate();
  se.validate();
  if (eval.sigma < 0 || eval.area_fraction < 0 || eval.area_fraction > 1)
    throw ConfigError("config: bad eval corruption parameters");
  if (eval.checkpoint != "gen" && eval.checkpoint != "nfa" &&
      eval.checkpoint != "se")
    throw ConfigError("config: eval.checkpoint must be gen|nfa|se");
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config: " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return from_json(j);
}

void ExperimentConfig::save(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw DiagnosticError("cannot write config: " + path);
  f << to_json().dump(2) << "\n";
}

std::string ExperimentConfig::hash() const {
  return sha256_hex(to_json().dump());
}

ExperimentConfig desk_preset() {
  ExperimentConfig c;
  c.seed = 0;
  c.out_dir = "runs/desk";
  c.dataset.train_styles = 40;
  c.dataset.eval_styles = 8;
  c.dataset.train_chars = 96;
  c.dataset.eval_chars = 32;
  c.dataset.resolution = 32;

  c.clf_content.base_channels = 16;
  c.clf_content.floor = 0.95;
  c.clf_content.max_epochs = 40;
  c.clf_style.base_channels = 16;
  c.clf_style.floor = 0.85;
  c.clf_style.max_epochs = 40;

  c.tokenizer.codebook_size = 256;
  c.tokenizer.code_dim = 8;
  c.tokenizer.vit_depth = 6;
  c.tokenizer.base_channels = 12;
  c.tokenizer.steps = 2000;
  c.tokenizer.batch = 16;
  c.tokenizer.lr = 1e-4;

  c.generator.d_model = 128;
  c.generator.layers = 4;
  c.generator.heads = 4;
  c.generator.n_refs = 8;
  c.generator.content_channels = 12;
  c.generator.style_channels = 8;
  c.generator.steps = 4000;
  c.generator.batch = 32;
  c.generator.lr = 1e-4;

  c.adapter.d_text = 128;
  c.adapter.k_refs = 4;
  c.adapter.steps = 500;
  c.adapter.batch = 32;

  c.nfa.glyphs = 32;
  c.nfa.epochs = 10;
  c.nfa.lr = 1e-3;
  c.se.epochs = 2;
  c.se.n_chars = 16;
  c.se.n_styles = 4;
  c.se.lr = 5e-5;
  c.finalize();
  return c;
}

ExperimentConfig paper64_preset() {
  // The published hyperparameters; documented, far beyond desk budgets.
  ExperimentConfig c = desk_preset();
  c.out_dir = "runs/paper64";
  c.dataset.resolution = 64;
  c.tokenizer.codebook_size = 2048;
  c.tokenizer.vit_depth = 6;
  c.tokenizer.base_channels = 64;
  c.tokenizer.steps = 200000;
  c.tokenizer.batch = 16;
  c.tokenizer.lr = 1e-4;
  c.generator.d_model = 1024;
  c.generator.layers = 24;
  c.generator.heads = 16;
  c.generator.steps = 600000;
  c.generator.batch = 32;
  c.generator.content_channels = 64;
  c.generator.style_channels = 24;
  c.adapter.steps = 40000;
  c.adapter.batch = 128;
  c.nfa.glyphs = 128;
  c.nfa.epochs = 10;
  c.nfa.lr = 2e-5;
  c.se.epochs = 10;
  c.se.lr = 5e-6;
  c.se.n_chars = 128;
  c.se.n_styles = 8;
  c.finalize();
  return c;
}

}  // namespace garfont::config
