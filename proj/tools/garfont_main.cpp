// garfont: dataset synthesis, tokenizer/generator training, multimodal
// adaptation, post-refinement, and evaluation for the glyph pipeline.
//
// Exit codes: 0 ok, 2 configuration error, 3 stage failure.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "garfont/argen.hpp"
#include "garfont/checkpoint.hpp"
#include "garfont/common.hpp"
#include "garfont/config.hpp"
#include "garfont/glyphforge.hpp"
#include "garfont/image_io.hpp"
#include "garfont/mmstyle.hpp"
#include "garfont/pipeline.hpp"
#include "garfont/sheet.hpp"

namespace fs = std::filesystem;
using namespace garfont;

namespace {

config::ExperimentConfig load_config(const std::string& path) {
  config::ExperimentConfig cfg =
      path.empty() ? config::desk_preset() : config::ExperimentConfig::load(path);
  if (const char* env = std::getenv("GARFONT_SEED")) {
    cfg.seed = std::strtoull(env, nullptr, 10);
    cfg.finalize();
  }
  return cfg;
}

std::vector<int> parse_index_list(const std::string& csv, int expect) {
  std::vector<int> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
  if (expect > 0 && static_cast<int>(out.size()) != expect)
    throw ValidationError("expected " + std::to_string(expect) +
                          " comma-separated indices, got " +
                          std::to_string(out.size()));
  return out;
}

// generated-vs-truth sheet for a handful of characters of one style
void write_sample_sheet(const config::ExperimentConfig& cfg,
                        const std::string& gen_ckpt, int style_id, int n_chars,
                        const std::string& prompt, int k_refs,
                        double temperature, const std::string& mode,
                        const std::string& out_path) {
  auto data = pipeline::load_dataset_artifact(cfg);
  auto tok = pipeline::load_tokenizer_artifact(cfg);
  auto gen = gen_ckpt.empty()
                 ? pipeline::load_generator_artifact(cfg, "gen")
                 : pipeline::load_generator_from_dir(cfg, gen_ckpt);
  std::unique_ptr<mmstyle::MmStyleEncoder> mm;
  if (!prompt.empty()) mm = pipeline::load_adapter_artifact(cfg, *gen);

  const auto& manifest = data.manifest;
  if (style_id < 0 || style_id >= manifest.n_styles())
    throw ValidationError("style id out of range");
  const argen::DecodeMode dm =
      mode == "hard" ? argen::DecodeMode::Hard : argen::DecodeMode::Soft;

  std::vector<GlyphImage> generated, truth;
  Rng crng(substream_seed(cfg.seed, "sample/chars"));
  for (int i = 0; i < n_chars; ++i) {
    const int ch =
        static_cast<int>(crng.uniform_int(manifest.config.train_chars));
    Rng rrng(substream_seed(cfg.seed, "sample/refs/" + std::to_string(i)));
    const int want_refs = prompt.empty() ? gen->config().n_refs : k_refs;
    auto ref_chars =
        glyphforge::sample_style_refs(manifest, style_id, ch, want_refs, rrng);
    std::vector<GlyphImage> refs;
    for (int rc : ref_chars) refs.push_back(data.glyph(style_id, rc));
    argen::GenerateResult res;
    if (prompt.empty()) {
      res = argen::generate(
          *gen, *tok, data.glyph(0, ch), refs, dm, temperature,
          substream_seed(cfg.seed, "sample/" + std::to_string(i)));
    } else {
      res = mmstyle::generate_mm(
          *mm, *gen, *tok, data.glyph(0, ch), refs, prompt, dm, temperature,
          substream_seed(cfg.seed, "sample/" + std::to_string(i)));
    }
    generated.push_back(res.image);
    truth.push_back(data.glyph(style_id, ch));
  }
  if (!fs::path(out_path).parent_path().empty())
    fs::create_directories(fs::path(out_path).parent_path());
  sheet::render_sheet(generated, truth, out_path, prompt.empty() ? "GEN" : "MM",
                      cfg.hash());
  std::cout << "wrote " << out_path << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"garfont: few-shot glyph generation pipeline"};
  app.require_subcommand(1);

  std::string config_path, out_dir, ckpt_dir, split = "ufsc";
  std::string out_path, image_path, indices_csv, prompt, mode = "soft";
  int style_id = 0, char_id = 0, n_chars = 8, k_refs = 4;
  double temperature = 0.0;

  auto* data = app.add_subcommand("data", "dataset synthesis");
  auto* data_build = data->add_subcommand("build", "generate the glyph universe");
  data_build->add_option("--config", config_path, "experiment config JSON");
  data_build->add_option("--out", out_dir, "output directory override");

  auto* tok = app.add_subcommand("tok", "global-aware tokenizer");
  auto* tok_train = tok->add_subcommand("train", "train (resumes when possible)");
  tok_train->add_option("--config", config_path);
  auto* tok_encode = tok->add_subcommand("encode", "image -> token indices");
  tok_encode->add_option("--config", config_path);
  tok_encode->add_option("--image", image_path, "PNG path (default: dataset glyph)");
  tok_encode->add_option("--style", style_id);
  tok_encode->add_option("--char", char_id);
  auto* tok_decode = tok->add_subcommand("decode", "token indices -> PNG");
  tok_decode->add_option("--config", config_path);
  tok_decode->add_option("--indices", indices_csv)->required();
  tok_decode->add_option("--out", out_path)->required();

  auto* gen = app.add_subcommand("gen", "autoregressive generator");
  auto* gen_train = gen->add_subcommand("train", "visual pretraining");
  gen_train->add_option("--config", config_path);
  auto* gen_sample = gen->add_subcommand("sample", "glyph sheet for one style");
  gen_sample->add_option("--config", config_path);
  gen_sample->add_option("--ckpt", ckpt_dir, "generator checkpoint override");
  gen_sample->add_option("--style", style_id);
  gen_sample->add_option("--chars", n_chars);
  gen_sample->add_option("--mode", mode, "soft|hard");
  gen_sample->add_option("--temperature", temperature);
  gen_sample->add_option("--out", out_path);

  auto* mm = app.add_subcommand("mm", "multimodal style encoder");
  auto* mm_train = mm->add_subcommand("train", "language-style adapter");
  mm_train->add_option("--config", config_path);
  auto* mm_sample = mm->add_subcommand("sample", "text + k refs generation");
  mm_sample->add_option("--config", config_path);
  mm_sample->add_option("--refs", k_refs, "visual references k");
  mm_sample->add_option("--prompt", prompt)->required();
  mm_sample->add_option("--style", style_id);
  mm_sample->add_option("--chars", n_chars);
  mm_sample->add_option("--out", out_path);

  auto* refine = app.add_subcommand("refine", "post-refinement");
  auto* refine_nfa = refine->add_subcommand("nfa", "novel font adaptation");
  refine_nfa->add_option("--config", config_path);
  refine_nfa->add_option("--ckpt", ckpt_dir, "generator checkpoint to adapt");
  auto* refine_se = refine->add_subcommand("se", "structural enhancement");
  refine_se->add_option("--config", config_path);
  refine_se->add_option("--ckpt", ckpt_dir, "checkpoint to refine");

  auto* eval = app.add_subcommand("eval", "metrics and ablations");
  auto* eval_run = eval->add_subcommand("run", "UFSC/UFUC metrics report");
  eval_run->add_option("--config", config_path);
  eval_run->add_option("--gen", ckpt_dir, "generator checkpoint dir");
  eval_run->add_option("--split", split, "ufsc|ufuc")->required();
  eval_run->add_option("--out", out_path, "report JSON path")->required();
  auto* eval_ablate =
      eval->add_subcommand("ablate", "hybrid/causal/pixel ablations");
  eval_ablate->add_option("--config", config_path);

  auto* pipe = app.add_subcommand("pipeline", "end-to-end orchestration");
  auto* pipe_run = pipe->add_subcommand("run", "run configured stages in order");
  pipe_run->add_option("--config", config_path);

  auto* sheet_cmd = app.add_subcommand("sheet", "render a comparison sheet");
  sheet_cmd->add_option("--config", config_path);
  sheet_cmd->add_option("--ckpt", ckpt_dir, "generator checkpoint override");
  sheet_cmd->add_option("--style", style_id);
  sheet_cmd->add_option("--chars", n_chars);
  sheet_cmd->add_option("--out", out_path)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    config::ExperimentConfig cfg = load_config(config_path);

    if (data_build->parsed()) {
      const std::string dir =
          out_dir.empty() ? pipeline::stage_dir(cfg, "data") : out_dir;
      auto manifest = glyphforge::build_dataset(cfg.dataset, dir);
      std::cout << "dataset: " << manifest.n_styles() << " styles x "
                << manifest.n_chars() << " chars -> " << dir << "\n";
    } else if (tok_train->parsed()) {
      auto metrics = pipeline::run_stage(cfg, "tokenizer");
      std::cout << metrics.dump(2) << "\n";
    } else if (tok_encode->parsed()) {
      auto model = pipeline::load_tokenizer_artifact(cfg);
      GlyphImage img;
      if (!image_path.empty()) {
        img = load_glyph_png(image_path);
      } else {
        auto ds = pipeline::load_dataset_artifact(cfg);
        img = ds.glyph(style_id, char_id);
      }
      auto indices = model->encode_indices(img);
      nlohmann::json j{{"indices", indices}};
      std::cout << j.dump() << "\n";
    } else if (tok_decode->parsed()) {
      auto model = pipeline::load_tokenizer_artifact(cfg);
      auto indices = parse_index_list(indices_csv, model->config().n_tokens());
      save_glyph_png(out_path, model->decode_indices(indices));
      std::cout << "wrote " << out_path << "\n";
    } else if (gen_train->parsed()) {
      auto metrics = pipeline::run_stage(cfg, "generator");
      std::cout << metrics.dump(2) << "\n";
    } else if (gen_sample->parsed()) {
      if (out_path.empty())
        out_path = (fs::path(cfg.out_dir) / "samples" /
                    ("style" + std::to_string(style_id) + ".png"))
                       .string();
      write_sample_sheet(cfg, ckpt_dir, style_id, n_chars, "", 0, temperature,
                         mode, out_path);
    } else if (mm_train->parsed()) {
      auto metrics = pipeline::run_stage(cfg, "adapter");
      std::cout << metrics.dump(2) << "\n";
    } else if (mm_sample->parsed()) {
      if (out_path.empty())
        out_path = (fs::path(cfg.out_dir) / "samples" /
                    ("mm_style" + std::to_string(style_id) + ".png"))
                       .string();
      write_sample_sheet(cfg, ckpt_dir, style_id, n_chars, prompt, k_refs, 0.0,
                         "soft", out_path);
    } else if (refine_nfa->parsed()) {
      auto metrics = pipeline::run_stage(cfg, "nfa", ckpt_dir);
      std::cout << metrics.dump(2) << "\n";
    } else if (refine_se->parsed()) {
      auto metrics = pipeline::run_stage(cfg, "se", ckpt_dir);
      std::cout << metrics.dump(2) << "\n";
    } else if (eval_run->parsed()) {
      auto report = pipeline::eval_split(cfg, ckpt_dir, split, out_path);
      std::cout << report.to_json_string() << "\n";
    } else if (eval_ablate->parsed()) {
      pipeline::run_ablation_harness(cfg);
      std::cout << "ablation reports under " << cfg.out_dir << "/ablations\n";
    } else if (pipe_run->parsed()) {
      auto result = pipeline::pipeline_run(cfg);
      std::cout << result.metrics.dump(2) << "\n";
    } else if (sheet_cmd->parsed()) {
      write_sample_sheet(cfg, ckpt_dir, style_id, n_chars, "", 0, 0.0, "soft",
                         out_path);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "stage failure: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
