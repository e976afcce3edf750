#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "garfont/argen.hpp"
#include "garfont/evalkit.hpp"
#include "garfont/glyphforge.hpp"
#include "garfont/gtok.hpp"
#include "garfont/mmstyle.hpp"
#include "garfont/refine.hpp"

namespace garfont::config {

struct EvalSection {
  double sigma = 0.2;
  double area_fraction = 0.2;
  std::vector<int> hybrid_depths = {0, 2, 4, 6};
  int max_per_split = 160;   // seeded generation subsample per split
  int smoke_pairs = 64;      // seen-pair sample for the content-accuracy probe
  int ablation_tok_steps = 400;
  int ablation_gen_steps = 600;
  int ablation_gen_batch = 16;
  int ablation_eval_glyphs = 96;
  std::string checkpoint = "gen";  // checkpoint evaluated by the eval stage
};

// One versioned document drives every stage. Unknown keys anywhere are
// configuration errors; the canonical JSON dump hashes into every artifact.
struct ExperimentConfig {
  int version = 1;
  uint64_t seed = 0;
  std::string out_dir = "runs/desk";
  std::vector<std::string> stages = {"data",    "tokenizer", "generator",
                                     "adapter", "nfa",       "se",
                                     "eval"};
  glyphforge::DatasetConfig dataset;
  evalkit::ClassifierConfig clf_content;
  evalkit::ClassifierConfig clf_style;
  gtok::GtokConfig tokenizer;
  argen::ArgenConfig generator;
  mmstyle::MmConfig adapter;
  refine::NfaConfig nfa;
  refine::SeConfig se;
  EvalSection eval;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::string& path);
  void save(const std::string& path) const;

  // SHA-256 of the canonical dump (nlohmann sorts keys)
  std::string hash() const;

  // Applies derived fields (resolution propagation, per-stage seeds) and
  // checks cross-section consistency.
  void finalize();
};

ExperimentConfig desk_preset();
ExperimentConfig paper64_preset();

}  // namespace garfont::config
