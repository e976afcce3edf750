#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "garfont/argen.hpp"
#include "garfont/config.hpp"
#include "garfont/evalkit.hpp"
#include "garfont/glyphforge.hpp"
#include "garfont/gtok.hpp"
#include "garfont/mmstyle.hpp"
#include "garfont/refine.hpp"

namespace garfont::pipeline {

struct StageOutcome {
  std::string stage;
  bool skipped = false;  // artifact already present for this config hash
  nlohmann::json metrics;
};

struct PipelineResult {
  std::vector<StageOutcome> stages;
  nlohmann::json metrics;  // stage name -> metrics (deterministic fields only)
};

// Runs the configured stages in pipeline order (data -> tokenizer ->
// generator -> adapter -> nfa -> se -> eval), skipping stages whose artifacts
// already exist for this exact config hash. Every executed stage appends one
// run-ledger entry.
PipelineResult pipeline_run(const config::ExperimentConfig& cfg);

// Runs one stage (CLI subcommands). `input_override` points nfa/se/eval at a
// generator checkpoint outside the pipeline layout; empty uses the layout.
nlohmann::json run_stage(const config::ExperimentConfig& cfg,
                         const std::string& stage,
                         const std::string& input_override = "");

// Evaluates one split against a specific generator checkpoint and writes the
// MetricsReport JSON to out_path.
evalkit::MetricsReport eval_split(const config::ExperimentConfig& cfg,
                                  const std::string& gen_ckpt_dir,
                                  const std::string& split,
                                  const std::string& out_path);

// Loads a generator checkpoint from an arbitrary directory (LoRA tensors are
// detected from the manifest).
std::unique_ptr<argen::ArgenModel> load_generator_from_dir(
    const config::ExperimentConfig& cfg, const std::string& dir);

// Table-3/Table-4 shaped ablation reports: hybrid-depth sweep with linear
// probing + reconstruction robustness, causal-vs-non-causal decoder
// comparison, and the pixel-loss / decode-mode generator grid. Writes JSON
// under <out_dir>/ablations and returns the combined document.
nlohmann::json run_ablation_harness(const config::ExperimentConfig& cfg);

// Stage-artifact loaders shared with the CLI (throw DiagnosticError naming
// the missing artifact and the stage that produces it).
glyphforge::Dataset load_dataset_artifact(const config::ExperimentConfig& cfg);
std::unique_ptr<evalkit::Classifier> load_classifier_artifact(
    const config::ExperimentConfig& cfg, evalkit::Classifier::Target target);
std::unique_ptr<gtok::GtokModel> load_tokenizer_artifact(
    const config::ExperimentConfig& cfg);
std::unique_ptr<argen::ArgenModel> load_generator_artifact(
    const config::ExperimentConfig& cfg, const std::string& which /*gen|nfa|se*/);
std::unique_ptr<mmstyle::MmStyleEncoder> load_adapter_artifact(
    const config::ExperimentConfig& cfg, const argen::ArgenModel& gen);

// Classifier persistence (shape/labels embedded in the checkpoint manifest).
void save_classifier(const evalkit::Classifier& clf, const std::string& dir,
                     const std::string& config_hash);
std::unique_ptr<evalkit::Classifier> load_classifier(const std::string& dir);

std::string stage_dir(const config::ExperimentConfig& cfg,
                      const std::string& stage);

}  // namespace garfont::pipeline
