#pragma once

#include <memory>
#include <string>
#include <vector>

#include "garfont/argen.hpp"
#include "garfont/evalkit.hpp"
#include "garfont/glyphforge.hpp"
#include "garfont/gtok.hpp"

namespace garfont::refine {

// ---------------------------------------------------------------------------
// novel font adaptation
// ---------------------------------------------------------------------------

struct NfaConfig {
  int glyphs = 32;   // adaptation references from the target style
  int epochs = 10;
  int batch = 8;
  double lr = 2e-5;
  double lambda_ce = 1.0;
  double lambda_pixel = 1.0;
  int val_glyphs = 16;  // held-out characters of the style for before/after L1
  uint64_t seed = 0;
};

struct NfaResult {
  int target_style = -1;
  double val_l1_before = 0;
  double val_l1_after = 0;
  std::vector<double> epoch_losses;
  std::string base_hash_before;  // non-adapter parameters
  std::string base_hash_after;
};

// Adapts only the LoRA parameters to one unseen style using its reference
// glyphs (mixed token-pixel loss). Base weights are bit-invariant.
NfaResult nfa_finetune(argen::ArgenModel& gen, const gtok::GtokModel& tok,
                       const glyphforge::Dataset& data, int target_style,
                       const NfaConfig& cfg, const std::string& loss_csv_path);

// ---------------------------------------------------------------------------
// structural enhancement (group-relative policy optimization)
// ---------------------------------------------------------------------------

struct RewardRecord {
  double r_ocr = 0;     // recognition confidence if correct, else 0
  double r_style = 0;   // style model's probability of the reference style
  double composite = 0;
  double p_ocr = 0;     // max softmax confidence
  int pred_char = -1;
  int target_char = -1;
};

RewardRecord compute_reward(const GlyphImage& image, int target_char,
                            int target_style,
                            const evalkit::Classifier& content_clf,
                            const evalkit::Classifier& style_clf,
                            double lambda_ocr, double lambda_style);

// Group-normalized advantages: population mean/std; a zero-variance group
// yields all-zero advantages. Requires at least two samples.
std::vector<double> group_advantages(const std::vector<double>& rewards);

struct SeConfig {
  int group_size = 4;  // G
  double beta_kl = 0.01;
  double lambda_ocr = 1.0;
  double lambda_style = 1.0;
  double temperature = 1.0;
  int epochs = 2;
  int n_chars = 16;
  int n_styles = 4;
  int pair_batch = 8;  // groups folded into one optimizer step
  double lr = 5e-5;
  uint64_t seed = 0;
  void validate() const;
};

struct GroupSample {
  std::vector<std::vector<int>> sequences;  // G token sequences
  std::vector<double> rewards;
  std::vector<double> advantages;
};

// Advantage-weighted negative log-likelihood plus beta * KL(policy || ref),
// the KL estimated exactly per position over the full codebook distribution
// and averaged across the group's sequences.
Tensor se_group_loss(const argen::ArgenModel& policy,
                     const argen::ArgenModel& reference, const Tensor& cond,
                     const GroupSample& group, double beta);

struct SeResult {
  std::vector<double> epoch_mean_rewards;
  bool degenerate_warning = false;  // zero variance across every group
  std::string base_hash_before;
  std::string base_hash_after;
};

// Samples G sequences per (content, style) pair at the configured
// temperature, scores composite rewards, and steps the LoRA parameters on the
// group-relative objective. The reference policy is a frozen snapshot taken
// at entry.
SeResult se_refine(argen::ArgenModel& gen, const gtok::GtokModel& tok,
                   const glyphforge::Dataset& data,
                   const evalkit::Classifier& content_clf,
                   const evalkit::Classifier& style_clf, const SeConfig& cfg,
                   const std::string& reward_csv_path);

// Frozen copy of a generator (shared architecture, values snapshotted).
std::unique_ptr<argen::ArgenModel> snapshot_policy(
    const argen::ArgenModel& gen, const gtok::GtokConfig& tok_cfg);

}  // namespace garfont::refine
