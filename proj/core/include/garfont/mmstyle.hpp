#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "garfont/argen.hpp"
#include "garfont/glyphforge.hpp"
#include "garfont/nn.hpp"

namespace garfont::mmstyle {

struct MmConfig {
  int d_text = 128;
  int text_layers = 2;
  int text_heads = 4;
  int adapter_layers = 6;
  int adapter_heads = 4;
  int k_refs = 4;  // k < N_s visual references alongside the text
  int steps = 500;
  int batch = 32;
  double lr = 1e-4;
  bool joint = false;  // ablation: train generator jointly instead
  uint64_t seed = 0;
  void validate() const;
};

// Closed vocabulary over the description templates; id 0 is the reserved
// unknown token.
struct Vocab {
  std::vector<std::string> words;
  std::unordered_map<std::string, int> index;

  static Vocab build(const std::vector<std::string>& corpus);
  std::vector<int> tokenize(const std::string& prompt) const;
  int size() const { return static_cast<int>(words.size()); }
};

class MmStyleEncoder {
 public:
  MmStyleEncoder(const MmConfig& cfg, const argen::ArgenConfig& gen_cfg,
                 Vocab vocab, uint64_t init_seed);

  // whitespace/punctuation tokenize -> embed -> 2 self-attention layers ->
  // mean pool. Empty prompts are validation errors.
  Tensor encode_text(const std::string& prompt) const;  // [1, d_text]

  // Projects the pooled text embedding into the visual feature space and
  // refines it by attending to the given style features; the aligned token is
  // spatially expanded to the shape of one reference's features.
  Tensor adapt(const Tensor& text_embedding,
               const std::vector<Tensor>& vis_feats) const;

  // [F_vis_1 .. F_vis_k, F_t] ready for the aggregator.
  std::vector<Tensor> multimodal_features(
      const std::string& prompt, const std::vector<Tensor>& vis_feats) const;

  const MmConfig& config() const { return cfg_; }
  const Vocab& vocab() const { return vocab_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

 private:
  MmConfig cfg_;
  int n_refs_limit_;   // generator's N_s
  int style_tokens_;
  Vocab vocab_;
  nn::ParamStore params_;
  Tensor word_embed_;  // [V, d_text]
  Tensor pos_embed_;   // [max_len, d_text]
  std::vector<nn::TransformerBlock> text_blocks_;
  nn::LayerNormLayer text_ln_;
  nn::LoraLinear proj_in_;   // d_text -> d_model
  std::vector<nn::CrossAttentionBlock> adapter_blocks_;
  nn::LoraLinear proj_out_;  // zero-initialized: F_t = 0 at init
};

// Mean squared distance between the two aggregated representations (Eq.-style
// alignment objective). Symmetric, zero iff they coincide.
Tensor adapter_loss(const Tensor& t_mm, const Tensor& t_vis);

struct MmTrainLogRow {
  int step = 0;
  double loss = 0;
};

struct MmTrainResult {
  std::vector<MmTrainLogRow> log;
  double initial_loss = 0;  // mean over the first 10 steps
  double final_loss = 0;    // mean over the last 10 steps
};

// Decoupled training: only the text encoder and adapter update; the
// generator's parameters are bit-identical afterwards. With cfg.joint the
// generator trains too (the VL_k ablation, AR objective) and `opt_gen` must
// be supplied.
MmTrainResult train_adapter(MmStyleEncoder& enc, nn::Adam& opt,
                            argen::ArgenModel& gen, nn::Adam* opt_gen,
                            const gtok::GtokModel& tok,
                            const glyphforge::Dataset& data, Rng& batch_rng,
                            int start_step, const std::string& loss_csv_path);

// Generation with k visual references plus a textual description.
argen::GenerateResult generate_mm(const MmStyleEncoder& enc,
                                  const argen::ArgenModel& gen,
                                  const gtok::GtokModel& tok,
                                  const GlyphImage& content,
                                  const std::vector<GlyphImage>& refs,
                                  const std::string& prompt,
                                  argen::DecodeMode mode, double temperature,
                                  uint64_t seed);

}  // namespace garfont::mmstyle
