#pragma once

#include <optional>
#include <string>
#include <vector>

#include "garfont/glyphforge.hpp"
#include "garfont/gtok.hpp"
#include "garfont/image.hpp"
#include "garfont/nn.hpp"
#include "garfont/rng.hpp"

namespace garfont::argen {

struct ArgenConfig {
  int d_model = 128;
  int layers = 4;
  int heads = 4;
  int mlp_ratio = 4;
  int n_refs = 8;  // N_s style references during visual pretraining
  int content_tokens = 16;
  int style_tokens = 16;
  int content_channels = 12;
  int style_channels = 8;
  int aggregator_layers = 3;
  // training
  int steps = 4000;
  int batch = 32;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double lambda_ce = 1.0;
  double lambda_pixel = 1.0;
  int lora_rank = 8;
  double lora_alpha = 16.0;
  uint64_t seed = 0;
  void validate() const;
};

struct GenerateResult {
  GlyphImage image;
  std::vector<int> indices;  // sampled token sequence
  Tensor logits;             // [N, K] rows captured at each sampling step
};

enum class DecodeMode { Hard, Soft };

class ArgenModel {
 public:
  ArgenModel(const ArgenConfig& cfg, const gtok::GtokConfig& tok_cfg,
             uint64_t init_seed);

  // conv feature tokens [content_tokens, d_model] / per-ref [style_tokens, d_model]
  Tensor encode_content(const Tensor& image_chw) const;
  std::vector<Tensor> encode_style(const std::vector<Tensor>& images) const;

  // cross-attention fusion; output [content_tokens + content_tokens, d_model]
  // = aggregated style-infused content followed by projected content features
  Tensor aggregate(const Tensor& content_feat,
                   const std::vector<Tensor>& style_feats) const;

  // teacher-forced pass: logits for all N positions given the full target
  Tensor forward_teacher(const Tensor& cond,
                         const std::vector<int>& targets) const;
  // logits row for position prefix.size() (prefix may be empty)
  Tensor ar_forward(const Tensor& cond, const std::vector<int>& prefix) const;

  GenerateResult sample_tokens(const Tensor& cond, double temperature,
                               Rng& rng) const;

  int cond_len() const { return cfg_.content_tokens * 2; }
  const ArgenConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  // attaches rank-r adapters to every decoder attention projection and MLP
  // matrix (post-refinement entry point)
  void attach_lora(Rng& rng);
  bool has_lora() const { return lora_attached_; }

 private:
  ArgenConfig cfg_;
  int n_tokens_;
  int codebook_size_;
  nn::ParamStore params_;
  // content encoder
  nn::Conv2dLayer cont_in_, cont_d1_, cont_d2_, cont_d3_, cont_proj_;
  nn::Conv2dLayer cont_r1_, cont_r2_;
  nn::LayerNormLayer cont_ln_;
  // style encoder (shared across references)
  nn::Conv2dLayer sty_in_, sty_d1_, sty_d2_, sty_d3_, sty_proj_;
  nn::LayerNormLayer sty_ln_;
  // aggregator
  std::vector<nn::CrossAttentionBlock> agg_;
  nn::LoraLinear fc_proj_;
  // decoder
  Tensor tok_embed_;  // [K, d_model]
  Tensor pos_embed_;  // [cond_len + N, d_model]
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNormLayer ln_f_;
  nn::LoraLinear head_;
  bool lora_attached_ = false;

  Tensor decode_hidden(const Tensor& seq) const;  // run blocks w/ prefix mask
};

// softmax(L) @ C: rows live in the codebook's convex hull
Tensor soft_decode(const Tensor& logits, const Tensor& codebook);

// lambda_ce * CE(logits, targets) + lambda_pixel * L1(soft_recon, target_img)
Tensor generator_loss(const Tensor& logits, const std::vector<int>& targets,
                      const Tensor& soft_recon, const Tensor& target_image,
                      double lambda_ce, double lambda_pixel);

// Full conditional generation. `content` should be rendered in the fixed
// source style (id 0); anything else logs a warning. Deterministic for fixed
// seed and temperature.
GenerateResult generate(const ArgenModel& model, const gtok::GtokModel& tok,
                        const GlyphImage& content,
                        const std::vector<GlyphImage>& styles, DecodeMode mode,
                        double temperature, uint64_t seed);

struct GenTrainLogRow {
  int step = 0;
  double total = 0, ce = 0, pixel = 0;
};

struct GenTrainResult {
  std::vector<GenTrainLogRow> log;
  double final_ce = 0;  // mean over last 20 steps
};

// Visual pretraining: jointly optimizes aggregator, decoder, and both
// encoders against frozen tokenizer targets.
GenTrainResult train_generator(ArgenModel& model, nn::Adam& opt,
                               const gtok::GtokModel& tok,
                               const glyphforge::Dataset& data, Rng& batch_rng,
                               int start_step,
                               const std::string& loss_csv_path);

void append_gen_csv(const std::string& path,
                    const std::vector<GenTrainLogRow>& rows, bool write_header);

// Cached tokenizer targets for the training loop (frozen tokenizer).
std::vector<std::vector<int>> cache_token_targets(
    const gtok::GtokModel& tok, const glyphforge::Dataset& data);

}  // namespace garfont::argen
