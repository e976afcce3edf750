#pragma once

#include <functional>
#include <string>
#include <vector>

#include "garfont/glyphforge.hpp"
#include "garfont/image.hpp"
#include "garfont/nn.hpp"
#include "garfont/rng.hpp"
#include "garfont/tensor.hpp"

namespace garfont::gtok {

struct GtokConfig {
  int resolution = 32;
  int codebook_size = 256;  // K
  int code_dim = 8;         // d (ViT width; Eq. 1 keeps token dim = code dim)
  int vit_depth = 6;        // encoder/decoder attention blocks: 0/2/4/6
  bool causal_decoder = true;
  int base_channels = 16;
  int heads = 2;
  int mlp_ratio = 4;
  // training
  int steps = 2000;
  int batch = 16;
  double lr = 1e-4;
  double lambda_rec = 1.0;
  double lambda_per = 0.1;
  double lambda_vq = 1.0;
  double beta_commit = 0.25;
  double entropy_weight = 0.1;
  uint64_t seed = 0;

  int token_grid() const { return resolution / 8; }
  int n_tokens() const { return token_grid() * token_grid(); }
  void validate() const;
};

// Frozen perceptual feature stack Phi: image [1,H,W] -> intermediate features.
using PerceptualFn = std::function<std::vector<Tensor>(const Tensor&)>;

struct QuantizeResult {
  std::vector<int> indices;  // nearest entry per token, ties -> lowest index
  Tensor quantized;          // straight-through estimator output [N,d]
  Tensor embedding_loss;     // ||sg(z) - e||^2, pulls the codebook
  Tensor commitment_loss;    // ||z - sg(e)||^2, pulls the encoder
  Tensor entropy_bonus;      // soft-assignment usage entropy (maximized)
  Tensor soft_assign;        // [N,K] softmax(-d^2), for batch-level entropy
};

struct TokenizerLossWeights {
  double rec = 1.0, per = 0.1, vq = 1.0, beta_commit = 0.25, entropy = 0.1;
};

// Differentiable batch-usage entropy from stacked soft assignments.
Tensor usage_entropy(const Tensor& soft_assign);

class GtokModel {
 public:
  GtokModel(const GtokConfig& cfg, uint64_t init_seed);

  // conv stack -> project to d -> +P_2D -> vit_depth self-attention blocks
  Tensor encode(const Tensor& image_chw) const;
  // nearest-codebook quantization with straight-through gradients
  QuantizeResult quantize(const Tensor& latents) const;
  // same, with the (non-differentiable) assignment pinned by the caller;
  // gradient checks use this to keep the loss smooth across probes
  QuantizeResult quantize_with_indices(const Tensor& latents,
                                       const std::vector<int>& indices) const;
  // vit_depth causal (or full, per config) blocks -> transposed-conv stack
  Tensor decode(const Tensor& tokens) const;

  // Seeds codebook entries from encoded latents of sampled train glyphs
  // (with a small jitter) so early usage spreads across the table.
  void init_codebook_from_data(const glyphforge::Dataset& data, int n_images,
                               Rng& rng);

  // inference conveniences (no grad)
  std::vector<int> encode_indices(const GlyphImage& img) const;
  GlyphImage decode_indices(const std::vector<int>& indices) const;
  GlyphImage reconstruct(const GlyphImage& img) const;

  const GtokConfig& config() const { return cfg_; }
  Tensor codebook() const { return codebook_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

 private:
  GtokConfig cfg_;
  nn::ParamStore params_;
  // encoder
  nn::Conv2dLayer enc_in_;
  std::vector<nn::Conv2dLayer> enc_res_, enc_down_;
  nn::Conv2dLayer enc_proj_;
  std::vector<nn::TransformerBlock> enc_vit_;
  nn::LayerNormLayer enc_ln_;  // bounds the latent scale entering the codebook
  // decoder
  std::vector<nn::TransformerBlock> dec_vit_;
  nn::LayerNormLayer dec_ln_;
  nn::Conv2dLayer dec_unproj_;
  std::vector<nn::Conv2dLayer> dec_res_;
  std::vector<nn::ConvT2dLayer> dec_up_;
  nn::Conv2dLayer dec_out_;
  Tensor codebook_;
  nn::PositionalEmbedding2D pos_;

  Tensor run_conv_encoder(const Tensor& image_chw) const;
  Tensor run_conv_decoder(const Tensor& grid) const;
};

// Eq.-style weighted loss: rec L1 + per ||Phi(I)-Phi(I_hat)||^2 + vq terms.
// `phi` may be null when w.per == 0. Negative weights are validation errors.
Tensor tokenizer_loss(const Tensor& image, const Tensor& recon,
                      const QuantizeResult& vq, const TokenizerLossWeights& w,
                      const PerceptualFn& phi, const Tensor& batch_entropy);

struct TrainLogRow {
  int step = 0;
  double total = 0, rec = 0, per = 0, vq = 0;
  double perplexity = -1;  // logged at epoch boundaries, else -1
};

struct TokTrainResult {
  std::vector<TrainLogRow> log;
  double final_perplexity = 0;  // hard-usage perplexity over the last epoch
  double final_rec_l1 = 0;      // mean batch rec loss over the last 20 steps
};

// Trains in place from `start_step` to cfg.steps. `batch_rng` carries the
// sampling stream (restored verbatim on resume). Aborts with a diagnostic
// error after 10 consecutive non-finite losses.
TokTrainResult train_tokenizer(GtokModel& model, nn::Adam& opt,
                               const glyphforge::Dataset& data,
                               const PerceptualFn& phi, Rng& batch_rng,
                               int start_step,
                               const std::string& loss_csv_path);

void append_loss_csv(const std::string& path,
                     const std::vector<TrainLogRow>& rows, bool write_header);

}  // namespace garfont::gtok
