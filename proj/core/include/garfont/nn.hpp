#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "garfont/rng.hpp"
#include "garfont/tensor.hpp"

namespace garfont::nn {

// Ordered registry of named parameters. Insertion order is the canonical
// order for optimizers and checkpoints, so construction order must be
// deterministic.
class ParamStore {
 public:
  Tensor create(const std::string& name, const Shape& shape, double init_std,
                Rng& rng);
  Tensor create_const(const std::string& name, const Shape& shape, double v);
  Tensor* find(const std::string& name);
  const Tensor* find(const std::string& name) const;

  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
  const std::vector<std::pair<std::string, Tensor>>& items() const {
    return items_;
  }

  void zero_grad();
  int64_t param_count() const;
  // Enables/disables training for every parameter whose name starts with
  // `prefix` ("" matches all). Returns the number of parameters touched.
  int set_trainable(const std::string& prefix, bool trainable);
  int set_trainable_if(const std::function<bool(const std::string&)>& pred,
                       bool trainable);
  // SHA-256 over the raw bytes of every parameter whose name starts with
  // `prefix`, in store order. Names are hashed too.
  std::string hash_params(const std::string& prefix = "") const;
  std::string hash_params_if(
      const std::function<bool(const std::string&)>& keep) const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

// Copies parameter values between stores with identical layouts (same names
// in the same order); used for frozen policy snapshots.
void copy_params(const ParamStore& src, ParamStore& dst);

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

struct AttentionMask {
  enum class Kind { Full, Causal, PrefixCausal };
  int n = 0;
  Kind kind = Kind::Full;
  std::vector<uint8_t> allow;  // n*n, row = query, col = key, 1 = attend

  static AttentionMask full(int n);
  static AttentionMask causal(int n);
  // Positions < prefix attend to the whole prefix; positions >= prefix attend
  // to the prefix plus earlier generated positions and themselves.
  static AttentionMask prefix_causal(int n, int prefix);

  bool allows(int q, int k) const { return allow[static_cast<size_t>(q) * n + k]; }
};

// Scaled dot-product attention over single-head sequences. Masked positions
// receive exactly zero weight (additive -1e30 underflows to 0 in the softmax).
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 const AttentionMask& mask);

struct PositionalEmbedding2D {
  int h = 0, w = 0, d = 0;
  Tensor values;  // [h*w, d]
};

// Concatenated sinusoidal encodings of the row and column index (d/2 each).
// d must be divisible by 4.
PositionalEmbedding2D sinusoidal_pos_2d(int h, int w, int d);

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

// y = x @ w + b, with optional low-rank adapter: w_eff = w + (alpha/r) dn @ up.
// The up matrix starts at zero so a fresh adapter is an exact no-op.
struct LoraLinear {
  Tensor w;  // [in, out]
  Tensor b;  // [out]
  Tensor lora_down;  // [in, r]
  Tensor lora_up;    // [r, out]
  double lora_scale = 0.0;
  int rank = 0;

  LoraLinear() = default;
  LoraLinear(ParamStore& ps, const std::string& prefix, int in, int out,
             Rng& rng);
  void attach_lora(ParamStore& ps, const std::string& prefix, int r,
                   double alpha, Rng& rng);
  bool has_lora() const { return rank > 0; }
  Tensor forward(const Tensor& x) const;
};

struct LayerNormLayer {
  Tensor gain, bias;
  LayerNormLayer() = default;
  LayerNormLayer(ParamStore& ps, const std::string& prefix, int dim);
  Tensor forward(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

struct Conv2dLayer {
  Tensor w, b;
  int stride = 1, pad = 1;
  Conv2dLayer() = default;
  Conv2dLayer(ParamStore& ps, const std::string& prefix, int ci, int co, int k,
              int stride, int pad, Rng& rng);
  Tensor forward(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }
};

struct ConvT2dLayer {
  Tensor w, b;
  int stride = 2, pad = 1;
  ConvT2dLayer() = default;
  ConvT2dLayer(ParamStore& ps, const std::string& prefix, int ci, int co, int k,
               int stride, int pad, Rng& rng);
  Tensor forward(const Tensor& x) const {
    return conv_transpose2d(x, w, b, stride, pad);
  }
};

struct MultiheadAttention {
  LoraLinear wq, wk, wv, wo;
  int heads = 1, d_model = 0;
  MultiheadAttention() = default;
  MultiheadAttention(ParamStore& ps, const std::string& prefix, int d_model,
                     int heads, Rng& rng);
  Tensor forward(const Tensor& x_q, const Tensor& x_kv,
                 const AttentionMask& mask) const;
  void attach_lora(ParamStore& ps, const std::string& prefix, int r,
                   double alpha, Rng& rng);
};

// Pre-LN block: self-attention (optional mask) followed by a GELU MLP.
struct TransformerBlock {
  LayerNormLayer ln1, ln2;
  MultiheadAttention attn;
  LoraLinear fc1, fc2;
  TransformerBlock() = default;
  TransformerBlock(ParamStore& ps, const std::string& prefix, int d_model,
                   int heads, int mlp_ratio, Rng& rng);
  Tensor forward(const Tensor& x, const AttentionMask& mask) const;
  void attach_lora(ParamStore& ps, const std::string& prefix, int r,
                   double alpha, Rng& rng);
};

// Pre-LN cross-attention block: queries from x, keys/values from ctx.
struct CrossAttentionBlock {
  LayerNormLayer ln_q, ln_kv, ln2;
  MultiheadAttention attn;
  LoraLinear fc1, fc2;
  CrossAttentionBlock() = default;
  CrossAttentionBlock(ParamStore& ps, const std::string& prefix, int d_model,
                      int heads, int mlp_ratio, Rng& rng);
  Tensor forward(const Tensor& x, const Tensor& ctx) const;
};

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW) when nonzero
};

class Adam {
 public:
  Adam(ParamStore& store, AdamConfig cfg);
  void step();
  int64_t step_count() const { return t_; }

  // Checkpoint access: moments are stored per parameter, aligned with the
  // store's order.
  std::vector<std::vector<double>>& m() { return m_; }
  std::vector<std::vector<double>>& v() { return v_; }
  void set_step_count(int64_t t) { t_ = t; }
  AdamConfig& config() { return cfg_; }

 private:
  ParamStore& store_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  int64_t t_ = 0;
};

}  // namespace garfont::nn
