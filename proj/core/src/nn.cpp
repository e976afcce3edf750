#include "garfont/nn.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstring>

#include "garfont/common.hpp"

namespace garfont::nn {

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

Tensor ParamStore::create(const std::string& name, const Shape& shape,
                          double init_std, Rng& rng) {
  if (find(name)) throw ConfigError("duplicate parameter name: " + name);
  std::vector<double> v(shape.numel());
  if (init_std > 0)
    for (auto& x : v) x = rng.truncated_normal(init_std);
  Tensor t = Tensor::from_data(shape, std::move(v), /*requires_grad=*/true);
  items_.emplace_back(name, t);
  return t;
}

Tensor ParamStore::create_const(const std::string& name, const Shape& shape,
                                double v) {
  if (find(name)) throw ConfigError("duplicate parameter name: " + name);
  Tensor t = Tensor::full(shape, v, /*requires_grad=*/true);
  items_.emplace_back(name, t);
  return t;
}

Tensor* ParamStore::find(const std::string& name) {
  for (auto& [n, t] : items_)
    if (n == name) return &t;
  return nullptr;
}

const Tensor* ParamStore::find(const std::string& name) const {
  for (const auto& [n, t] : items_)
    if (n == name) return &t;
  return nullptr;
}

void ParamStore::zero_grad() {
  for (auto& [n, t] : items_) t.zero_grad();
}

int64_t ParamStore::param_count() const {
  int64_t c = 0;
  for (const auto& [n, t] : items_) c += t.numel();
  return c;
}

int ParamStore::set_trainable(const std::string& prefix, bool trainable) {
  return set_trainable_if(
      [&](const std::string& n) { return n.rfind(prefix, 0) == 0; }, trainable);
}

int ParamStore::set_trainable_if(
    const std::function<bool(const std::string&)>& pred, bool trainable) {
  int count = 0;
  for (auto& [n, t] : items_) {
    if (pred(n)) {
      t.set_requires_grad(trainable);
      ++count;
    }
  }
  return count;
}

std::string ParamStore::hash_params(const std::string& prefix) const {
  return hash_params_if(
      [&](const std::string& n) { return n.rfind(prefix, 0) == 0; });
}

std::string ParamStore::hash_params_if(
    const std::function<bool(const std::string&)>& keep) const {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  for (const auto& [n, t] : items_) {
    if (!keep(n)) continue;
    EVP_DigestUpdate(ctx, n.data(), n.size());
    EVP_DigestUpdate(ctx, t.data().data(), t.data().size() * sizeof(double));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

void copy_params(const ParamStore& src, ParamStore& dst) {
  if (src.items().size() != dst.items().size())
    throw ValidationError("copy_params: store layouts differ");
  for (size_t i = 0; i < src.items().size(); ++i) {
    const auto& [sn, st] = src.items()[i];
    auto& [dn, dt] = dst.items()[i];
    if (sn != dn || !(st.shape() == dt.shape()))
      throw ValidationError("copy_params: mismatch at " + sn + " vs " + dn);
    dt.data() = st.data();
  }
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

AttentionMask AttentionMask::full(int n) {
  AttentionMask m;
  m.n = n;
  m.kind = Kind::Full;
  m.allow.assign(static_cast<size_t>(n) * n, 1);
  return m;
}

AttentionMask AttentionMask::causal(int n) {
  AttentionMask m;
  m.n = n;
  m.kind = Kind::Causal;
  m.allow.assign(static_cast<size_t>(n) * n, 0);
  for (int q = 0; q < n; ++q)
    for (int k = 0; k <= q; ++k) m.allow[static_cast<size_t>(q) * n + k] = 1;
  return m;
}

AttentionMask AttentionMask::prefix_causal(int n, int prefix) {
  if (prefix < 0 || prefix > n)
    throw ValidationError("prefix_causal: prefix out of range");
  AttentionMask m;
  m.n = n;
  m.kind = Kind::PrefixCausal;
  m.allow.assign(static_cast<size_t>(n) * n, 0);
  for (int q = 0; q < n; ++q)
    for (int k = 0; k < n; ++k)
      if (k < prefix || k <= q) m.allow[static_cast<size_t>(q) * n + k] = 1;
  return m;
}

namespace {

// Additive mask shared per (mask, n) call; -1e30 underflows to exact zero
// weight after the softmax's max-subtraction.
Tensor additive_mask(const AttentionMask& mask) {
  std::vector<double> v(static_cast<size_t>(mask.n) * mask.n, 0.0);
  for (size_t i = 0; i < v.size(); ++i)
    if (!mask.allow[i]) v[i] = -1e30;
  return Tensor::from_data({mask.n, mask.n}, std::move(v));
}

}  // namespace

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 const AttentionMask& mask) {
  if (q.shape().ndim() != 2 || k.shape().ndim() != 2 || v.shape().ndim() != 2)
    throw ValidationError("attention: q/k/v must be 2D [seq, dim]");
  const int n = q.shape()[0];
  if (k.shape()[0] != n || v.shape()[0] != n)
    throw ValidationError("attention: q/k/v sequence lengths differ");
  if (q.shape()[1] != k.shape()[1])
    throw ValidationError("attention: q/k feature dims differ");
  if (mask.n != n) throw ValidationError("attention: mask length mismatch");
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.shape()[1]));
  Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
  if (mask.kind != AttentionMask::Kind::Full)
    scores = add(scores, additive_mask(mask));
  return matmul(softmax_rows(scores), v);
}

PositionalEmbedding2D sinusoidal_pos_2d(int h, int w, int d) {
  if (d % 4 != 0)
    throw ConfigError("sinusoidal_pos_2d: d must be divisible by 4, got " +
                      std::to_string(d));
  if (h <= 0 || w <= 0) throw ConfigError("sinusoidal_pos_2d: empty grid");
  const int half = d / 2;
  const int pairs = half / 2;
  std::vector<double> out(static_cast<size_t>(h) * w * d);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double* row = out.data() + (static_cast<size_t>(y) * w + x) * d;
      for (int i = 0; i < pairs; ++i) {
        const double freq = std::pow(10000.0, -2.0 * i / half);
        row[2 * i] = std::sin(y * freq);
        row[2 * i + 1] = std::cos(y * freq);
        row[half + 2 * i] = std::sin(x * freq);
        row[half + 2 * i + 1] = std::cos(x * freq);
      }
    }
  PositionalEmbedding2D pe;
  pe.h = h;
  pe.w = w;
  pe.d = d;
  pe.values = Tensor::from_data({h * w, d}, std::move(out));
  return pe;
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

LoraLinear::LoraLinear(ParamStore& ps, const std::string& prefix, int in,
                       int out, Rng& rng) {
  w = ps.create(prefix + ".w", {in, out}, 0.02, rng);
  b = ps.create_const(prefix + ".b", {out}, 0.0);
}

void LoraLinear::attach_lora(ParamStore& ps, const std::string& prefix, int r,
                             double alpha, Rng& rng) {
  if (r <= 0) throw ConfigError("lora rank must be positive");
  const int in = w.shape()[0], out = w.shape()[1];
  lora_down = ps.create(prefix + ".lora_down", {in, r}, 0.02, rng);
  lora_up = ps.create_const(prefix + ".lora_up", {r, out}, 0.0);
  rank = r;
  lora_scale = alpha / r;
}

Tensor LoraLinear::forward(const Tensor& x) const {
  Tensor y = add_rowvec(matmul(x, w), b);
  if (rank > 0)
    y = add(y, scale(matmul(matmul(x, lora_down), lora_up), lora_scale));
  return y;
}

LayerNormLayer::LayerNormLayer(ParamStore& ps, const std::string& prefix,
                               int dim) {
  gain = ps.create_const(prefix + ".g", {dim}, 1.0);
  bias = ps.create_const(prefix + ".b", {dim}, 0.0);
}

Conv2dLayer::Conv2dLayer(ParamStore& ps, const std::string& prefix, int ci,
                         int co, int k, int stride_, int pad_, Rng& rng)
    : stride(stride_), pad(pad_) {
  // fan-in scaled: the global 0.02 init starves deep conv stacks
  const double std = std::sqrt(2.0 / (static_cast<double>(ci) * k * k));
  w = ps.create(prefix + ".w", {co, ci, k, k}, std, rng);
  b = ps.create_const(prefix + ".b", {co}, 0.0);
}

ConvT2dLayer::ConvT2dLayer(ParamStore& ps, const std::string& prefix, int ci,
                           int co, int k, int stride_, int pad_, Rng& rng)
    : stride(stride_), pad(pad_) {
  const double std = std::sqrt(2.0 / (static_cast<double>(ci) * k * k));
  w = ps.create(prefix + ".w", {ci, co, k, k}, std, rng);
  b = ps.create_const(prefix + ".b", {co}, 0.0);
}

MultiheadAttention::MultiheadAttention(ParamStore& ps,
                                       const std::string& prefix, int d_model_,
                                       int heads_, Rng& rng)
    : heads(heads_), d_model(d_model_) {
  if (d_model % heads != 0)
    throw ConfigError("d_model must be divisible by heads");
  wq = LoraLinear(ps, prefix + ".wq", d_model, d_model, rng);
  wk = LoraLinear(ps, prefix + ".wk", d_model, d_model, rng);
  wv = LoraLinear(ps, prefix + ".wv", d_model, d_model, rng);
  wo = LoraLinear(ps, prefix + ".wo", d_model, d_model, rng);
}

void MultiheadAttention::attach_lora(ParamStore& ps, const std::string& prefix,
                                     int r, double alpha, Rng& rng) {
  wq.attach_lora(ps, prefix + ".wq", r, alpha, rng);
  wk.attach_lora(ps, prefix + ".wk", r, alpha, rng);
  wv.attach_lora(ps, prefix + ".wv", r, alpha, rng);
  wo.attach_lora(ps, prefix + ".wo", r, alpha, rng);
}

Tensor MultiheadAttention::forward(const Tensor& x_q, const Tensor& x_kv,
                                   const AttentionMask& mask) const {
  const int nq = x_q.shape()[0];
  const int nk = x_kv.shape()[0];
  const int dh = d_model / heads;
  Tensor q = wq.forward(x_q);
  Tensor k = wk.forward(x_kv);
  Tensor v = wv.forward(x_kv);
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor mask_add;
  const bool needs_mask = mask.kind != AttentionMask::Kind::Full;
  if (needs_mask) {
    if (mask.n != nq || nq != nk)
      throw ValidationError("masked attention requires square mask");
    mask_add = additive_mask(mask);
  }
  std::vector<Tensor> head_out;
  head_out.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
    Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
    Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
    if (needs_mask) scores = add(scores, mask_add);
    head_out.push_back(matmul(softmax_rows(scores), vh));
  }
  return wo.forward(concat_cols(head_out));
}

TransformerBlock::TransformerBlock(ParamStore& ps, const std::string& prefix,
                                   int d_model, int heads, int mlp_ratio,
                                   Rng& rng) {
  ln1 = LayerNormLayer(ps, prefix + ".ln1", d_model);
  attn = MultiheadAttention(ps, prefix + ".attn", d_model, heads, rng);
  ln2 = LayerNormLayer(ps, prefix + ".ln2", d_model);
  fc1 = LoraLinear(ps, prefix + ".fc1", d_model, d_model * mlp_ratio, rng);
  fc2 = LoraLinear(ps, prefix + ".fc2", d_model * mlp_ratio, d_model, rng);
}

void TransformerBlock::attach_lora(ParamStore& ps, const std::string& prefix,
                                   int r, double alpha, Rng& rng) {
  attn.attach_lora(ps, prefix + ".attn", r, alpha, rng);
  fc1.attach_lora(ps, prefix + ".fc1", r, alpha, rng);
  fc2.attach_lora(ps, prefix + ".fc2", r, alpha, rng);
}

Tensor TransformerBlock::forward(const Tensor& x,
                                 const AttentionMask& mask) const {
  Tensor h = ln1.forward(x);
  Tensor y = add(x, attn.forward(h, h, mask));
  return add(y, fc2.forward(gelu(fc1.forward(ln2.forward(y)))));
}

CrossAttentionBlock::CrossAttentionBlock(ParamStore& ps,
                                         const std::string& prefix, int d_model,
                                         int heads, int mlp_ratio, Rng& rng) {
  ln_q = LayerNormLayer(ps, prefix + ".ln_q", d_model);
  ln_kv = LayerNormLayer(ps, prefix + ".ln_kv", d_model);
  attn = MultiheadAttention(ps, prefix + ".attn", d_model, heads, rng);
  ln2 = LayerNormLayer(ps, prefix + ".ln2", d_model);
  fc1 = LoraLinear(ps, prefix + ".fc1", d_model, d_model * mlp_ratio, rng);
  fc2 = LoraLinear(ps, prefix + ".fc2", d_model * mlp_ratio, d_model, rng);
}

Tensor CrossAttentionBlock::forward(const Tensor& x, const Tensor& ctx) const {
  // Cross attention over a context of arbitrary length: no mask.
  Tensor q = ln_q.forward(x);
  Tensor kv = ln_kv.forward(ctx);
  const int dh = attn.d_model / attn.heads;
  Tensor qp = attn.wq.forward(q);
  Tensor kp = attn.wk.forward(kv);
  Tensor vp = attn.wv.forward(kv);
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> head_out;
  head_out.reserve(attn.heads);
  for (int h = 0; h < attn.heads; ++h) {
    Tensor qh = slice_cols(qp, h * dh, (h + 1) * dh);
    Tensor kh = slice_cols(kp, h * dh, (h + 1) * dh);
    Tensor vh = slice_cols(vp, h * dh, (h + 1) * dh);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
    head_out.push_back(matmul(softmax_rows(scores), vh));
  }
  Tensor y = add(x, attn.wo.forward(concat_cols(head_out)));
  return add(y, fc2.forward(gelu(fc1.forward(ln2.forward(y)))));
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

Adam::Adam(ParamStore& store, AdamConfig cfg) : store_(store), cfg_(cfg) {
  m_.reserve(store.items().size());
  v_.reserve(store.items().size());
  for (auto& [n, t] : store.items()) {
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

void Adam::step() {
  // Parameters registered after construction (e.g. LoRA attach) get slots on
  // first use.
  while (m_.size() < store_.items().size()) {
    const auto& t = store_.items()[m_.size()].second;
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < store_.items().size(); ++i) {
    Tensor& p = store_.items()[i].second;
    if (!p.requires_grad() || !p.has_grad()) continue;
    auto& g = p.grad();
    auto& val = p.data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t j = 0; j < val.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      double upd = cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      if (cfg_.weight_decay > 0) upd += cfg_.lr * cfg_.weight_decay * val[j];
      val[j] -= upd;
    }
  }
}

}  // namespace garfont::nn
