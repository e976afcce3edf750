#include "garfont/argen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>

#include "garfont/common.hpp"

namespace garfont::argen {

void ArgenConfig::validate() const {
  if (d_model % 4 != 0)
    throw ConfigError("argen: d_model must be divisible by 4");
  if (d_model % heads != 0)
    throw ConfigError("argen: d_model must be divisible by heads");
  if (n_refs != 2 && n_refs != 4 && n_refs != 8)
    throw ConfigError("argen: n_refs must be one of {2,4,8}");
  if (lambda_ce < 0 || lambda_pixel < 0)
    throw ValidationError("argen: loss weights must be non-negative");
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

ArgenModel::ArgenModel(const ArgenConfig& cfg, const gtok::GtokConfig& tok_cfg,
                       uint64_t init_seed)
    : cfg_(cfg), n_tokens_(tok_cfg.n_tokens()),
      codebook_size_(tok_cfg.codebook_size) {
  cfg.validate();
  const int grid = tok_cfg.resolution / 8;
  if (cfg.content_tokens != grid * grid || cfg.style_tokens != grid * grid)
    throw ConfigError("argen: token counts must equal (resolution/8)^2");
  Rng rng(init_seed);
  const int d = cfg.d_model;
  const int ec = cfg.content_channels;
  const int sc = cfg.style_channels;

  cont_in_ = nn::Conv2dLayer(params_, "cenc.in", 1, ec, 3, 1, 1, rng);
  cont_r1_ = nn::Conv2dLayer(params_, "cenc.r1", ec, ec, 3, 1, 1, rng);
  cont_r2_ = nn::Conv2dLayer(params_, "cenc.r2", ec, ec, 3, 1, 1, rng);
  cont_d1_ = nn::Conv2dLayer(params_, "cenc.d1", ec, 2 * ec, 3, 2, 1, rng);
  cont_d2_ = nn::Conv2dLayer(params_, "cenc.d2", 2 * ec, 4 * ec, 3, 2, 1, rng);
  cont_d3_ = nn::Conv2dLayer(params_, "cenc.d3", 4 * ec, 4 * ec, 3, 2, 1, rng);
  cont_proj_ = nn::Conv2dLayer(params_, "cenc.proj", 4 * ec, d, 1, 1, 0, rng);
  cont_ln_ = nn::LayerNormLayer(params_, "cenc.ln", d);

  sty_in_ = nn::Conv2dLayer(params_, "senc.in", 1, sc, 3, 2, 1, rng);
  sty_d1_ = nn::Conv2dLayer(params_, "senc.d1", sc, 2 * sc, 3, 2, 1, rng);
  sty_d2_ = nn::Conv2dLayer(params_, "senc.d2", 2 * sc, 4 * sc, 3, 2, 1, rng);
  sty_d3_ = nn::Conv2dLayer(params_, "senc.d3", 4 * sc, 4 * sc, 3, 1, 1, rng);
  sty_proj_ = nn::Conv2dLayer(params_, "senc.proj", 4 * sc, d, 1, 1, 0, rng);
  sty_ln_ = nn::LayerNormLayer(params_, "senc.ln", d);

  for (int i = 0; i < cfg.aggregator_layers; ++i)
    agg_.emplace_back(params_, "agg.b" + std::to_string(i), d, cfg.heads, 2,
                      rng);
  fc_proj_ = nn::LoraLinear(params_, "agg.fc_proj", d, d, rng);

  tok_embed_ = params_.create("dec.tok_embed", {codebook_size_, d}, 0.02, rng);
  pos_embed_ = params_.create("dec.pos_embed", {cond_len() + n_tokens_, d},
                              0.02, rng);
  for (int i = 0; i < cfg.layers; ++i)
    blocks_.emplace_back(params_, "dec.blk" + std::to_string(i), d, cfg.heads,
                         cfg.mlp_ratio, rng);
  ln_f_ = nn::LayerNormLayer(params_, "dec.ln_f", d);
  head_ = nn::LoraLinear(params_, "dec.head", d, codebook_size_, rng);
}

void ArgenModel::attach_lora(Rng& rng) {
  if (lora_attached_) throw ConfigError("argen: LoRA already attached");
  for (size_t i = 0; i < blocks_.size(); ++i)
    blocks_[i].attach_lora(params_, "dec.blk" + std::to_string(i),
                           cfg_.lora_rank, cfg_.lora_alpha, rng);
  lora_attached_ = true;
}

namespace {

Tensor grid_tokens(const Tensor& grid_chw, const nn::PositionalEmbedding2D& pos) {
  const int d = grid_chw.shape()[0];
  const int n = grid_chw.shape()[1] * grid_chw.shape()[2];
  Tensor t = transpose(reshape(grid_chw, {d, n}));
  return add(t, pos.values);
}

const nn::PositionalEmbedding2D& pos_cache(int grid, int d) {
  thread_local std::vector<nn::PositionalEmbedding2D> cache;
  for (auto& pe : cache)
    if (pe.h == grid && pe.d == d) return pe;
  cache.push_back(nn::sinusoidal_pos_2d(grid, grid, d));
  return cache.back();
}

}  // namespace

Tensor ArgenModel::encode_content(const Tensor& image_chw) const {
  Tensor h = gelu(cont_in_.forward(image_chw));
  h = add(h, cont_r2_.forward(gelu(cont_r1_.forward(h))));
  h = gelu(cont_d1_.forward(h));
  h = gelu(cont_d2_.forward(h));
  h = gelu(cont_d3_.forward(h));
  Tensor grid = cont_proj_.forward(h);
  return cont_ln_.forward(
      grid_tokens(grid, pos_cache(grid.shape()[1], cfg_.d_model)));
}

std::vector<Tensor> ArgenModel::encode_style(
    const std::vector<Tensor>& images) const {
  if (images.empty())
    throw ValidationError("encode_style: empty reference list");
  std::vector<Tensor> out;
  out.reserve(images.size());
  for (const auto& img : images) {
    Tensor h = gelu(sty_in_.forward(img));
    h = gelu(sty_d1_.forward(h));
    h = gelu(sty_d2_.forward(h));
    h = gelu(sty_d3_.forward(h));
    Tensor grid = sty_proj_.forward(h);
    out.push_back(sty_ln_.forward(
        grid_tokens(grid, pos_cache(grid.shape()[1], cfg_.d_model))));
  }
  return out;
}

Tensor ArgenModel::aggregate(const Tensor& content_feat,
                             const std::vector<Tensor>& style_feats) const {
  if (style_feats.empty())
    throw ValidationError("aggregate: empty style feature list");
  Tensor ctx = concat_rows(style_feats);
  Tensor x = content_feat;
  for (const auto& blk : agg_) x = blk.forward(x, ctx);
  return concat_rows({x, fc_proj_.forward(content_feat)});
}

Tensor ArgenModel::decode_hidden(const Tensor& seq) const {
  const int len = seq.shape()[0];
  Tensor x = add(seq, slice_rows(pos_embed_, 0, len));
  const auto mask = nn::AttentionMask::prefix_causal(len, cond_len());
  for (const auto& blk : blocks_) x = blk.forward(x, mask);
  return ln_f_.forward(x);
}

Tensor ArgenModel::forward_teacher(const Tensor& cond,
                                   const std::vector<int>& targets) const {
  if (static_cast<int>(targets.size()) != n_tokens_)
    throw ValidationError("forward_teacher: expected full target sequence");
  if (cond.shape()[0] != cond_len())
    throw ValidationError("forward_teacher: condition length mismatch");
  std::vector<int> shifted(targets.begin(), targets.end() - 1);
  Tensor seq = shifted.empty()
                   ? cond
                   : concat_rows({cond, gather_rows(tok_embed_, shifted)});
  Tensor h = decode_hidden(seq);
  // position M-1+t predicts token t
  Tensor rows = slice_rows(h, cond_len() - 1, cond_len() - 1 + n_tokens_);
  return head_.forward(rows);
}

Tensor ArgenModel::ar_forward(const Tensor& cond,
                              const std::vector<int>& prefix) const {
  if (static_cast<int>(prefix.size()) >= n_tokens_)
    throw ValidationError("ar_forward: prefix length " +
                          std::to_string(prefix.size()) +
                          " must be < " + std::to_string(n_tokens_));
  for (int t : prefix)
    if (t < 0 || t >= codebook_size_)
      throw ValidationError("ar_forward: prefix token out of range");
  Tensor seq = prefix.empty()
                   ? cond
                   : concat_rows({cond, gather_rows(tok_embed_, prefix)});
  Tensor h = decode_hidden(seq);
  const int last = seq.shape()[0];
  return head_.forward(slice_rows(h, last - 1, last));
}

GenerateResult ArgenModel::sample_tokens(const Tensor& cond, double temperature,
                                         Rng& rng) const {
  NoGradGuard ng;
  GenerateResult res;
  std::vector<double> all_logits(static_cast<size_t>(n_tokens_) *
                                 codebook_size_);
  for (int t = 0; t < n_tokens_; ++t) {
    Tensor row = ar_forward(cond, res.indices);
    std::copy(row.data().begin(), row.data().end(),
              all_logits.begin() + static_cast<size_t>(t) * codebook_size_);
    int pick = 0;
    if (temperature <= 0) {
      for (int k = 1; k < codebook_size_; ++k)
        if (row.data()[k] > row.data()[pick]) pick = k;
    } else {
      Tensor scaled = scale(row, 1.0 / temperature);
      Tensor p = softmax_rows(scaled);
      const double u = rng.uniform();
      double acc = 0;
      pick = codebook_size_ - 1;
      for (int k = 0; k < codebook_size_; ++k) {
        acc += p.data()[k];
        if (u < acc) {
          pick = k;
          break;
        }
      }
    }
    res.indices.push_back(pick);
  }
  res.logits = Tensor::from_data({n_tokens_, codebook_size_},
                                 std::move(all_logits));
  return res;
}

// ---------------------------------------------------------------------------
// decoding and losses
// ---------------------------------------------------------------------------

Tensor soft_decode(const Tensor& logits, const Tensor& codebook) {
  if (logits.shape().ndim() != 2 || logits.shape()[1] != codebook.shape()[0])
    throw ValidationError("soft_decode: logits K " + logits.shape().str() +
                          " does not match codebook " + codebook.shape().str());
  return matmul(softmax_rows(logits), codebook);
}

Tensor generator_loss(const Tensor& logits, const std::vector<int>& targets,
                      const Tensor& soft_recon, const Tensor& target_image,
                      double lambda_ce, double lambda_pixel) {
  if (lambda_ce < 0 || lambda_pixel < 0)
    throw ValidationError("generator_loss: negative weight");
  Tensor loss = scale(cross_entropy_mean(logits, targets), lambda_ce);
  if (lambda_pixel > 0) {
    if (!soft_recon.defined())
      throw ValidationError("generator_loss: pixel term requires soft recon");
    loss = add(loss, scale(l1_mean(soft_recon, target_image), lambda_pixel));
  }
  return loss;
}

GenerateResult generate(const ArgenModel& model, const gtok::GtokModel& tok,
                        const GlyphImage& content,
                        const std::vector<GlyphImage>& styles, DecodeMode mode,
                        double temperature, uint64_t seed) {
  if (styles.empty()) throw ValidationError("generate: empty style list");
  if (content.style_id != 0 && content.style_id != -1)
    std::cerr << "[garfont] warning: content glyph uses style "
              << content.style_id << " instead of the source style 0\n";
  NoGradGuard ng;
  Tensor f_c = model.encode_content(image_to_tensor(content));
  std::vector<Tensor> style_in;
  style_in.reserve(styles.size());
  for (const auto& s : styles) style_in.push_back(image_to_tensor(s));
  Tensor cond = model.aggregate(f_c, model.encode_style(style_in));
  Rng rng(seed);
  GenerateResult res = model.sample_tokens(cond, temperature, rng);
  Tensor tokens = mode == DecodeMode::Hard
                      ? gather_rows(tok.codebook(), res.indices)
                      : soft_decode(res.logits, tok.codebook());
  res.image = tensor_to_image(tok.decode(tokens), content.char_id,
                              styles.front().style_id);
  return res;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

std::vector<std::vector<int>> cache_token_targets(
    const gtok::GtokModel& tok, const glyphforge::Dataset& data) {
  const int n_styles = data.manifest.n_styles();
  const int n_chars = data.manifest.n_chars();
  std::vector<std::vector<int>> cache(static_cast<size_t>(n_styles) * n_chars);
  for (int s = 0; s < n_styles; ++s)
    for (int c = 0; c < n_chars; ++c)
      cache[static_cast<size_t>(s) * n_chars + c] =
          tok.encode_indices(data.glyph(s, c));
  return cache;
}

void append_gen_csv(const std::string& path,
                    const std::vector<GenTrainLogRow>& rows,
                    bool write_header) {
  std::ofstream f(path, write_header ? std::ios::trunc : std::ios::app);
  if (!f) throw DiagnosticError("cannot write loss csv: " + path);
  if (write_header) f << "step,total,ce,pixel\n";
  for (const auto& r : rows)
    f << r.step << ',' << r.total << ',' << r.ce << ',' << r.pixel << "\n";
}

GenTrainResult train_generator(ArgenModel& model, nn::Adam& opt,
                               const gtok::GtokModel& tok,
                               const glyphforge::Dataset& data, Rng& batch_rng,
                               int start_step,
                               const std::string& loss_csv_path) {
  const ArgenConfig& cfg = model.config();
  for (const auto& [name, p] : tok.params().items())
    if (p.requires_grad())
      throw ValidationError(
          "train_generator: tokenizer must be frozen (found trainable " + name +
          ")");
  auto train_pairs = data.pairs(glyphforge::Split::Train);
  if (train_pairs.empty())
    throw ValidationError("train_generator: dataset has no train split");

  auto targets = cache_token_targets(tok, data);
  const int n_chars = data.manifest.n_chars();

  GenTrainResult result;
  std::vector<double> recent_ce;
  int nonfinite_run = 0;
  for (int step = start_step; step < cfg.steps; ++step) {
    model.params().zero_grad();
    Tensor total_ce, total_pix;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto& pr = train_pairs[batch_rng.uniform_int(train_pairs.size())];
      const int style = pr.first, ch = pr.second;
      // content glyph in the fixed source style
      Tensor content = image_to_tensor(data.glyph(0, ch));
      auto ref_chars = glyphforge::sample_style_refs(data.manifest, style, ch,
                                                     cfg.n_refs, batch_rng);
      std::vector<Tensor> refs;
      refs.reserve(ref_chars.size());
      for (int rc : ref_chars)
        refs.push_back(image_to_tensor(data.glyph(style, rc)));
      Tensor cond = model.aggregate(model.encode_content(content),
                                    model.encode_style(refs));
      const auto& tgt = targets[static_cast<size_t>(style) * n_chars + ch];
      Tensor logits = model.forward_teacher(cond, tgt);
      Tensor ce = cross_entropy_mean(logits, tgt);
      total_ce = total_ce.defined() ? add(total_ce, ce) : ce;
      if (cfg.lambda_pixel > 0) {
        Tensor recon = tok.decode(soft_decode(logits, tok.codebook()));
        Tensor pix =
            l1_mean(recon, image_to_tensor(data.glyph(style, ch)));
        total_pix = total_pix.defined() ? add(total_pix, pix) : pix;
      }
    }
    const double inv_b = 1.0 / cfg.batch;
    Tensor loss = scale(total_ce, inv_b * cfg.lambda_ce);
    if (total_pix.defined())
      loss = add(loss, scale(total_pix, inv_b * cfg.lambda_pixel));

    const double lv = loss.item();
    if (!std::isfinite(lv)) {
      if (++nonfinite_run >= 10)
        throw DiagnosticError("train_generator: non-finite loss at step " +
                              std::to_string(step));
    } else {
      nonfinite_run = 0;
      loss.backward();
      opt.step();
    }
    GenTrainLogRow row;
    row.step = step;
    row.total = lv;
    row.ce = total_ce.item() * inv_b;
    row.pixel = total_pix.defined() ? total_pix.item() * inv_b : 0.0;
    recent_ce.push_back(row.ce);
    result.log.push_back(row);
  }
  const int tail = std::min<int>(20, static_cast<int>(recent_ce.size()));
  if (tail > 0) {
    double s = 0;
    for (int i = 0; i < tail; ++i) s += recent_ce[recent_ce.size() - 1 - i];
    result.final_ce = s / tail;
  }
  if (!loss_csv_path.empty())
    append_gen_csv(loss_csv_path, result.log, start_step == 0);
  return result;
}

}  // namespace garfont::argen
