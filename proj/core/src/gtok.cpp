#include "garfont/gtok.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "garfont/common.hpp"

namespace garfont::gtok {

void GtokConfig::validate() const {
  if (resolution != 32 && resolution != 64)
    throw ConfigError("gtok: resolution must be 32 or 64");
  if (codebook_size < 2) throw ConfigError("gtok: codebook needs >= 2 entries");
  if (code_dim % 4 != 0)
    throw ConfigError("gtok: code_dim must be divisible by 4 (2D positions)");
  if (vit_depth < 0) throw ConfigError("gtok: vit_depth must be >= 0");
  if (lambda_rec < 0 || lambda_per < 0 || lambda_vq < 0 || beta_commit < 0 ||
      entropy_weight < 0)
    throw ValidationError("gtok: loss weights must be non-negative");
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

GtokModel::GtokModel(const GtokConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
  cfg.validate();
  Rng rng(init_seed);
  const int c = cfg.base_channels;
  const int d = cfg.code_dim;
  const int grid = cfg.token_grid();

  // encoder: stages at res, res/2, res/4, res/8, one residual block each
  enc_in_ = nn::Conv2dLayer(params_, "enc.in", 1, c, 3, 1, 1, rng);
  const int widths[4] = {c, 2 * c, 4 * c, 6 * c};
  for (int s = 0; s < 4; ++s) {
    const std::string p = "enc.res" + std::to_string(s);
    enc_res_.emplace_back(params_, p + ".c1", widths[s], widths[s], 3, 1, 1, rng);
    enc_res_.emplace_back(params_, p + ".c2", widths[s], widths[s], 3, 1, 1, rng);
    if (s < 3)
      enc_down_.emplace_back(params_, "enc.down" + std::to_string(s), widths[s],
                             widths[s + 1], 3, 2, 1, rng);
  }
  enc_proj_ = nn::Conv2dLayer(params_, "enc.proj", widths[3], d, 1, 1, 0, rng);
  for (int i = 0; i < cfg.vit_depth; ++i)
    enc_vit_.emplace_back(params_, "enc.vit" + std::to_string(i), d, cfg.heads,
                          cfg.mlp_ratio, rng);
  enc_ln_ = nn::LayerNormLayer(params_, "enc.ln_out", d);

  for (int i = 0; i < cfg.vit_depth; ++i)
    dec_vit_.emplace_back(params_, "dec.vit" + std::to_string(i), d, cfg.heads,
                          cfg.mlp_ratio, rng);
  dec_ln_ = nn::LayerNormLayer(params_, "dec.ln_in", d);
  dec_unproj_ = nn::Conv2dLayer(params_, "dec.unproj", d, widths[3], 1, 1, 0, rng);
  for (int s = 3; s >= 1; --s) {
    const std::string p = "dec.res" + std::to_string(s);
    dec_res_.emplace_back(params_, p + ".c1", widths[s], widths[s], 3, 1, 1, rng);
    dec_res_.emplace_back(params_, p + ".c2", widths[s], widths[s], 3, 1, 1, rng);
    dec_up_.emplace_back(params_, "dec.up" + std::to_string(s), widths[s],
                         widths[s - 1], 4, 2, 1, rng);
  }
  const std::string p0 = "dec.res0";
  dec_res_.emplace_back(params_, p0 + ".c1", widths[0], widths[0], 3, 1, 1, rng);
  dec_res_.emplace_back(params_, p0 + ".c2", widths[0], widths[0], 3, 1, 1, rng);
  dec_out_ = nn::Conv2dLayer(params_, "dec.out", widths[0], 1, 3, 1, 1, rng);
  // start at the background prior so early steps work on structure rather
  // than on fitting the white sea
  dec_out_.b.data()[0] = 0.8;

  codebook_ = params_.create("codebook", {cfg.codebook_size, d}, 0.02, rng);
  pos_ = nn::sinusoidal_pos_2d(grid, grid, d);
}

namespace {

Tensor res_block(const Tensor& x, const nn::Conv2dLayer& c1,
                 const nn::Conv2dLayer& c2) {
  return add(x, c2.forward(gelu(c1.forward(x))));
}

}  // namespace

Tensor GtokModel::run_conv_encoder(const Tensor& image_chw) const {
  Tensor h = gelu(enc_in_.forward(image_chw));
  for (int s = 0; s < 4; ++s) {
    h = res_block(h, enc_res_[2 * s], enc_res_[2 * s + 1]);
    if (s < 3) h = gelu(enc_down_[s].forward(h));
  }
  return enc_proj_.forward(h);  // [d, grid, grid]
}

Tensor GtokModel::encode(const Tensor& image_chw) const {
  if (image_chw.shape().ndim() != 3 || image_chw.shape()[0] != 1 ||
      image_chw.shape()[1] != cfg_.resolution ||
      image_chw.shape()[2] != cfg_.resolution)
    throw ValidationError("gtok.encode: expected [1," +
                          std::to_string(cfg_.resolution) + "," +
                          std::to_string(cfg_.resolution) + "], got " +
                          image_chw.shape().str());
  const int d = cfg_.code_dim;
  const int n = cfg_.n_tokens();
  Tensor grid = run_conv_encoder(image_chw);
  Tensor tokens = transpose(reshape(grid, {d, n}));  // raster order [N, d]
  tokens = add(tokens, pos_.values);
  const auto mask = nn::AttentionMask::full(n);
  for (const auto& blk : enc_vit_) tokens = blk.forward(tokens, mask);
  return enc_ln_.forward(tokens);
}

QuantizeResult GtokModel::quantize(const Tensor& latents) const {
  if (latents.shape().ndim() != 2 || latents.shape()[1] != cfg_.code_dim)
    throw ValidationError("gtok.quantize: latent dim " +
                          latents.shape().str() + " != codebook dim " +
                          std::to_string(cfg_.code_dim));
  const int n = latents.shape()[0];
  const int k = cfg_.codebook_size;
  const int d = cfg_.code_dim;

  std::vector<int> indices(n);
  // exact nearest neighbor, ties broken toward the lowest index
  for (int i = 0; i < n; ++i) {
    const double* z = latents.data().data() + static_cast<size_t>(i) * d;
    double best = 1e300;
    int best_k = 0;
    for (int e = 0; e < k; ++e) {
      const double* cb = codebook_.data().data() + static_cast<size_t>(e) * d;
      double dist = 0;
      for (int c = 0; c < d; ++c) {
        const double diff = z[c] - cb[c];
        dist += diff * diff;
      }
      if (dist < best) {
        best = dist;
        best_k = e;
      }
    }
    indices[i] = best_k;
  }
  return quantize_with_indices(latents, indices);
}

QuantizeResult GtokModel::quantize_with_indices(
    const Tensor& latents, const std::vector<int>& indices) const {
  if (latents.shape().ndim() != 2 || latents.shape()[1] != cfg_.code_dim)
    throw ValidationError("gtok.quantize: latent dim mismatch");
  if (static_cast<int>(indices.size()) != latents.shape()[0])
    throw ValidationError("gtok.quantize: index count mismatch");
  QuantizeResult out;
  out.indices = indices;
  Tensor selected = gather_rows(codebook_, out.indices);
  out.quantized = add(latents, detach(sub(selected, latents)));
  out.embedding_loss = mse_mean(selected, detach(latents));
  out.commitment_loss = mse_mean(latents, detach(selected));

  // soft assignment over squared distances (differentiable usage entropy)
  Tensor z2 = sum_cols(square(latents));                       // [N]
  Tensor e2 = sum_cols(square(codebook_));                     // [K]
  Tensor cross = scale(matmul(latents, transpose(codebook_)), -2.0);
  Tensor d2 = add_colvec(add_rowvec(cross, e2), z2);           // [N,K]
  out.soft_assign = softmax_rows(neg(d2));
  out.entropy_bonus = usage_entropy(out.soft_assign);
  return out;
}

Tensor usage_entropy(const Tensor& soft_assign) {
  Tensor usage = mean_rows(soft_assign);  // [K]
  return neg(sum_all(mul(usage, log_t(add_const(usage, 1e-12)))));
}

Tensor GtokModel::run_conv_decoder(const Tensor& grid) const {
  Tensor h = gelu(dec_unproj_.forward(grid));
  int r = 0;
  for (size_t s = 0; s < dec_up_.size(); ++s) {
    h = res_block(h, dec_res_[r], dec_res_[r + 1]);
    r += 2;
    h = gelu(dec_up_[s].forward(h));
  }
  h = res_block(h, dec_res_[r], dec_res_[r + 1]);
  return clamp01(dec_out_.forward(h));
}

Tensor GtokModel::decode(const Tensor& tokens) const {
  if (tokens.shape().ndim() != 2 || tokens.shape()[0] != cfg_.n_tokens() ||
      tokens.shape()[1] != cfg_.code_dim)
    throw ValidationError("gtok.decode: expected [" +
                          std::to_string(cfg_.n_tokens()) + "," +
                          std::to_string(cfg_.code_dim) + "], got " +
                          tokens.shape().str());
  const int n = cfg_.n_tokens();
  const int d = cfg_.code_dim;
  Tensor t = add(tokens, pos_.values);
  const auto mask = cfg_.causal_decoder ? nn::AttentionMask::causal(n)
                                        : nn::AttentionMask::full(n);
  for (const auto& blk : dec_vit_) t = blk.forward(t, mask);
  t = dec_ln_.forward(t);
  Tensor grid = reshape(transpose(t), {d, cfg_.token_grid(), cfg_.token_grid()});
  return run_conv_decoder(grid);
}

void GtokModel::init_codebook_from_data(const glyphforge::Dataset& data,
                                        int n_images, Rng& rng) {
  NoGradGuard ng;
  auto pairs = data.pairs(glyphforge::Split::Train);
  if (pairs.empty())
    throw ValidationError("init_codebook_from_data: no train glyphs");
  std::vector<std::vector<double>> rows;
  for (int i = 0; i < n_images; ++i) {
    const auto& p = pairs[rng.uniform_int(pairs.size())];
    Tensor z = encode(image_to_tensor(data.glyph(p.first, p.second)));
    const int d = cfg_.code_dim;
    for (int t = 0; t < z.shape()[0]; ++t)
      rows.emplace_back(z.data().begin() + static_cast<size_t>(t) * d,
                        z.data().begin() + static_cast<size_t>(t + 1) * d);
  }
  auto& cb = codebook_.data();
  const int d = cfg_.code_dim;
  for (int k = 0; k < cfg_.codebook_size; ++k) {
    const auto& src = rows[rng.uniform_int(rows.size())];
    for (int c = 0; c < d; ++c)
      cb[static_cast<size_t>(k) * d + c] = src[c] + rng.normal(0, 0.01);
  }
}

std::vector<int> GtokModel::encode_indices(const GlyphImage& img) const {
  NoGradGuard ng;
  return quantize(encode(image_to_tensor(img))).indices;
}

GlyphImage GtokModel::decode_indices(const std::vector<int>& indices) const {
  NoGradGuard ng;
  for (int i : indices)
    if (i < 0 || i >= cfg_.codebook_size)
      throw ValidationError("decode_indices: index out of codebook range");
  Tensor tokens = gather_rows(codebook_, indices);
  return tensor_to_image(decode(tokens));
}

GlyphImage GtokModel::reconstruct(const GlyphImage& img) const {
  NoGradGuard ng;
  Tensor latents = encode(image_to_tensor(img));
  auto q = quantize(latents);
  GlyphImage out = tensor_to_image(decode(q.quantized));
  out.char_id = img.char_id;
  out.style_id = img.style_id;
  return out;
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

Tensor tokenizer_loss(const Tensor& image, const Tensor& recon,
                      const QuantizeResult& vq, const TokenizerLossWeights& w,
                      const PerceptualFn& phi, const Tensor& batch_entropy) {
  if (w.rec < 0 || w.per < 0 || w.vq < 0 || w.beta_commit < 0 || w.entropy < 0)
    throw ValidationError("tokenizer_loss: negative weight");
  if (!(image.shape() == recon.shape()))
    throw ValidationError("tokenizer_loss: image/recon shape mismatch");
  Tensor loss = Tensor::scalar(0.0);
  if (w.rec > 0) loss = add(loss, scale(l1_mean(image, recon), w.rec));
  if (w.per > 0) {
    if (!phi) throw ConfigError("tokenizer_loss: perceptual weight without Phi");
    auto fa = phi(image);
    auto fb = phi(recon);
    Tensor per = Tensor::scalar(0.0);
    for (size_t i = 0; i < fa.size(); ++i)
      per = add(per, mse_mean(fa[i], fb[i]));
    loss = add(loss, scale(per, w.per / static_cast<double>(fa.size())));
  }
  if (w.vq > 0) {
    Tensor vq_term =
        add(vq.embedding_loss, scale(vq.commitment_loss, w.beta_commit));
    const Tensor& ent = batch_entropy.defined() ? batch_entropy
                                                : vq.entropy_bonus;
    if (w.entropy > 0) vq_term = sub(vq_term, scale(ent, w.entropy));
    loss = add(loss, scale(vq_term, w.vq));
  }
  return loss;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

void append_loss_csv(const std::string& path,
                     const std::vector<TrainLogRow>& rows, bool write_header) {
  std::ofstream f(path, write_header ? std::ios::trunc : std::ios::app);
  if (!f) throw DiagnosticError("cannot write loss csv: " + path);
  if (write_header) f << "step,total,rec,per,vq,perplexity\n";
  for (const auto& r : rows) {
    f << r.step << ',' << r.total << ',' << r.rec << ',' << r.per << ','
      << r.vq << ',' << r.perplexity << "\n";
  }
}

TokTrainResult train_tokenizer(GtokModel& model, nn::Adam& opt,
                               const glyphforge::Dataset& data,
                               const PerceptualFn& phi, Rng& batch_rng,
                               int start_step,
                               const std::string& loss_csv_path) {
  const GtokConfig& cfg = model.config();
  auto train_pairs = data.pairs(glyphforge::Split::Train);
  if (train_pairs.empty())
    throw ValidationError("train_tokenizer: dataset has no train split");

  TokenizerLossWeights w;
  w.rec = cfg.lambda_rec;
  w.per = cfg.lambda_per;
  w.vq = cfg.lambda_vq;
  w.beta_commit = cfg.beta_commit;
  w.entropy = cfg.entropy_weight;

  TokTrainResult result;
  const int epoch_steps = std::max<int>(
      1, static_cast<int>(train_pairs.size() / std::max(1, cfg.batch)));
  std::vector<int64_t> usage(cfg.codebook_size, 0);
  int64_t usage_total = 0;
  int nonfinite_run = 0;
  std::vector<double> recent_rec;

  for (int step = start_step; step < cfg.steps; ++step) {
    model.params().zero_grad();
    Tensor total_rec, total_per, total_embed, total_commit;
    std::vector<Tensor> assigns;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto& pr = train_pairs[batch_rng.uniform_int(train_pairs.size())];
      Tensor img = image_to_tensor(data.glyph(pr.first, pr.second));
      Tensor latents = model.encode(img);
      QuantizeResult q = model.quantize(latents);
      Tensor recon = model.decode(q.quantized);

      Tensor rec = l1_mean(img, recon);
      total_rec = total_rec.defined() ? add(total_rec, rec) : rec;
      if (w.per > 0) {
        auto fa = phi(img);
        auto fb = phi(recon);
        Tensor per = Tensor::scalar(0.0);
        for (size_t i = 0; i < fa.size(); ++i)
          per = add(per, scale(mse_mean(fa[i], fb[i]),
                               1.0 / static_cast<double>(fa.size())));
        total_per = total_per.defined() ? add(total_per, per) : per;
      }
      total_embed = total_embed.defined() ? add(total_embed, q.embedding_loss)
                                          : q.embedding_loss;
      total_commit = total_commit.defined()
                         ? add(total_commit, q.commitment_loss)
                         : q.commitment_loss;
      assigns.push_back(q.soft_assign);
      for (int idx : q.indices) ++usage[idx];
      usage_total += static_cast<int64_t>(q.indices.size());
    }
    const double inv_b = 1.0 / cfg.batch;
    Tensor rec_mean = scale(total_rec, inv_b);
    Tensor loss = scale(total_rec, inv_b * w.rec);
    Tensor per_mean;
    if (w.per > 0) {
      per_mean = scale(total_per, inv_b);
      loss = add(loss, scale(total_per, inv_b * w.per));
    }
    // batch code distribution feeds one entropy bonus per step
    Tensor batch_entropy = usage_entropy(concat_rows(assigns));
    Tensor vq_term = add(scale(total_embed, inv_b),
                         scale(total_commit, inv_b * w.beta_commit));
    if (w.entropy > 0)
      vq_term = sub(vq_term, scale(batch_entropy, w.entropy));
    Tensor vq_mean = vq_term;
    loss = add(loss, scale(vq_term, w.vq));

    const double loss_val = loss.item();
    if (!std::isfinite(loss_val)) {
      if (++nonfinite_run >= 10)
        throw DiagnosticError(
            "train_tokenizer: non-finite loss for 10 consecutive steps at step " +
            std::to_string(step));
    } else {
      nonfinite_run = 0;
      loss.backward();
      opt.step();
    }

    TrainLogRow row;
    row.step = step;
    row.total = loss_val;
    row.rec = rec_mean.item();
    row.per = per_mean.defined() ? per_mean.item() : 0.0;
    row.vq = vq_mean.item();
    recent_rec.push_back(row.rec);
    if ((step + 1) % epoch_steps == 0 && usage_total > 0) {
      double ent = 0;
      for (int64_t u : usage)
        if (u > 0) {
          const double p = static_cast<double>(u) / usage_total;
          ent -= p * std::log(p);
        }
      row.perplexity = std::exp(ent);
      result.final_perplexity = row.perplexity;
      std::fill(usage.begin(), usage.end(), 0);
      usage_total = 0;
    }
    result.log.push_back(row);
  }

  // trailing-epoch perplexity when training ends mid-epoch
  if (usage_total > 0) {
    double ent = 0;
    for (int64_t u : usage)
      if (u > 0) {
        const double p = static_cast<double>(u) / usage_total;
        ent -= p * std::log(p);
      }
    result.final_perplexity = std::exp(ent);
  }
  const int tail = std::min<int>(20, static_cast<int>(recent_rec.size()));
  if (tail > 0) {
    double s = 0;
    for (int i = 0; i < tail; ++i)
      s += recent_rec[recent_rec.size() - 1 - i];
    result.final_rec_l1 = s / tail;
  }
  if (!loss_csv_path.empty())
    append_loss_csv(loss_csv_path, result.log, start_step == 0);
  return result;
}

}  // namespace garfont::gtok
