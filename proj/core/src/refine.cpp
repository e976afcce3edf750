#include "garfont/refine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <set>

#include "garfont/common.hpp"

namespace garfont::refine {

namespace {

bool is_lora(const std::string& name) {
  return name.find(".lora_") != std::string::npos;
}

std::string base_hash(const nn::ParamStore& ps) {
  return ps.hash_params_if([](const std::string& n) { return !is_lora(n); });
}

}  // namespace

// ---------------------------------------------------------------------------
// NFA
// ---------------------------------------------------------------------------

NfaResult nfa_finetune(argen::ArgenModel& gen, const gtok::GtokModel& tok,
                       const glyphforge::Dataset& data, int target_style,
                       const NfaConfig& cfg, const std::string& loss_csv_path) {
  if (cfg.glyphs < 1)
    throw ValidationError("nfa: empty adaptation glyph set");
  if (!gen.has_lora())
    throw ConfigError("nfa: low-rank adapters are not attached");
  const auto& manifest = data.manifest;
  if (target_style < 0 || target_style >= manifest.n_styles())
    throw ValidationError("nfa: target style out of range");

  NfaResult result;
  result.target_style = target_style;
  result.base_hash_before = base_hash(gen.params());

  // adaptation characters come from the style's available (train-char) glyphs
  Rng rng(substream_seed(cfg.seed, "nfa/" + std::to_string(target_style)));
  const int train_chars = manifest.config.train_chars;
  if (cfg.glyphs + cfg.val_glyphs > train_chars)
    throw ValidationError("nfa: glyphs + val_glyphs exceeds available chars");
  auto perm = rng.permutation(train_chars);
  std::vector<int> adapt_chars(perm.begin(), perm.begin() + cfg.glyphs);
  std::vector<int> val_chars(perm.begin() + cfg.glyphs,
                             perm.begin() + cfg.glyphs + cfg.val_glyphs);

  // frozen tokenizer targets for the adaptation set
  std::vector<std::vector<int>> targets(adapt_chars.size());
  for (size_t i = 0; i < adapt_chars.size(); ++i)
    targets[i] = tok.encode_indices(data.glyph(target_style, adapt_chars[i]));

  auto sample_refs = [&](int exclude, Rng& r) {
    std::vector<int> pool;
    for (int c : adapt_chars)
      if (c != exclude) pool.push_back(c);
    if (pool.empty()) pool.push_back(exclude);
    std::vector<int> out;
    for (int i = 0; i < gen.config().n_refs; ++i)
      out.push_back(pool[r.uniform_int(pool.size())]);
    return out;
  };

  auto val_l1 = [&](uint64_t seed_tag) {
    Rng vr(substream_seed(cfg.seed, "nfa/val"));
    double total = 0;
    for (int vc : val_chars) {
      auto refs_idx = sample_refs(vc, vr);
      std::vector<GlyphImage> refs;
      for (int rc : refs_idx) refs.push_back(data.glyph(target_style, rc));
      auto gen_res = argen::generate(gen, tok, data.glyph(0, vc), refs,
                                     argen::DecodeMode::Soft, 0.0, seed_tag);
      total += image_l1(gen_res.image, data.glyph(target_style, vc));
    }
    return total / val_chars.size();
  };

  result.val_l1_before = val_l1(11);

  // LoRA-only updates
  std::vector<bool> was_trainable;
  for (const auto& [n, p] : gen.params().items())
    was_trainable.push_back(p.requires_grad());
  gen.params().set_trainable_if(
      [](const std::string& n) { return !is_lora(n); }, false);
  gen.params().set_trainable_if(is_lora, true);

  nn::AdamConfig acfg;
  acfg.lr = cfg.lr;
  acfg.beta1 = gen.config().beta1;
  acfg.beta2 = gen.config().beta2;
  nn::Adam opt(gen.params(), acfg);

  std::vector<double> step_losses;
  Rng brng(substream_seed(cfg.seed, "nfa/batch"));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order = brng.permutation(static_cast<int>(adapt_chars.size()));
    double epoch_loss = 0;
    int steps = 0;
    for (size_t off = 0; off < order.size(); off += cfg.batch) {
      gen.params().zero_grad();
      Tensor total;
      const size_t n = std::min<size_t>(cfg.batch, order.size() - off);
      for (size_t i = 0; i < n; ++i) {
        const int idx = order[off + i];
        const int ch = adapt_chars[idx];
        auto refs_idx = sample_refs(ch, brng);
        std::vector<Tensor> refs;
        for (int rc : refs_idx)
          refs.push_back(image_to_tensor(data.glyph(target_style, rc)));
        Tensor cond = gen.aggregate(
            gen.encode_content(image_to_tensor(data.glyph(0, ch))),
            gen.encode_style(refs));
        Tensor logits = gen.forward_teacher(cond, targets[idx]);
        Tensor recon = tok.decode(argen::soft_decode(logits, tok.codebook()));
        Tensor loss = argen::generator_loss(
            logits, targets[idx], recon,
            image_to_tensor(data.glyph(target_style, ch)), cfg.lambda_ce,
            cfg.lambda_pixel);
        total = total.defined() ? add(total, loss) : loss;
      }
      Tensor loss = scale(total, 1.0 / static_cast<double>(n));
      const double lv = loss.item();
      if (!std::isfinite(lv))
        throw DiagnosticError("nfa: non-finite loss");
      loss.backward();
      opt.step();
      epoch_loss += lv;
      ++steps;
      step_losses.push_back(lv);
    }
    result.epoch_losses.push_back(steps ? epoch_loss / steps : 0.0);
  }

  for (size_t i = 0; i < was_trainable.size(); ++i)
    gen.params().items()[i].second.set_requires_grad(was_trainable[i]);

  result.val_l1_after = val_l1(11);
  result.base_hash_after = base_hash(gen.params());

  if (!loss_csv_path.empty()) {
    std::ofstream f(loss_csv_path);
    f << "epoch,loss\n";
    for (size_t e = 0; e < result.epoch_losses.size(); ++e)
      f << e << ',' << result.epoch_losses[e] << "\n";
  }
  return result;
}

// ---------------------------------------------------------------------------
// rewards and advantages
// ---------------------------------------------------------------------------

RewardRecord compute_reward(const GlyphImage& image, int target_char,
                            int target_style,
                            const evalkit::Classifier& content_clf,
                            const evalkit::Classifier& style_clf,
                            double lambda_ocr, double lambda_style) {
  if (!content_clf.trained() || !style_clf.trained())
    throw ConfigError("compute_reward: classifiers must be trained");
  if (lambda_ocr < 0 || lambda_style < 0)
    throw ValidationError("compute_reward: negative reward weight");
  RewardRecord rec;
  rec.target_char = target_char;
  auto [pred, prob] = content_clf.predict_with_prob(image);
  rec.pred_char = pred;
  rec.p_ocr = prob;
  rec.r_ocr = pred == target_char ? prob : 0.0;
  {
    NoGradGuard ng;
    Tensor p = softmax_rows(style_clf.logits(image_to_tensor(image)));
    rec.r_style = p.data()[target_style];
  }
  rec.composite = lambda_ocr * rec.r_ocr + lambda_style * rec.r_style;
  return rec;
}

std::vector<double> group_advantages(const std::vector<double>& rewards) {
  const int g = static_cast<int>(rewards.size());
  if (g < 2) throw ValidationError("group_advantages: group size must be >= 2");
  double mean = 0;
  for (double r : rewards) mean += r;
  mean /= g;
  double var = 0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= g;  // population variance
  const double sd = std::sqrt(var);
  std::vector<double> out(g, 0.0);
  if (sd < 1e-8) return out;  // degenerate group
  for (int i = 0; i < g; ++i) out[i] = (rewards[i] - mean) / sd;
  return out;
}

// ---------------------------------------------------------------------------
// SE loss
// ---------------------------------------------------------------------------

void SeConfig::validate() const {
  if (group_size < 2) throw ValidationError("se: group size must be >= 2");
  if (beta_kl < 0) throw ValidationError("se: beta must be >= 0");
  if (lambda_ocr < 0 || lambda_style < 0)
    throw ValidationError("se: reward weights must be >= 0");
}

Tensor se_group_loss(const argen::ArgenModel& policy,
                     const argen::ArgenModel& reference, const Tensor& cond,
                     const GroupSample& group, double beta) {
  const int g = static_cast<int>(group.sequences.size());
  if (g == 0 || group.advantages.size() != group.sequences.size())
    throw ValidationError("se_group_loss: malformed group");
  Tensor pg_total, kl_total;
  for (int k = 0; k < g; ++k) {
    const auto& seq = group.sequences[k];
    Tensor logits = policy.forward_teacher(cond, seq);
    Tensor lp = log_softmax_rows(logits);
    // sequence log-probability via a one-hot mask
    const int n = lp.shape()[0], kk = lp.shape()[1];
    std::vector<double> onehot(static_cast<size_t>(n) * kk, 0.0);
    for (int t = 0; t < n; ++t) onehot[static_cast<size_t>(t) * kk + seq[t]] = 1.0;
    Tensor logprob =
        sum_all(mul(lp, Tensor::from_data({n, kk}, std::move(onehot))));
    Tensor pg = scale(logprob, -group.advantages[k]);
    pg_total = pg_total.defined() ? add(pg_total, pg) : pg;

    if (beta > 0) {
      Tensor lp_ref;
      {
        NoGradGuard ng;
        lp_ref = log_softmax_rows(reference.forward_teacher(cond, seq));
      }
      Tensor lp_ref_const = Tensor::from_data(lp_ref.shape(), lp_ref.data());
      // exact per-position categorical KL, averaged over positions
      Tensor kl_rows =
          sum_cols(mul(softmax_rows(logits), sub(lp, lp_ref_const)));
      Tensor kl = scale(sum_all(kl_rows), 1.0 / n);
      kl_total = kl_total.defined() ? add(kl_total, kl) : kl;
    }
  }
  Tensor loss = scale(pg_total, 1.0 / g);
  if (kl_total.defined())
    loss = add(loss, scale(kl_total, beta / g));
  return loss;
}

std::unique_ptr<argen::ArgenModel> snapshot_policy(
    const argen::ArgenModel& gen, const gtok::GtokConfig& tok_cfg) {
  auto copy = std::make_unique<argen::ArgenModel>(gen.config(), tok_cfg, 0);
  if (gen.has_lora()) {
    Rng dummy(0);
    copy->attach_lora(dummy);
  }
  nn::copy_params(gen.params(), copy->params());
  copy->params().set_trainable("", false);
  return copy;
}

// ---------------------------------------------------------------------------
// SE refinement
// ---------------------------------------------------------------------------

SeResult se_refine(argen::ArgenModel& gen, const gtok::GtokModel& tok,
                   const glyphforge::Dataset& data,
                   const evalkit::Classifier& content_clf,
                   const evalkit::Classifier& style_clf, const SeConfig& cfg,
                   const std::string& reward_csv_path) {
  cfg.validate();
  if (!gen.has_lora())
    throw ConfigError("se: low-rank adapters are not attached");
  const auto& manifest = data.manifest;

  SeResult result;
  result.base_hash_before = base_hash(gen.params());

  auto reference = snapshot_policy(gen, tok.config());

  // pair selection: characters from the whole universe, styles from training
  Rng sel(substream_seed(cfg.seed, "se/pairs"));
  auto char_perm = sel.permutation(manifest.n_chars());
  auto style_perm = sel.permutation(manifest.config.train_styles);
  std::vector<int> chars(char_perm.begin(),
                         char_perm.begin() +
                             std::min<int>(cfg.n_chars, manifest.n_chars()));
  std::vector<int> styles(
      style_perm.begin(),
      style_perm.begin() +
          std::min<int>(cfg.n_styles, manifest.config.train_styles));
  std::vector<std::pair<int, int>> pairs;
  for (int s : styles)
    for (int c : chars) pairs.emplace_back(s, c);

  // conditions are constant under LoRA-only training: cache one per pair
  std::vector<Tensor> conds(pairs.size());
  Rng ref_rng(substream_seed(cfg.seed, "se/refs"));
  {
    NoGradGuard ng;
    for (size_t i = 0; i < pairs.size(); ++i) {
      const auto& [s, c] = pairs[i];
      auto refs_idx =
          glyphforge::sample_style_refs(manifest, s, c, gen.config().n_refs,
                                        ref_rng);
      std::vector<Tensor> refs;
      for (int rc : refs_idx)
        refs.push_back(image_to_tensor(data.glyph(s, rc)));
      conds[i] = gen.aggregate(
          gen.encode_content(image_to_tensor(data.glyph(0, c))),
          gen.encode_style(refs));
    }
  }

  // LoRA-only updates
  std::vector<bool> was_trainable;
  for (const auto& [n, p] : gen.params().items())
    was_trainable.push_back(p.requires_grad());
  gen.params().set_trainable_if(
      [](const std::string& n) { return !is_lora(n); }, false);
  gen.params().set_trainable_if(is_lora, true);

  nn::AdamConfig acfg;
  acfg.lr = cfg.lr;
  nn::Adam opt(gen.params(), acfg);

  Rng srng(substream_seed(cfg.seed, "se/sample"));
  std::ofstream csv;
  if (!reward_csv_path.empty()) {
    csv.open(reward_csv_path);
    csv << "epoch,mean_reward,mean_r_ocr,mean_r_style\n";
  }

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order = srng.permutation(static_cast<int>(pairs.size()));
    double epoch_reward = 0, epoch_ocr = 0, epoch_style = 0;
    int n_samples = 0;
    bool any_variance = false;
    Tensor pending;
    int pending_groups = 0;

    auto flush = [&]() {
      if (!pending.defined()) return;
      Tensor loss = scale(pending, 1.0 / pending_groups);
      if (!std::isfinite(loss.item()))
        throw DiagnosticError("se: non-finite loss");
      gen.params().zero_grad();
      loss.backward();
      opt.step();
      pending = Tensor();
      pending_groups = 0;
    };

    for (int oi : order) {
      const auto& [s, c] = pairs[oi];
      GroupSample group;
      for (int k = 0; k < cfg.group_size; ++k) {
        auto res = gen.sample_tokens(conds[oi], cfg.temperature, srng);
        GlyphImage img = tensor_to_image(
            tok.decode(argen::soft_decode(res.logits, tok.codebook())), c, s);
        auto reward = compute_reward(img, c, s, content_clf, style_clf,
                                     cfg.lambda_ocr, cfg.lambda_style);
        group.sequences.push_back(std::move(res.indices));
        group.rewards.push_back(reward.composite);
        epoch_reward += reward.composite;
        epoch_ocr += reward.r_ocr;
        epoch_style += reward.r_style;
        ++n_samples;
      }
      group.advantages = group_advantages(group.rewards);
      for (double a : group.advantages)
        if (a != 0.0) any_variance = true;
      Tensor loss =
          se_group_loss(gen, *reference, conds[oi], group, cfg.beta_kl);
      pending = pending.defined() ? add(pending, loss) : loss;
      if (++pending_groups >= cfg.pair_batch) flush();
    }
    flush();

    result.epoch_mean_rewards.push_back(epoch_reward / n_samples);
    if (!any_variance) {
      result.degenerate_warning = true;
      std::cerr << "[garfont] warning: SE epoch " << epoch
                << " saw zero reward variance in every group (policy "
                   "collapsed to determinism)\n";
    }
    if (csv.is_open())
      csv << epoch << ',' << epoch_reward / n_samples << ','
          << epoch_ocr / n_samples << ',' << epoch_style / n_samples << "\n";
  }

  for (size_t i = 0; i < was_trainable.size(); ++i)
    gen.params().items()[i].second.set_requires_grad(was_trainable[i]);
  result.base_hash_after = base_hash(gen.params());
  return result;
}

}  // namespace garfont::refine
