#include "garfont/mmstyle.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

#include "garfont/common.hpp"

namespace garfont::mmstyle {

void MmConfig::validate() const {
  if (d_text % 4 != 0) throw ConfigError("mmstyle: d_text must be divisible by 4");
  if (k_refs < 1) throw ValidationError("mmstyle: k_refs must be >= 1");
  if (text_layers < 1 || adapter_layers < 1)
    throw ConfigError("mmstyle: layer counts must be positive");
}

// ---------------------------------------------------------------------------
// vocabulary
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (std::isalpha(static_cast<unsigned char>(c))) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

constexpr int kMaxPromptLen = 64;

}  // namespace

Vocab Vocab::build(const std::vector<std::string>& corpus) {
  Vocab v;
  v.words.push_back("<unk>");
  std::vector<std::string> all;
  for (const auto& text : corpus) {
    auto ws = split_words(text);
    all.insert(all.end(), ws.begin(), ws.end());
  }
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  for (const auto& w : all) v.words.push_back(w);
  for (size_t i = 0; i < v.words.size(); ++i)
    v.index[v.words[i]] = static_cast<int>(i);
  return v;
}

std::vector<int> Vocab::tokenize(const std::string& prompt) const {
  std::vector<int> out;
  for (const auto& w : split_words(prompt)) {
    auto it = index.find(w);
    out.push_back(it == index.end() ? 0 : it->second);
    if (static_cast<int>(out.size()) >= kMaxPromptLen) break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// encoder
// ---------------------------------------------------------------------------

MmStyleEncoder::MmStyleEncoder(const MmConfig& cfg,
                               const argen::ArgenConfig& gen_cfg, Vocab vocab,
                               uint64_t init_seed)
    : cfg_(cfg), n_refs_limit_(gen_cfg.n_refs),
      style_tokens_(gen_cfg.style_tokens), vocab_(std::move(vocab)) {
  cfg.validate();
  if (cfg.k_refs >= gen_cfg.n_refs)
    throw ValidationError("mmstyle: k_refs must be < generator n_refs");
  Rng rng(init_seed);
  word_embed_ = params_.create("text.embed", {vocab_.size(), cfg.d_text}, 0.02,
                               rng);
  pos_embed_ = params_.create("text.pos", {kMaxPromptLen, cfg.d_text}, 0.02,
                              rng);
  for (int i = 0; i < cfg.text_layers; ++i)
    text_blocks_.emplace_back(params_, "text.blk" + std::to_string(i),
                              cfg.d_text, cfg.text_heads, 4, rng);
  text_ln_ = nn::LayerNormLayer(params_, "text.ln", cfg.d_text);
  proj_in_ = nn::LoraLinear(params_, "adapter.proj_in", cfg.d_text,
                            gen_cfg.d_model, rng);
  for (int i = 0; i < cfg.adapter_layers; ++i)
    adapter_blocks_.emplace_back(params_, "adapter.blk" + std::to_string(i),
                                 gen_cfg.d_model, cfg.adapter_heads, 2, rng);
  // zero-initialized output projection: a fresh adapter contributes F_t = 0
  proj_out_ = nn::LoraLinear(params_, "adapter.proj_out", gen_cfg.d_model,
                             gen_cfg.d_model, rng);
  std::fill(proj_out_.w.data().begin(), proj_out_.w.data().end(), 0.0);
}

Tensor MmStyleEncoder::encode_text(const std::string& prompt) const {
  auto ids = vocab_.tokenize(prompt);
  if (ids.empty())
    throw ValidationError("encode_text: empty prompt");
  const int n = static_cast<int>(ids.size());
  Tensor x = add(gather_rows(word_embed_, ids), slice_rows(pos_embed_, 0, n));
  const auto mask = nn::AttentionMask::full(n);
  for (const auto& blk : text_blocks_) x = blk.forward(x, mask);
  x = text_ln_.forward(x);
  return reshape(mean_rows(x), {1, cfg_.d_text});
}

Tensor MmStyleEncoder::adapt(const Tensor& text_embedding,
                             const std::vector<Tensor>& vis_feats) const {
  const int k = static_cast<int>(vis_feats.size());
  if (k < 1) throw ValidationError("adapt: needs at least one visual reference");
  if (k >= n_refs_limit_)
    throw ValidationError("adapt: k = " + std::to_string(k) +
                          " must be < N_s = " + std::to_string(n_refs_limit_));
  Tensor ctx = concat_rows(vis_feats);
  Tensor tok = proj_in_.forward(text_embedding);  // [1, d_model]
  for (const auto& blk : adapter_blocks_) tok = blk.forward(tok, ctx);
  tok = proj_out_.forward(tok);
  // spatial expansion to one reference's token layout
  return repeat_rows(reshape(tok, {static_cast<int>(tok.numel())}),
                     style_tokens_);
}

std::vector<Tensor> MmStyleEncoder::multimodal_features(
    const std::string& prompt, const std::vector<Tensor>& vis_feats) const {
  Tensor f_t = adapt(encode_text(prompt), vis_feats);
  std::vector<Tensor> out = vis_feats;
  out.push_back(f_t);
  return out;
}

Tensor adapter_loss(const Tensor& t_mm, const Tensor& t_vis) {
  if (!(t_mm.shape() == t_vis.shape()))
    throw ValidationError("adapter_loss: shape mismatch " + t_mm.shape().str() +
                          " vs " + t_vis.shape().str());
  return mse_mean(t_mm, t_vis);
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

MmTrainResult train_adapter(MmStyleEncoder& enc, nn::Adam& opt,
                            argen::ArgenModel& gen, nn::Adam* opt_gen,
                            const gtok::GtokModel& tok,
                            const glyphforge::Dataset& data, Rng& batch_rng,
                            int start_step, const std::string& loss_csv_path) {
  const MmConfig& cfg = enc.config();
  if (cfg.joint && !opt_gen)
    throw ConfigError("train_adapter: joint mode needs a generator optimizer");
  const argen::ArgenConfig& gcfg = gen.config();
  const auto& manifest = data.manifest;
  auto train_pairs = data.pairs(glyphforge::Split::Train);
  if (train_pairs.empty())
    throw ValidationError("train_adapter: dataset has no train split");

  // decoupled paradigm: the visual pipeline is frozen (joint mode trains it)
  std::vector<bool> was_trainable;
  for (const auto& [n, p] : gen.params().items())
    was_trainable.push_back(p.requires_grad());
  if (!cfg.joint) gen.params().set_trainable("", false);

  // frozen encoders allow caching per-glyph features (decoupled mode only)
  const int n_chars = manifest.n_chars();
  std::vector<Tensor> style_feat_cache;
  std::vector<Tensor> content_feat_cache;
  if (!cfg.joint) {
    NoGradGuard ng;
    style_feat_cache.resize(static_cast<size_t>(manifest.n_styles()) * n_chars);
    for (const auto& [s, c] : train_pairs)
      style_feat_cache[static_cast<size_t>(s) * n_chars + c] =
          gen.encode_style({image_to_tensor(data.glyph(s, c))})[0];
    content_feat_cache.resize(n_chars);
    for (int c = 0; c < manifest.config.train_chars; ++c)
      content_feat_cache[c] = gen.encode_content(image_to_tensor(data.glyph(0, c)));
  }

  std::vector<std::vector<int>> targets;
  if (cfg.joint) targets = argen::cache_token_targets(tok, data);

  MmTrainResult result;
  for (int step = start_step; step < cfg.steps; ++step) {
    enc.params().zero_grad();
    gen.params().zero_grad();
    Tensor total;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto& pr = train_pairs[batch_rng.uniform_int(train_pairs.size())];
      const int style = pr.first, ch = pr.second;
      auto ref_chars = glyphforge::sample_style_refs(manifest, style, ch,
                                                     gcfg.n_refs, batch_rng);
      const std::string& prompt = manifest.style_descriptions[style];

      if (!cfg.joint) {
        Tensor f_c = content_feat_cache[ch];
        std::vector<Tensor> vis_all;
        for (int rc : ref_chars)
          vis_all.push_back(
              style_feat_cache[static_cast<size_t>(style) * n_chars + rc]);
        std::vector<Tensor> vis_k(vis_all.begin(),
                                  vis_all.begin() + cfg.k_refs);
        Tensor t_vis;
        {
          NoGradGuard ng;
          t_vis = gen.aggregate(f_c, vis_all);
        }
        Tensor t_mm =
            gen.aggregate(f_c, enc.multimodal_features(prompt, vis_k));
        Tensor loss = adapter_loss(t_mm, t_vis);
        total = total.defined() ? add(total, loss) : loss;
      } else {
        // VL_k ablation: AR objective with the multimodal condition
        Tensor content = image_to_tensor(data.glyph(0, ch));
        std::vector<Tensor> ref_imgs;
        for (int i = 0; i < cfg.k_refs; ++i)
          ref_imgs.push_back(image_to_tensor(data.glyph(style, ref_chars[i])));
        Tensor f_c = gen.encode_content(content);
        auto vis_k = gen.encode_style(ref_imgs);
        Tensor cond =
            gen.aggregate(f_c, enc.multimodal_features(prompt, vis_k));
        const auto& tgt = targets[static_cast<size_t>(style) * n_chars + ch];
        Tensor logits = gen.forward_teacher(cond, tgt);
        Tensor recon = tok.decode(argen::soft_decode(logits, tok.codebook()));
        Tensor loss = argen::generator_loss(
            logits, tgt, recon, image_to_tensor(data.glyph(style, ch)),
            gcfg.lambda_ce, gcfg.lambda_pixel);
        total = total.defined() ? add(total, loss) : loss;
      }
    }
    Tensor loss = scale(total, 1.0 / cfg.batch);
    const double lv = loss.item();
    if (!std::isfinite(lv))
      throw DiagnosticError("train_adapter: non-finite loss at step " +
                            std::to_string(step));
    loss.backward();
    opt.step();
    if (cfg.joint) opt_gen->step();
    result.log.push_back({step, lv});
  }

  // restore the generator's trainable flags
  for (size_t i = 0; i < was_trainable.size(); ++i)
    gen.params().items()[i].second.set_requires_grad(was_trainable[i]);

  const int head = std::min<size_t>(10, result.log.size());
  for (int i = 0; i < head; ++i) result.initial_loss += result.log[i].loss;
  if (head > 0) result.initial_loss /= head;
  for (int i = 0; i < head; ++i)
    result.final_loss += result.log[result.log.size() - 1 - i].loss;
  if (head > 0) result.final_loss /= head;

  if (!loss_csv_path.empty()) {
    std::ofstream f(loss_csv_path,
                    start_step == 0 ? std::ios::trunc : std::ios::app);
    if (start_step == 0) f << "step,loss\n";
    for (const auto& r : result.log) f << r.step << ',' << r.loss << "\n";
  }
  return result;
}

argen::GenerateResult generate_mm(const MmStyleEncoder& enc,
                                  const argen::ArgenModel& gen,
                                  const gtok::GtokModel& tok,
                                  const GlyphImage& content,
                                  const std::vector<GlyphImage>& refs,
                                  const std::string& prompt,
                                  argen::DecodeMode mode, double temperature,
                                  uint64_t seed) {
  NoGradGuard ng;
  Tensor f_c = gen.encode_content(image_to_tensor(content));
  std::vector<Tensor> ref_t;
  ref_t.reserve(refs.size());
  for (const auto& r : refs) ref_t.push_back(image_to_tensor(r));
  Tensor cond =
      gen.aggregate(f_c, enc.multimodal_features(prompt, gen.encode_style(ref_t)));
  Rng rng(seed);
  argen::GenerateResult res = gen.sample_tokens(cond, temperature, rng);
  Tensor tokens = mode == argen::DecodeMode::Hard
                      ? gather_rows(tok.codebook(), res.indices)
                      : argen::soft_decode(res.logits, tok.codebook());
  res.image = tensor_to_image(tok.decode(tokens), content.char_id,
                              refs.empty() ? -1 : refs.front().style_id);
  return res;
}

}  // namespace garfont::mmstyle
