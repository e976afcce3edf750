#include "garfont/evalkit.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "garfont/common.hpp"

using json = nlohmann::json;

namespace garfont::evalkit {

// ---------------------------------------------------------------------------
// pixel metrics
// ---------------------------------------------------------------------------

namespace {

void check_same(const GlyphImage& a, const GlyphImage& b, const char* op) {
  if (a.h != b.h || a.w != b.w)
    throw ValidationError(std::string(op) + ": image shape mismatch");
}

constexpr int kSsimWindow = 7;
constexpr double kSsimSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

std::vector<double> ssim_kernel() {
  std::vector<double> k(kSsimWindow);
  const int half = kSsimWindow / 2;
  double sum = 0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double d = i - half;
    k[i] = std::exp(-d * d / (2 * kSsimSigma * kSsimSigma));
    sum += k[i];
  }
  for (auto& v : k) v /= sum;
  return k;
}

}  // namespace

double rmse(const GlyphImage& a, const GlyphImage& b) {
  check_same(a, b, "rmse");
  double s = 0;
  for (size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = a.pixels[i] - b.pixels[i];
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(a.pixels.size()));
}

double ssim(const GlyphImage& a, const GlyphImage& b) {
  check_same(a, b, "ssim");
  if (a.h < kSsimWindow || a.w < kSsimWindow)
    throw ValidationError("ssim: image smaller than 7x7 window");
  static const std::vector<double> k = ssim_kernel();
  const int half = kSsimWindow / 2;
  double total = 0;
  int count = 0;
  for (int cy = half; cy < a.h - half; ++cy)
    for (int cx = half; cx < a.w - half; ++cx) {
      double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
      for (int dy = -half; dy <= half; ++dy)
        for (int dx = -half; dx <= half; ++dx) {
          const double w = k[dy + half] * k[dx + half];
          const double x = a.at(cy + dy, cx + dx);
          const double y = b.at(cy + dy, cx + dx);
          mx += w * x;
          my += w * y;
          mxx += w * x * x;
          myy += w * y * y;
          mxy += w * x * y;
        }
      const double vx = mxx - mx * mx;
      const double vy = myy - my * my;
      const double cxy = mxy - mx * my;
      total += ((2 * mx * my + kC1) * (2 * cxy + kC2)) /
               ((mx * mx + my * my + kC1) * (vx + vy + kC2));
      ++count;
    }
  return total / count;
}

// ---------------------------------------------------------------------------
// Frechet
// ---------------------------------------------------------------------------

FrechetStats gaussian_stats(const std::vector<std::vector<double>>& features) {
  if (features.empty()) throw ValidationError("gaussian_stats: empty set");
  const int n = static_cast<int>(features.size());
  const int d = static_cast<int>(features[0].size());
  FrechetStats s;
  s.dim = d;
  s.mean.assign(d, 0.0);
  for (const auto& f : features)
    for (int i = 0; i < d; ++i) s.mean[i] += f[i];
  for (auto& m : s.mean) m /= n;
  s.cov.assign(static_cast<size_t>(d) * d, 0.0);
  if (n > 1) {
    for (const auto& f : features)
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
          s.cov[static_cast<size_t>(i) * d + j] +=
              (f[i] - s.mean[i]) * (f[j] - s.mean[j]);
    for (auto& c : s.cov) c /= (n - 1);
  }
  return s;
}

double frechet_distance(const FrechetStats& a, const FrechetStats& b) {
  if (a.dim != b.dim)
    throw ValidationError("frechet_distance: dimension mismatch");
  const int d = a.dim;
  using Mat = Eigen::MatrixXd;
  Mat s1 = Eigen::Map<const Mat>(a.cov.data(), d, d);
  Mat s2 = Eigen::Map<const Mat>(b.cov.data(), d, d);
  s1 = 0.5 * (s1 + s1.transpose().eval());
  s2 = 0.5 * (s2 + s2.transpose().eval());

  // sqrt(S1) by eigendecomposition, eigenvalue dust clipped at zero
  Eigen::SelfAdjointEigenSolver<Mat> es1(s1);
  Mat root1 = es1.eigenvectors() *
              es1.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
              es1.eigenvectors().transpose();
  Mat prod = root1 * s2 * root1;
  prod = 0.5 * (prod + prod.transpose().eval());
  Eigen::SelfAdjointEigenSolver<Mat> esp(prod);
  const double tr_sqrt = esp.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

  double mean_term = 0;
  for (int i = 0; i < d; ++i) {
    const double dm = a.mean[i] - b.mean[i];
    mean_term += dm * dm;
  }
  return mean_term + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
}

// ---------------------------------------------------------------------------
// classifier
// ---------------------------------------------------------------------------

Classifier::Classifier(Target target, int n_classes, int resolution,
                       const ClassifierConfig& cfg, uint64_t init_seed)
    : target_(target), n_classes_(n_classes), resolution_(resolution),
      cfg_(cfg) {
  Rng rng(init_seed);
  const int c = cfg.base_channels;
  c1_ = nn::Conv2dLayer(params_, "c1", 1, c, 3, 2, 1, rng);          // res/2
  c2_ = nn::Conv2dLayer(params_, "c2", c, 2 * c, 3, 1, 1, rng);      // stage A
  c3_ = nn::Conv2dLayer(params_, "c3", 2 * c, 4 * c, 3, 2, 1, rng);  // res/4
  c4_ = nn::Conv2dLayer(params_, "c4", 4 * c, 4 * c, 3, 1, 1, rng);  // stage B
  head_ = nn::LoraLinear(params_, "head", 4 * c, n_classes, rng);
}

namespace {

Tensor gap(const Tensor& chw) {
  // [C,H,W] -> [1,C] global average pool
  const int c = chw.shape()[0], h = chw.shape()[1], w = chw.shape()[2];
  return reshape(mean_rows(transpose(reshape(chw, {c, h * w}))), {1, c});
}

}  // namespace

Tensor Classifier::logits(const Tensor& image_chw) const {
  Tensor h1 = gelu(c1_.forward(image_chw));
  Tensor h2 = gelu(c2_.forward(h1));
  Tensor h3 = gelu(c3_.forward(h2));
  Tensor h4 = gelu(c4_.forward(h3));
  return head_.forward(gap(h4));
}

std::vector<Tensor> Classifier::features(const Tensor& image_chw) const {
  Tensor h1 = gelu(c1_.forward(image_chw));
  Tensor h2 = gelu(c2_.forward(h1));
  Tensor h3 = gelu(c3_.forward(h2));
  Tensor h4 = gelu(c4_.forward(h3));
  const auto flat = [](const Tensor& t) {
    return reshape(t, {1, static_cast<int>(t.numel())});
  };
  return {flat(h2), flat(h4)};
}

std::vector<double> Classifier::trunk_vector(const GlyphImage& img) const {
  NoGradGuard ng;
  Tensor h1 = gelu(c1_.forward(image_to_tensor(img)));
  Tensor h2 = gelu(c2_.forward(h1));
  Tensor h3 = gelu(c3_.forward(h2));
  Tensor h4 = gelu(c4_.forward(h3));
  return gap(h4).data();
}

int Classifier::predict(const GlyphImage& img) const {
  return predict_with_prob(img).first;
}

std::pair<int, double> Classifier::predict_with_prob(
    const GlyphImage& img) const {
  NoGradGuard ng;
  Tensor lg = logits(image_to_tensor(img));
  Tensor p = softmax_rows(lg);
  int best = 0;
  for (int i = 1; i < n_classes_; ++i)
    if (p.data()[i] > p.data()[best]) best = i;
  return {best, p.data()[best]};
}

Classifier train_classifier(const glyphforge::Dataset& data,
                            Classifier::Target target,
                            const ClassifierConfig& cfg) {
  const auto& m = data.manifest;
  const int n_classes =
      target == Classifier::Target::Content ? m.n_chars() : m.n_styles();
  const std::string label =
      target == Classifier::Target::Content ? "clf-content" : "clf-style";
  Classifier clf(target, n_classes, m.config.resolution, cfg,
                 substream_seed(cfg.seed, label + "/init"));
  Rng rng(substream_seed(cfg.seed, label + "/train"));

  // ground-truth glyphs of the whole universe
  std::vector<std::pair<int, int>> all;
  for (int s = 0; s < m.n_styles(); ++s)
    for (int c = 0; c < m.n_chars(); ++c) all.emplace_back(s, c);

  nn::AdamConfig acfg;
  acfg.lr = cfg.lr;
  nn::Adam opt(clf.params(), acfg);

  auto label_of = [&](const std::pair<int, int>& p) {
    return target == Classifier::Target::Content ? p.second : p.first;
  };

  auto subsample_accuracy = [&](int n_probe, Rng& prng) {
    int hits = 0;
    for (int i = 0; i < n_probe; ++i) {
      const auto& p = all[prng.uniform_int(all.size())];
      if (clf.predict(data.glyph(p.first, p.second)) == label_of(p)) ++hits;
    }
    return static_cast<double>(hits) / n_probe;
  };

  const int steps_per_epoch =
      static_cast<int>((all.size() + cfg.batch - 1) / cfg.batch);
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    auto perm = rng.permutation(static_cast<int>(all.size()));
    for (int step = 0; step < steps_per_epoch; ++step) {
      clf.params().zero_grad();
      Tensor total;
      for (int i = 0; i < cfg.batch; ++i) {
        const int idx = perm[(step * cfg.batch + i) % all.size()];
        const auto& p = all[idx];
        Tensor lg = clf.logits(image_to_tensor(data.glyph(p.first, p.second)));
        Tensor ce = cross_entropy_mean(lg, {label_of(p)});
        total = total.defined() ? add(total, ce) : ce;
      }
      total = scale(total, 1.0 / cfg.batch);
      total.backward();
      opt.step();
    }
    Rng prng(substream_seed(cfg.seed, label + "/probe/" + std::to_string(epoch)));
    if (subsample_accuracy(512, prng) >= cfg.floor + 0.01) break;
  }

  // full train-set accuracy decides the floor
  int hits = 0;
  for (const auto& p : all)
    if (clf.predict(data.glyph(p.first, p.second)) == label_of(p)) ++hits;
  const double acc = static_cast<double>(hits) / all.size();
  if (acc < cfg.floor)
    throw DiagnosticError(label + ": train accuracy " + std::to_string(acc) +
                          " below required floor " + std::to_string(cfg.floor) +
                          " after " + std::to_string(cfg.max_epochs) +
                          " epochs (dataset too hard or degenerate)");
  clf.mark_trained();
  return clf;
}

double accuracy(const Classifier& clf,
                const std::vector<const GlyphImage*>& images,
                const std::vector<int>& labels) {
  if (images.empty()) throw ValidationError("accuracy: empty evaluation set");
  if (images.size() != labels.size())
    throw ValidationError("accuracy: image/label count mismatch");
  int hits = 0;
  for (size_t i = 0; i < images.size(); ++i)
    if (clf.predict(*images[i]) == labels[i]) ++hits;
  return static_cast<double>(hits) / images.size();
}

double perceptual_distance(const GlyphImage& a, const GlyphImage& b,
                           const Classifier& content_clf) {
  if (!content_clf.trained())
    throw ConfigError("perceptual_distance: classifier is not trained");
  check_same(a, b, "perceptual_distance");
  NoGradGuard ng;
  auto fa = content_clf.features(image_to_tensor(a));
  auto fb = content_clf.features(image_to_tensor(b));
  double total = 0;
  for (size_t i = 0; i < fa.size(); ++i) total += mse_mean(fa[i], fb[i]).item();
  return total / fa.size();
}

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

std::string MetricsReport::to_json_string() const {
  json j{{"version", version},
         {"split", split},
         {"sample_count", sample_count},
         {"rmse", rmse},
         {"ssim", ssim},
         {"perceptual_proxy", perceptual_proxy},
         {"frechet_proxy", frechet_proxy},
         {"acc_content", acc_content},
         {"acc_style", acc_style}};
  return j.dump(2);
}

MetricsReport MetricsReport::from_json_string(const std::string& s) {
  json j = json::parse(s);
  MetricsReport r;
  r.version = j.at("version");
  r.split = j.at("split");
  r.sample_count = j.at("sample_count");
  r.rmse = j.at("rmse");
  r.ssim = j.at("ssim");
  r.perceptual_proxy = j.at("perceptual_proxy");
  r.frechet_proxy = j.at("frechet_proxy");
  r.acc_content = j.at("acc_content");
  r.acc_style = j.at("acc_style");
  return r;
}

void MetricsReport::save(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw DiagnosticError("cannot write report: " + path);
  f << to_json_string() << "\n";
}

MetricsReport MetricsReport::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DiagnosticError("cannot read report: " + path);
  std::string s((std::istreambuf_iterator<char>(f)),
                std::istreambuf_iterator<char>());
  return from_json_string(s);
}

MetricsReport evaluate_generated(const std::vector<GlyphImage>& generated,
                                 const std::vector<GlyphImage>& ground_truth,
                                 const Classifier& content_clf,
                                 const Classifier& style_clf,
                                 const std::string& split_tag) {
  if (generated.empty() || generated.size() != ground_truth.size())
    throw ValidationError("evaluate_generated: list size mismatch or empty");
  MetricsReport r;
  r.split = split_tag;
  r.sample_count = static_cast<int>(generated.size());
  std::vector<std::vector<double>> feats_gen, feats_gt;
  int content_hits = 0, style_hits = 0;
  for (size_t i = 0; i < generated.size(); ++i) {
    r.rmse += rmse(generated[i], ground_truth[i]);
    r.ssim += ssim(generated[i], ground_truth[i]);
    r.perceptual_proxy +=
        perceptual_distance(generated[i], ground_truth[i], content_clf);
    feats_gen.push_back(content_clf.trunk_vector(generated[i]));
    feats_gt.push_back(content_clf.trunk_vector(ground_truth[i]));
    if (content_clf.predict(generated[i]) == ground_truth[i].char_id)
      ++content_hits;
    if (style_clf.predict(generated[i]) == ground_truth[i].style_id)
      ++style_hits;
  }
  r.rmse /= r.sample_count;
  r.ssim /= r.sample_count;
  r.perceptual_proxy /= r.sample_count;
  r.acc_content = static_cast<double>(content_hits) / r.sample_count;
  r.acc_style = static_cast<double>(style_hits) / r.sample_count;
  r.frechet_proxy =
      frechet_distance(gaussian_stats(feats_gen), gaussian_stats(feats_gt));
  return r;
}

// ---------------------------------------------------------------------------
// linear probe
// ---------------------------------------------------------------------------

double linear_probe(const std::vector<std::vector<double>>& train_features,
                    const std::vector<int>& train_labels,
                    const std::vector<std::vector<double>>& eval_features,
                    const std::vector<int>& eval_labels, int n_classes,
                    uint64_t seed, int epochs, double lr) {
  if (train_features.empty() || eval_features.empty())
    throw ValidationError("linear_probe: empty feature set");
  const int d = static_cast<int>(train_features[0].size());
  nn::ParamStore ps;
  Rng rng(substream_seed(seed, "probe"));
  nn::LoraLinear lin(ps, "probe", d, n_classes, rng);
  nn::AdamConfig acfg;
  acfg.lr = lr;
  nn::Adam opt(ps, acfg);
  const int batch = 64;
  Rng order(substream_seed(seed, "probe/order"));
  for (int e = 0; e < epochs; ++e) {
    auto perm = order.permutation(static_cast<int>(train_features.size()));
    for (size_t off = 0; off < perm.size(); off += batch) {
      const int n = static_cast<int>(std::min<size_t>(batch, perm.size() - off));
      std::vector<double> xb(static_cast<size_t>(n) * d);
      std::vector<int> yb(n);
      for (int i = 0; i < n; ++i) {
        const int idx = perm[off + i];
        std::copy(train_features[idx].begin(), train_features[idx].end(),
                  xb.begin() + static_cast<size_t>(i) * d);
        yb[i] = train_labels[idx];
      }
      ps.zero_grad();
      Tensor loss =
          cross_entropy_mean(lin.forward(Tensor::from_data({n, d}, xb)), yb);
      loss.backward();
      opt.step();
    }
  }
  NoGradGuard ng;
  int hits = 0;
  for (size_t i = 0; i < eval_features.size(); ++i) {
    Tensor lg = lin.forward(Tensor::from_data({1, d}, eval_features[i]));
    int best = 0;
    for (int c = 1; c < n_classes; ++c)
      if (lg.data()[c] > lg.data()[best]) best = c;
    if (best == eval_labels[i]) ++hits;
  }
  return static_cast<double>(hits) / eval_features.size();
}

}  // namespace garfont::evalkit
