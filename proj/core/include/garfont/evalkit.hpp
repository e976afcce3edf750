#pragma once

#include <functional>
#include <string>
#include <vector>

#include "garfont/glyphforge.hpp"
#include "garfont/image.hpp"
#include "garfont/nn.hpp"
#include "garfont/rng.hpp"

namespace garfont::evalkit {

// ---------------------------------------------------------------------------
// pixel metrics
// ---------------------------------------------------------------------------

double rmse(const GlyphImage& a, const GlyphImage& b);

// Mean local structural similarity over all positions where a 7x7 Gaussian
// window (sigma 1.5) fits entirely. C1=(0.01)^2, C2=(0.03)^2 on [0,1] range.
double ssim(const GlyphImage& a, const GlyphImage& b);

// ---------------------------------------------------------------------------
// Frechet distance between Gaussians
// ---------------------------------------------------------------------------

struct FrechetStats {
  int dim = 0;
  std::vector<double> mean;  // [dim]
  std::vector<double> cov;   // [dim*dim], row-major
};

FrechetStats gaussian_stats(const std::vector<std::vector<double>>& features);

// ||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}); the matrix square root uses
// eigendecomposition of the symmetrized product with eigenvalues clipped at 0.
double frechet_distance(const FrechetStats& a, const FrechetStats& b);

// ---------------------------------------------------------------------------
// classifiers (OCR / style-discriminator / LPIPS / FID stand-ins)
// ---------------------------------------------------------------------------

struct ClassifierConfig {
  int base_channels = 16;
  int batch = 32;
  double lr = 1e-3;
  int max_epochs = 40;
  double floor = 0.95;  // required train accuracy; miss -> diagnostic error
  uint64_t seed = 0;
};

class Classifier {
 public:
  enum class Target { Content, Style };

  Classifier(Target target, int n_classes, int resolution,
             const ClassifierConfig& cfg, uint64_t init_seed);

  Tensor logits(const Tensor& image_chw) const;
  // Two intermediate trunk activations, flattened (the perceptual feature
  // stack Phi).
  std::vector<Tensor> features(const Tensor& image_chw) const;
  // Pooled trunk embedding used for Frechet statistics.
  std::vector<double> trunk_vector(const GlyphImage& img) const;

  int predict(const GlyphImage& img) const;
  std::pair<int, double> predict_with_prob(const GlyphImage& img) const;

  Target target() const { return target_; }
  int n_classes() const { return n_classes_; }
  int resolution() const { return resolution_; }
  bool trained() const { return trained_; }
  void mark_trained() { trained_ = true; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  const ClassifierConfig& config() const { return cfg_; }

 private:
  Target target_;
  int n_classes_;
  int resolution_;
  ClassifierConfig cfg_;
  bool trained_ = false;
  nn::ParamStore params_;
  nn::Conv2dLayer c1_, c2_, c3_, c4_;
  nn::LoraLinear head_;
};

// Trains a classifier on ground-truth glyphs of the full universe (the label
// space covers every character / style so held-out splits can be scored).
// Throws DiagnosticError if the accuracy floor is not reached in max_epochs.
Classifier train_classifier(const glyphforge::Dataset& data,
                            Classifier::Target target,
                            const ClassifierConfig& cfg);

double accuracy(const Classifier& clf,
                const std::vector<const GlyphImage*>& images,
                const std::vector<int>& labels);

// Mean squared feature distance across the classifier's two trunk stages.
// The classifier must be trained (configuration error otherwise).
double perceptual_distance(const GlyphImage& a, const GlyphImage& b,
                           const Classifier& content_clf);

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

struct MetricsReport {
  int version = 1;
  std::string split;
  int sample_count = 0;
  double rmse = 0;
  double ssim = 0;
  double perceptual_proxy = 0;
  double frechet_proxy = 0;
  double acc_content = 0;
  double acc_style = 0;

  std::string to_json_string() const;
  static MetricsReport from_json_string(const std::string& s);
  void save(const std::string& path) const;
  static MetricsReport load(const std::string& path);
};

// Scores generated glyphs against ground truth. Labels come from the glyph
// ids on the ground-truth images.
MetricsReport evaluate_generated(const std::vector<GlyphImage>& generated,
                                 const std::vector<GlyphImage>& ground_truth,
                                 const Classifier& content_clf,
                                 const Classifier& style_clf,
                                 const std::string& split_tag);

// ---------------------------------------------------------------------------
// linear probing
// ---------------------------------------------------------------------------

// Trains a single linear layer on frozen features; returns eval accuracy.
// Feature extraction stays outside so the encoder provably never updates.
double linear_probe(const std::vector<std::vector<double>>& train_features,
                    const std::vector<int>& train_labels,
                    const std::vector<std::vector<double>>& eval_features,
                    const std::vector<int>& eval_labels, int n_classes,
                    uint64_t seed, int epochs = 30, double lr = 0.05);

}  // namespace garfont::evalkit
