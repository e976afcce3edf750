#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace garfont {

// Dense double-precision tensors with reverse-mode autodiff. Define-by-run:
// every op records its parents and a backward closure unless grad recording
// is suspended (NoGradGuard) or no input requires grad.
//
// Layout conventions used across the project:
//   2D [rows, cols] row-major; 3D [channels, h, w]; 1D [n]; scalar [1].

struct Shape {
  std::vector<int> dims;

  Shape() = default;
  Shape(std::initializer_list<int> d) : dims(d) {}
  explicit Shape(std::vector<int> d) : dims(std::move(d)) {}

  int64_t numel() const {
    int64_t n = 1;
    for (int d : dims) n *= d;
    return n;
  }
  int operator[](size_t i) const { return dims[i]; }
  size_t ndim() const { return dims.size(); }
  bool operator==(const Shape& o) const { return dims == o.dims; }
  std::string str() const;
};

struct Node {
  std::vector<double> value;
  std::vector<double> grad;  // allocated on first accumulation
  Shape shape;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  static Tensor zeros(const Shape& s, bool requires_grad = false);
  static Tensor full(const Shape& s, double v, bool requires_grad = false);
  static Tensor from_data(const Shape& s, std::vector<double> v,
                          bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int64_t numel() const { return n_->shape.numel(); }
  std::vector<double>& data() { return n_->value; }
  const std::vector<double>& data() const { return n_->value; }
  std::vector<double>& grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  bool has_grad() const { return !n_->grad.empty(); }
  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool b) { n_->requires_grad = b; }
  double item() const;

  // Reverse pass from a scalar root (seeds d(root)/d(root) = 1).
  void backward();
  void zero_grad() {
    if (!n_->grad.empty()) n_->grad.assign(n_->grad.size(), 0.0);
  }

  std::shared_ptr<Node> node() const { return n_; }

 private:
  std::shared_ptr<Node> n_;
};

// Suspends graph recording within a scope (inference / sampling paths).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};
bool grad_enabled();

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_const(const Tensor& a, double c);
Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh_t(const Tensor& a);
Tensor exp_t(const Tensor& a);
Tensor log_t(const Tensor& a);
Tensor abs_t(const Tensor& a);
Tensor square(const Tensor& a);
// Hard clamp to [0,1]; gradient passes through the interior only.
Tensor clamp01(const Tensor& a);
Tensor detach(const Tensor& a);

// ---- broadcast ----
Tensor add_rowvec(const Tensor& x, const Tensor& v);  // [R,C] + [C]
Tensor add_colvec(const Tensor& x, const Tensor& v);  // [R,C] + [R]
Tensor repeat_rows(const Tensor& v, int rows);        // [C] -> [R,C]

// ---- reductions ----
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_cols(const Tensor& x);   // [R,C] -> [R]
Tensor sum_rows(const Tensor& x);   // [R,C] -> [C]
Tensor mean_rows(const Tensor& x);  // [R,C] -> [C]

// ---- shape ----
Tensor reshape(const Tensor& a, const Shape& s);
Tensor transpose(const Tensor& a);                     // 2D
Tensor slice_rows(const Tensor& a, int r0, int r1);    // [r0, r1)
Tensor slice_cols(const Tensor& a, int c0, int c1);    // [c0, c1)
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);  // [M,K] @ [K,N]

// ---- softmax & losses ----
Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);
// Mean of -log softmax(x)[target] over rows.
Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets);
Tensor l1_mean(const Tensor& a, const Tensor& b);
Tensor mse_mean(const Tensor& a, const Tensor& b);

// ---- normalization ----
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// ---- convolution (single sample, CHW) ----
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad);  // w: [Co,Ci,kh,kw]
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b,
                        int stride, int pad);  // w: [Ci,Co,kh,kw]

// ---- embedding ----
Tensor gather_rows(const Tensor& table, const std::vector<int>& indices);

}  // namespace garfont
