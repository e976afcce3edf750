#include "garfont/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include "garfont/common.hpp"

namespace garfont {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

namespace {

thread_local bool g_grad_enabled = true;

std::shared_ptr<Node> make_node(Shape shape, std::vector<double> value) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  return n;
}

bool record(const std::initializer_list<const Tensor*>& inputs) {
  if (!g_grad_enabled) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!(a.shape() == b.shape()))
    throw ValidationError(std::string(op) + ": shape mismatch " +
                          a.shape().str() + " vs " + b.shape().str());
}

void check_2d(const Tensor& a, const char* op) {
  if (a.shape().ndim() != 2)
    throw ValidationError(std::string(op) + ": expected 2D tensor, got " +
                          a.shape().str());
}

}  // namespace

std::string Shape::str() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << "]";
  return os.str();
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor Tensor::zeros(const Shape& s, bool requires_grad) {
  auto n = make_node(s, std::vector<double>(s.numel(), 0.0));
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::full(const Shape& s, double v, bool requires_grad) {
  auto n = make_node(s, std::vector<double>(s.numel(), v));
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::from_data(const Shape& s, std::vector<double> v,
                         bool requires_grad) {
  if (static_cast<int64_t>(v.size()) != s.numel())
    throw ValidationError("from_data: size " + std::to_string(v.size()) +
                          " does not match shape " + s.str());
  auto n = make_node(s, std::move(v));
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::scalar(double v) { return from_data({1}, {v}); }

double Tensor::item() const {
  if (numel() != 1) throw ValidationError("item(): tensor is not scalar");
  return n_->value[0];
}

void Tensor::backward() {
  if (numel() != 1)
    throw ValidationError("backward(): root must be scalar");
  // Iterative post-order topo sort.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.push_back({n_.get(), 0});
  visited.insert(n_.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx++].get();
      if (!visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  n_->ensure_grad();
  n_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward();
  }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd_factor, const char* /*name*/) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  auto n = make_node(a.shape(), std::move(out));
  if (record({&a})) {
    n->requires_grad = true;
    n->parents = {a.node()};
    Node* self = n.get();
    auto pa = a.node();
    n->backward = [self, pa, bwd_factor]() {
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      for (size_t i = 0; i < self->value.size(); ++i)
        pa->grad[i] += self->grad[i] * bwd_factor(pa->value[i], self->value[i]);
    };
  }
  return Tensor(n);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  auto n = make_node(a.shape(), std::move(out));
  if (record({&a, &b})) {
    n->requires_grad = true;
    n->parents = {a.node(), b.node()};
    Node* self = n.get();
    auto pa = a.node(), pb = b.node();
    n->backward = [self, pa, pb]() {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i) pa->grad[i] += self->grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i) pb->grad[i] += self->grad[i];
      }
    };
  }
  return Tensor(n);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  auto n = make_node(a.shape(), std::move(out));
  if (record({&a, &b})) {
    n->requires_grad = true;
    n->parents = {a.node(), b.node()};
    Node* self = n.get();
    auto pa = a.node(), pb = b.node();
    n->backward = [self, pa, pb]() {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i) pa->grad[i] += self->grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i) pb->grad[i] -= self->grad[i];
      }
    };
  }
  return Tensor(n);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  auto n = make_node(a.shape(), std::move(out));
  if (record({&a, &b})) {
    n->requires_grad = true;
    n->parents = {a.node(), b.node()};
    Node* self = n.get();
    auto pa = a.node(), pb = b.node();
    n->backward = [self, pa, pb]() {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i)
          pa->grad[i] += self->grad[i] * pb->value[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i)
          pb->grad[i] += self->grad[i] * pa->value[i];
      }
    };
  }
  return Tensor(n);
}

Tensor scale(const Tensor& a, double c) {
  return unary_op(
      a, [c](double x) { return c * x; },
      [c](double, double) { return c; }, "scale");
}

Tensor add_const(const Tensor& a, double c) {
  return unary_op(
      a, [c](double x) { return x + c; },
      [](double, double) { return 1.0; }, "add_const");
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; }, "relu");
}

Tensor gelu(const Tensor& a) {
  // exact erf form
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  return unary_op(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        const double pdf =
            std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + x * pdf;
      },
      "gelu");
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a,
      [](double x) {
        return x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                      : std::exp(x) / (1.0 + std::exp(x));
      },
      [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

Tensor tanh_t(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; }, "tanh");
}

Tensor exp_t(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; }, "exp");
}

Tensor log_t(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; }, "log");
}

Tensor abs_t(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); },
      "abs");
}

Tensor square(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; }, "square");
}

Tensor clamp01(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x); },
      [](double x, double) { return (x > 0.0 && x < 1.0) ? 1.0 : 0.0; },
      "clamp01");
}

Tensor detach(const Tensor& a) {
  auto n = make_node(a.shape(), a.data());
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// broadcast
// ---------------------------------------------------------------------------

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  check_2d(x, "add_rowvec");
  const int rows = x.shape()[0], cols = x.shape()[1];
  if (v.numel() != cols)
    throw ValidationError("add_rowvec: vector length " +
                          std::to_string(v.numel()) + " != cols " +
                          std::to_string(cols));
  std::vector<double> out(x.data());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[r * cols + c] += v.data()[c];
  auto n = make_node(x.shape(), std::move(out));
  if (record({&x, &v})) {
    n->requires_grad = true;
    n->parents = {x.node(), v.node()};
    Node* self = n.get();
    auto px = x.node(), pv = v.node();
    n->backward = [self, px, pv, rows, cols]() {
      if (px->requires_grad) {
        px->ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i) px->grad[i] += self->grad[i];
      }
      if (pv->requires_grad) {
        pv->ensure_grad();
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < cols; ++c) pv->grad[c] += self->grad[r * cols + c];
      }
    };
  }
  return Tensor(n);
}

Tensor add_colvec(const Tensor& x, const Tensor& v) {
  check_2d(x, "add_colvec");
  const int rows = x.shape()[0], cols = x.shape()[1];
  if (v.numel() != rows)
    throw ValidationError("add_colvec: vector length mismatch");
  std::vector<double> out(x.data());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[r * cols + c] += v.data()[r];
  auto n = make_node(x.shape(), std::move(out));
  if (record({&x, &v})) {
    n->requires_grad = true;
    n->parents = {x.node(), v.node()};
    Node* self = n.get();
    auto px = x.node(), pv = v.node();
    n->backward = [self, px, pv, rows, cols]() {
      if (px->requires_grad) {
        px->ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i) px->grad[i] += self->grad[i];
      }
      if (pv->requires_grad) {
        pv->ensure_grad();
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < cols; ++c) pv->grad[r] += self->grad[r * cols + c];
      }
    };
  }
  return Tensor(n);
}

Tensor repeat_rows(const Tensor& v, int rows) {
  const int cols = static_cast<int>(v.numel());
  std::vector<double> out(static_cast<size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r)
    std::copy(v.data().begin(), v.data().end(), out.begin() + r * cols);
  auto n = make_node({rows, cols}, std::move(out));
  if (record({&v})) {
    n->requires_grad = true;
    n->parents = {v.node()};
    Node* self = n.get();
    auto pv = v.node();
    n->backward = [self, pv, rows, cols]() {
      if (!pv->requires_grad) return;
      pv->ensure_grad();
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) pv->grad[c] += self->grad[r * cols + c];
    };
  }
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor sum_all(const Tensor& a) {
  double s = 0;
  for (double x : a.data()) s += x;
  auto n = make_node({1}, {s});
  if (record({&a})) {
    n->requires_grad = true;
    n->parents = {a.node()};
    Node* self = n.get();
    auto pa = a.node();
    n->backward = [self, pa]() {
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      const double g = self->grad[0];
      for (auto& v : pa->grad) v += g;
    };
  }
  return Tensor(n);
}

Tensor mean_all(const Tensor& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_cols(const Tensor& x) {
  check_2d(x, "sum_cols");
  const int rows = x.shape()[0], cols = x.shape()[1];
  std::vector<double> out(rows, 0.0);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[r] += x.data()[r * cols + c];
  auto n = make_node({rows}, std::move(out));
  if (record({&x})) {
    n->requires_grad = true;
    n->parents = {x.node()};
    Node* self = n.get();
    auto px = x.node();
    n->backward = [self, px, rows, cols]() {
      if (!px->requires_grad) return;
      px->ensure_grad();
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) px->grad[r * cols + c] += self->grad[r];
    };
  }
  return Tensor(n);
}

Tensor sum_rows(const Tensor& x) {
  check_2d(x, "sum_rows");
  const int rows = x.shape()[0], cols = x.shape()[1];
  std::vector<double> out(cols, 0.0);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[c] += x.data()[r * cols + c];
  auto n = make_node({cols}, std::move(out));
  if (record({&x})) {
    n->requires_grad = true;
    n->parents = {x.node()};
    Node* self = n.get();
    auto px = x.node();
    n->backward = [self, px, rows, cols]() {
      if (!px->requires_grad) return;
      px->ensure_grad();
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) px->grad[r * cols + c] += self->grad[c];
    };
  }
  return Tensor(n);
}

Tensor mean_rows(const Tensor& x) {
  return scale(sum_rows(x), 1.0 / x.shape()[0]);
}

// ---------------------------------------------------------------------------
// shape
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, const Shape& s) {
  if (s.numel() != a.numel())
    throw ValidationError("reshape: numel mismatch " + a.shape().str() +
                          " -> " + s.str());
  auto n = make_node(s, a.data());
  if (record({&a})) {
    n->requires_grad = true;
    n->parents = {a.node()};
    Node* self = n.get();
    auto pa = a.node();
    n->backward = [self, pa]() {
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      for (size_t i = 0; i < self->grad.size(); ++i) pa->grad[i] += self->grad[i];
    };
  }
  return Tensor(n);
}

Tensor transpose(const Tensor& a) {
  check_2d(a, "transpose");
  const int rows = a.shape()[0], cols = a.shape()[1];
  std::vector<double> out(a.numel());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[c * rows + r] = a.data()[r * cols + c];
  auto n = make_node({cols, rows}, std::move(out));
  if (record({&a})) {
    n->requires_grad = true;
    n->parents = {a.node()};
    Node* self = n.get();
    auto pa = a.node();
    n->backward = [self, pa, rows, cols]() {
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
          pa->grad[r * cols + c] += self->grad[c * rows + r];
    };
  }
  return Tensor(n);
}

Tensor slice_rows(const Tensor& a, int r0, int r1) {
  check_2d(a, "slice_rows");
  const int rows = a.shape()[0], cols = a.shape()[1];
  if (r0 < 0 || r1 > rows || r0 >= r1)
    throw ValidationError("slice_rows: bad range");
  std::vector<double> out(a.data().begin() + static_cast<size_t>(r0) * cols,
                          a.data().begin() + static_cast<size_t>(r1) * cols);
  auto n = make_node({r1 - r0, cols}, std::move(out));
  if (record({&a})) {
    n->requires_grad = true;
    n->parents = {a.node()};
    Node* self = n.get();
    auto pa = a.node();
    n->backward = [self, pa, r0, cols]() {
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      const size_t off = static_cast<size_t>(r0) * cols;
      for (size_t i = 0; i < self->grad.size(); ++i)
        pa->grad[off + i] += self->grad[i];
    };
  }
  return Tensor(n);
}

Tensor slice_cols(const Tensor& a, int c0, int c1) {
  check_2d(a, "slice_cols");
  const int rows = a.shape()[0], cols = a.shape()[1];
  if (c0 < 0 || c1 > cols || c0 >= c1)
    throw ValidationError("slice_cols: bad range");
  const int w = c1 - c0;
  std::vector<double> out(static_cast<size_t>(rows) * w);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < w; ++c) out[r * w + c] = a.data()[r * cols + c0 + c];
  auto n = make_node({rows, w}, std::move(out));
  if (record({&a})) {
    n->requires_grad = true;
    n->parents = {a.node()};
    Node* self = n.get();
    auto pa = a.node();
    n->backward = [self, pa, rows, cols, c0, w]() {
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < w; ++c)
          pa->grad[r * cols + c0 + c] += self->grad[r * w + c];
    };
  }
  return Tensor(n);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ValidationError("concat_rows: empty list");
  const int cols = parts[0].shape()[1];
  int rows = 0;
  for (const auto& p : parts) {
    check_2d(p, "concat_rows");
    if (p.shape()[1] != cols)
      throw ValidationError("concat_rows: column mismatch");
    rows += p.shape()[0];
  }
  std::vector<double> out;
  out.reserve(static_cast<size_t>(rows) * cols);
  for (const auto& p : parts)
    out.insert(out.end(), p.data().begin(), p.data().end());
  auto n = make_node({rows, cols}, std::move(out));
  bool rec = false;
  if (g_grad_enabled)
    for (const auto& p : parts) rec = rec || p.requires_grad();
  if (rec) {
    n->requires_grad = true;
    for (const auto& p : parts) n->parents.push_back(p.node());
    Node* self = n.get();
    auto parents = n->parents;
    n->backward = [self, parents]() {
      size_t off = 0;
      for (const auto& p : parents) {
        const size_t sz = p->value.size();
        if (p->requires_grad) {
          p->ensure_grad();
          for (size_t i = 0; i < sz; ++i) p->grad[i] += self->grad[off + i];
        }
        off += sz;
      }
    };
  }
  return Tensor(n);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ValidationError("concat_cols: empty list");
  const int rows = parts[0].shape()[0];
  int cols = 0;
  for (const auto& p : parts) {
    check_2d(p, "concat_cols");
    if (p.shape()[0] != rows) throw ValidationError("concat_cols: row mismatch");
    cols += p.shape()[1];
  }
  std::vector<double> out(static_cast<size_t>(rows) * cols);
  int c_off = 0;
  for (const auto& p : parts) {
    const int pc = p.shape()[1];
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < pc; ++c)
        out[r * cols + c_off + c] = p.data()[r * pc + c];
    c_off += pc;
  }
  auto n = make_node({rows, cols}, std::move(out));
  bool rec = false;
  if (g_grad_enabled)
    for (const auto& p : parts) rec = rec || p.requires_grad();
  if (rec) {
    n->requires_grad = true;
    for (const auto& p : parts) n->parents.push_back(p.node());
    Node* self = n.get();
    auto parents = n->parents;
    n->backward = [self, parents, rows, cols]() {
      int c_off = 0;
      for (const auto& p : parents) {
        const int pc = p->shape[1];
        if (p->requires_grad) {
          p->ensure_grad();
          for (int r = 0; r < rows; ++r)
            for (int c = 0; c < pc; ++c)
              p->grad[r * pc + c] += self->grad[r * cols + c_off + c];
        }
        c_off += pc;
      }
    };
  }
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  const int m = a.shape()[0], k = a.shape()[1];
  const int k2 = b.shape()[0], n_cols = b.shape()[1];
  if (k != k2)
    throw ValidationError("matmul: inner dim mismatch " + a.shape().str() +
                          " @ " + b.shape().str());
  std::vector<double> out(static_cast<size_t>(m) * n_cols);
  {
    ECMap A(a.data().data(), m, k);
    ECMap B(b.data().data(), k, n_cols);
    EMap C(out.data(), m, n_cols);
    C.noalias() = A * B;
  }
  auto n = make_node({m, n_cols}, std::move(out));
  if (record({&a, &b})) {
    n->requires_grad = true;
    n->parents = {a.node(), b.node()};
    Node* self = n.get();
    auto pa = a.node(), pb = b.node();
    n->backward = [self, pa, pb, m, k, n_cols]() {
      ECMap G(self->grad.data(), m, n_cols);
      if (pa->requires_grad) {
        pa->ensure_grad();
        ECMap B(pb->value.data(), k, n_cols);
        EMap GA(pa->grad.data(), m, k);
        GA.noalias() += G * B.transpose();
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        ECMap A(pa->value.data(), m, k);
        EMap GB(pb->grad.data(), k, n_cols);
        GB.noalias() += A.transpose() * G;
      }
    };
  }
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// softmax & losses
// ---------------------------------------------------------------------------

Tensor softmax_rows(const Tensor& x) {
  check_2d(x, "softmax_rows");
  const int rows = x.shape()[0], cols = x.shape()[1];
  std::vector<double> out(x.numel());
  for (int r = 0; r < rows; ++r) {
    const double* xin = x.data().data() + static_cast<size_t>(r) * cols;
    double* o = out.data() + static_cast<size_t>(r) * cols;
    double mx = xin[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, xin[c]);
    double s = 0;
    for (int c = 0; c < cols; ++c) {
      o[c] = std::exp(xin[c] - mx);
      s += o[c];
    }
    const double inv = 1.0 / s;
    for (int c = 0; c < cols; ++c) o[c] *= inv;
  }
  auto n = make_node(x.shape(), std::move(out));
  if (record({&x})) {
    n->requires_grad = true;
    n->parents = {x.node()};
    Node* self = n.get();
    auto px = x.node();
    n->backward = [self, px, rows, cols]() {
      if (!px->requires_grad) return;
      px->ensure_grad();
      for (int r = 0; r < rows; ++r) {
        const double* y = self->value.data() + static_cast<size_t>(r) * cols;
        const double* g = self->grad.data() + static_cast<size_t>(r) * cols;
        double dot = 0;
        for (int c = 0; c < cols; ++c) dot += y[c] * g[c];
        double* gx = px->grad.data() + static_cast<size_t>(r) * cols;
        for (int c = 0; c < cols; ++c) gx[c] += y[c] * (g[c] - dot);
      }
    };
  }
  return Tensor(n);
}

Tensor log_softmax_rows(const Tensor& x) {
  check_2d(x, "log_softmax_rows");
  const int rows = x.shape()[0], cols = x.shape()[1];
  std::vector<double> out(x.numel());
  for (int r = 0; r < rows; ++r) {
    const double* xin = x.data().data() + static_cast<size_t>(r) * cols;
    double* o = out.data() + static_cast<size_t>(r) * cols;
    double mx = xin[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, xin[c]);
    double s = 0;
    for (int c = 0; c < cols; ++c) s += std::exp(xin[c] - mx);
    const double lse = mx + std::log(s);
    for (int c = 0; c < cols; ++c) o[c] = xin[c] - lse;
  }
  auto n = make_node(x.shape(), std::move(out));
  if (record({&x})) {
    n->requires_grad = true;
    n->parents = {x.node()};
    Node* self = n.get();
    auto px = x.node();
    n->backward = [self, px, rows, cols]() {
      if (!px->requires_grad) return;
      px->ensure_grad();
      for (int r = 0; r < rows; ++r) {
        const double* y = self->value.data() + static_cast<size_t>(r) * cols;
        const double* g = self->grad.data() + static_cast<size_t>(r) * cols;
        double gsum = 0;
        for (int c = 0; c < cols; ++c) gsum += g[c];
        double* gx = px->grad.data() + static_cast<size_t>(r) * cols;
        for (int c = 0; c < cols; ++c) gx[c] += g[c] - std::exp(y[c]) * gsum;
      }
    };
  }
  return Tensor(n);
}

Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets) {
  check_2d(logits, "cross_entropy");
  const int rows = logits.shape()[0], cols = logits.shape()[1];
  if (static_cast<int>(targets.size()) != rows)
    throw ValidationError("cross_entropy: target count mismatch");
  for (int t : targets)
    if (t < 0 || t >= cols)
      throw ValidationError("cross_entropy: target out of range");
  // forward: mean of -log softmax at target
  double loss = 0;
  std::vector<double> probs(logits.numel());
  for (int r = 0; r < rows; ++r) {
    const double* xin = logits.data().data() + static_cast<size_t>(r) * cols;
    double* p = probs.data() + static_cast<size_t>(r) * cols;
    double mx = xin[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, xin[c]);
    double s = 0;
    for (int c = 0; c < cols; ++c) {
      p[c] = std::exp(xin[c] - mx);
      s += p[c];
    }
    const double inv = 1.0 / s;
    for (int c = 0; c < cols; ++c) p[c] *= inv;
    loss -= std::log(std::max(p[targets[r]], 1e-300));
  }
  loss /= rows;
  auto n = make_node({1}, {loss});
  if (record({&logits})) {
    n->requires_grad = true;
    n->parents = {logits.node()};
    Node* self = n.get();
    auto px = logits.node();
    auto tg = targets;
    auto pr = std::make_shared<std::vector<double>>(std::move(probs));
    n->backward = [self, px, tg, pr, rows, cols]() {
      if (!px->requires_grad) return;
      px->ensure_grad();
      const double g = self->grad[0] / rows;
      for (int r = 0; r < rows; ++r) {
        const double* p = pr->data() + static_cast<size_t>(r) * cols;
        double* gx = px->grad.data() + static_cast<size_t>(r) * cols;
        for (int c = 0; c < cols; ++c) gx[c] += g * p[c];
        gx[tg[r]] -= g;
      }
    };
  }
  return Tensor(n);
}

Tensor l1_mean(const Tensor& a, const Tensor& b) {
  return mean_all(abs_t(sub(a, b)));
}

Tensor mse_mean(const Tensor& a, const Tensor& b) {
  return mean_all(square(sub(a, b)));
}

// ---------------------------------------------------------------------------
// layer norm
// ---------------------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  check_2d(x, "layer_norm");
  const int rows = x.shape()[0], cols = x.shape()[1];
  if (gain.numel() != cols || bias.numel() != cols)
    throw ValidationError("layer_norm: affine dim mismatch");
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  for (int r = 0; r < rows; ++r) {
    const double* xin = x.data().data() + static_cast<size_t>(r) * cols;
    double mean = 0;
    for (int c = 0; c < cols; ++c) mean += xin[c];
    mean /= cols;
    double var = 0;
    for (int c = 0; c < cols; ++c) {
      const double d = xin[c] - mean;
      var += d * d;
    }
    var /= cols;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    double* xh = xhat.data() + static_cast<size_t>(r) * cols;
    double* o = out.data() + static_cast<size_t>(r) * cols;
    for (int c = 0; c < cols; ++c) {
      xh[c] = (xin[c] - mean) * is;
      o[c] = xh[c] * gain.data()[c] + bias.data()[c];
    }
  }
  auto n = make_node(x.shape(), std::move(out));
  if (record({&x, &gain, &bias})) {
    n->requires_grad = true;
    n->parents = {x.node(), gain.node(), bias.node()};
    Node* self = n.get();
    auto px = x.node(), pg = gain.node(), pb = bias.node();
    auto xh = std::make_shared<std::vector<double>>(std::move(xhat));
    auto is = std::make_shared<std::vector<double>>(std::move(inv_std));
    n->backward = [self, px, pg, pb, xh, is, rows, cols]() {
      for (int r = 0; r < rows; ++r) {
        const double* g = self->grad.data() + static_cast<size_t>(r) * cols;
        const double* h = xh->data() + static_cast<size_t>(r) * cols;
        if (pg->requires_grad) {
          pg->ensure_grad();
          for (int c = 0; c < cols; ++c) pg->grad[c] += g[c] * h[c];
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (int c = 0; c < cols; ++c) pb->grad[c] += g[c];
        }
        if (px->requires_grad) {
          px->ensure_grad();
          double sum_gy = 0, sum_gyh = 0;
          for (int c = 0; c < cols; ++c) {
            const double gy = g[c] * pg->value[c];
            sum_gy += gy;
            sum_gyh += gy * h[c];
          }
          double* gx = px->grad.data() + static_cast<size_t>(r) * cols;
          const double invn = 1.0 / cols;
          for (int c = 0; c < cols; ++c) {
            const double gy = g[c] * pg->value[c];
            gx[c] += (*is)[r] * (gy - invn * sum_gy - h[c] * invn * sum_gyh);
          }
        }
      }
    };
  }
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

namespace {

struct ConvGeom {
  int ci, hi, wi;   // image (the larger map for conv input / convT output)
  int kh, kw, stride, pad;
  int ho, wo;       // column grid
};

// cols[(c*kh+a)*kw+b, oy*wo+ox] = img[c, oy*s+a-p, ox*s+b-p] (0 outside)
void im2col(const double* img, const ConvGeom& g, double* cols) {
  const int patch = g.ci * g.kh * g.kw;
  const int ncols = g.ho * g.wo;
  std::fill(cols, cols + static_cast<size_t>(patch) * ncols, 0.0);
  for (int c = 0; c < g.ci; ++c)
    for (int a = 0; a < g.kh; ++a)
      for (int b = 0; b < g.kw; ++b) {
        const int prow = (c * g.kh + a) * g.kw + b;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride + a - g.pad;
          if (iy < 0 || iy >= g.hi) continue;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride + b - g.pad;
            if (ix < 0 || ix >= g.wi) continue;
            cols[static_cast<size_t>(prow) * ncols + oy * g.wo + ox] =
                img[(static_cast<size_t>(c) * g.hi + iy) * g.wi + ix];
          }
        }
      }
}

// scatter-add transpose of im2col
void col2im(const double* cols, const ConvGeom& g, double* img) {
  const int ncols = g.ho * g.wo;
  for (int c = 0; c < g.ci; ++c)
    for (int a = 0; a < g.kh; ++a)
      for (int b = 0; b < g.kw; ++b) {
        const int prow = (c * g.kh + a) * g.kw + b;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride + a - g.pad;
          if (iy < 0 || iy >= g.hi) continue;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride + b - g.pad;
            if (ix < 0 || ix >= g.wi) continue;
            img[(static_cast<size_t>(c) * g.hi + iy) * g.wi + ix] +=
                cols[static_cast<size_t>(prow) * ncols + oy * g.wo + ox];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad) {
  if (x.shape().ndim() != 3 || w.shape().ndim() != 4)
    throw ValidationError("conv2d: expected x [C,H,W], w [Co,Ci,kh,kw]");
  const int ci = x.shape()[0], hi = x.shape()[1], wi = x.shape()[2];
  const int co = w.shape()[0], wci = w.shape()[1], kh = w.shape()[2],
            kw = w.shape()[3];
  if (wci != ci) throw ValidationError("conv2d: channel mismatch");
  if (b.numel() != co) throw ValidationError("conv2d: bias mismatch");
  const int ho = (hi + 2 * pad - kh) / stride + 1;
  const int wo = (wi + 2 * pad - kw) / stride + 1;
  const ConvGeom g{ci, hi, wi, kh, kw, stride, pad, ho, wo};
  const int patch = ci * kh * kw;
  const int ncols = ho * wo;

  auto cols = std::make_shared<std::vector<double>>(
      static_cast<size_t>(patch) * ncols);
  im2col(x.data().data(), g, cols->data());

  std::vector<double> out(static_cast<size_t>(co) * ncols);
  {
    ECMap W(w.data().data(), co, patch);
    ECMap C(cols->data(), patch, ncols);
    EMap O(out.data(), co, ncols);
    O.noalias() = W * C;
  }
  for (int c = 0; c < co; ++c) {
    const double bv = b.data()[c];
    for (int i = 0; i < ncols; ++i) out[static_cast<size_t>(c) * ncols + i] += bv;
  }

  auto n = make_node({co, ho, wo}, std::move(out));
  if (record({&x, &w, &b})) {
    n->requires_grad = true;
    n->parents = {x.node(), w.node(), b.node()};
    Node* self = n.get();
    auto px = x.node(), pw = w.node(), pb = b.node();
    n->backward = [self, px, pw, pb, g, cols, co, patch, ncols]() {
      ECMap G(self->grad.data(), co, ncols);
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (int c = 0; c < co; ++c) pb->grad[c] += G.row(c).sum();
      }
      if (pw->requires_grad) {
        pw->ensure_grad();
        ECMap C(cols->data(), patch, ncols);
        EMap GW(pw->grad.data(), co, patch);
        GW.noalias() += G * C.transpose();
      }
      if (px->requires_grad) {
        px->ensure_grad();
        ECMap W(pw->value.data(), co, patch);
        std::vector<double> gcols(static_cast<size_t>(patch) * ncols);
        EMap GC(gcols.data(), patch, ncols);
        GC.noalias() = W.transpose() * G;
        col2im(gcols.data(), g, px->grad.data());
      }
    };
  }
  return Tensor(n);
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b,
                        int stride, int pad) {
  if (x.shape().ndim() != 3 || w.shape().ndim() != 4)
    throw ValidationError("conv_transpose2d: expected x [C,H,W], w [Ci,Co,kh,kw]");
  const int ci = x.shape()[0], hi = x.shape()[1], wi = x.shape()[2];
  const int wci = w.shape()[0], co = w.shape()[1], kh = w.shape()[2],
            kw = w.shape()[3];
  if (wci != ci) throw ValidationError("conv_transpose2d: channel mismatch");
  if (b.numel() != co) throw ValidationError("conv_transpose2d: bias mismatch");
  const int ho = (hi - 1) * stride + kh - 2 * pad;
  const int wo = (wi - 1) * stride + kw - 2 * pad;
  // Geometry of the mirror conv: image = output map, columns = input grid.
  const ConvGeom g{co, ho, wo, kh, kw, stride, pad, hi, wi};
  const int patch = co * kh * kw;
  const int ncols = hi * wi;

  std::vector<double> gcols(static_cast<size_t>(patch) * ncols);
  {
    ECMap W(w.data().data(), ci, patch);
    ECMap X(x.data().data(), ci, ncols);
    EMap GC(gcols.data(), patch, ncols);
    GC.noalias() = W.transpose() * X;
  }
  std::vector<double> out(static_cast<size_t>(co) * ho * wo, 0.0);
  col2im(gcols.data(), g, out.data());
  for (int c = 0; c < co; ++c) {
    const double bv = b.data()[c];
    double* o = out.data() + static_cast<size_t>(c) * ho * wo;
    for (int i = 0; i < ho * wo; ++i) o[i] += bv;
  }

  auto n = make_node({co, ho, wo}, std::move(out));
  if (record({&x, &w, &b})) {
    n->requires_grad = true;
    n->parents = {x.node(), w.node(), b.node()};
    Node* self = n.get();
    auto px = x.node(), pw = w.node(), pb = b.node();
    n->backward = [self, px, pw, pb, g, ci, co, patch, ncols, ho, wo]() {
      // dCols = im2col(dY); dX = W @ dCols; dW = X @ dCols^T
      std::vector<double> dcols(static_cast<size_t>(patch) * ncols);
      im2col(self->grad.data(), g, dcols.data());
      ECMap DC(dcols.data(), patch, ncols);
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (int c = 0; c < co; ++c) {
          const double* sg = self->grad.data() + static_cast<size_t>(c) * ho * wo;
          double s = 0;
          for (int i = 0; i < ho * wo; ++i) s += sg[i];
          pb->grad[c] += s;
        }
      }
      if (px->requires_grad) {
        px->ensure_grad();
        ECMap W(pw->value.data(), ci, patch);
        EMap GX(px->grad.data(), ci, ncols);
        GX.noalias() += W * DC;
      }
      if (pw->requires_grad) {
        pw->ensure_grad();
        ECMap X(px->value.data(), ci, ncols);
        EMap GW(pw->grad.data(), ci, patch);
        GW.noalias() += X * DC.transpose();
      }
    };
  }
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// embedding
// ---------------------------------------------------------------------------

Tensor gather_rows(const Tensor& table, const std::vector<int>& indices) {
  check_2d(table, "gather_rows");
  const int v = table.shape()[0], d = table.shape()[1];
  for (int i : indices)
    if (i < 0 || i >= v) throw ValidationError("gather_rows: index out of range");
  const int n_rows = static_cast<int>(indices.size());
  std::vector<double> out(static_cast<size_t>(n_rows) * d);
  for (int r = 0; r < n_rows; ++r)
    std::copy(table.data().begin() + static_cast<size_t>(indices[r]) * d,
              table.data().begin() + static_cast<size_t>(indices[r] + 1) * d,
              out.begin() + static_cast<size_t>(r) * d);
  auto n = make_node({n_rows, d}, std::move(out));
  if (record({&table})) {
    n->requires_grad = true;
    n->parents = {table.node()};
    Node* self = n.get();
    auto pt = table.node();
    auto idx = indices;
    n->backward = [self, pt, idx, d]() {
      if (!pt->requires_grad) return;
      pt->ensure_grad();
      for (size_t r = 0; r < idx.size(); ++r)
        for (int c = 0; c < d; ++c)
          pt->grad[static_cast<size_t>(idx[r]) * d + c] += self->grad[r * d + c];
    };
  }
  return Tensor(n);
}

}  // namespace garfont
