#include "garfont/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "garfont/common.hpp"

namespace garfont::nn {

double GradCheckReport::worst() const {
  double w = 0;
  for (const auto& it : items) w = std::max(w, it.max_rel_err);
  return w;
}

GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                           ParamStore& params, double eps, double tolerance,
                           Rng& rng, int coords_per_param) {
  if (eps <= 0) throw ValidationError("grad_check: eps must be positive");
  params.zero_grad();
  Tensor loss = loss_fn();
  if (!std::isfinite(loss.item()))
    throw DiagnosticError("grad_check: loss is not finite");
  loss.backward();

  // Snapshot analytic gradients before the numeric probes touch anything.
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.items().size());
  for (auto& [name, p] : params.items())
    analytic.push_back(p.requires_grad() && p.has_grad()
                           ? p.grad()
                           : std::vector<double>(p.numel(), 0.0));

  GradCheckReport report;
  report.tolerance = tolerance;
  for (size_t pi = 0; pi < params.items().size(); ++pi) {
    auto& [name, p] = params.items()[pi];
    if (!p.requires_grad()) continue;
    const int64_t n = p.numel();
    std::vector<int64_t> coords;
    if (n <= coords_per_param) {
      coords.resize(n);
      for (int64_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      for (int i = 0; i < coords_per_param; ++i)
        coords.push_back(rng.uniform_int(n));
    }
    double max_rel = 0;
    for (int64_t c : coords) {
      const double orig = p.data()[c];
      double fp, fm;
      {
        NoGradGuard ng;
        p.data()[c] = orig + eps;
        fp = loss_fn().item();
        p.data()[c] = orig - eps;
        fm = loss_fn().item();
        p.data()[c] = orig;
      }
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw DiagnosticError("grad_check: perturbed loss is not finite");
      const double fd = (fp - fm) / (2.0 * eps);
      const double g = analytic[pi][c];
      const double denom = std::max({std::abs(g), std::abs(fd), 1e-6});
      max_rel = std::max(max_rel, std::abs(g - fd) / denom);
    }
    report.items.push_back({name, max_rel});
  }
  report.pass = true;
  for (const auto& it : report.items)
    if (it.max_rel_err > tolerance) report.pass = false;
  params.zero_grad();
  return report;
}

}  // namespace garfont::nn
