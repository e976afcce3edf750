#pragma once

#include <functional>
#include <string>
#include <vector>

#include "garfont/nn.hpp"
#include "garfont/rng.hpp"
#include "garfont/tensor.hpp"

namespace garfont::nn {

struct GradCheckReport {
  struct Item {
    std::string name;
    double max_rel_err = 0.0;
  };
  std::vector<Item> items;
  double tolerance = 0.0;
  bool pass = false;
  double worst() const;
};

// Compares reverse-mode gradients of `loss_fn` against central finite
// differences on a random subsample of coordinates per parameter (all
// coordinates when a parameter has fewer than `coords_per_param`).
//
// `loss_fn` must rebuild the graph from the current parameter values and be
// deterministic. Relative error uses max(|g|, |fd|, 1e-6) as denominator so
// near-zero gradients compare absolutely.
GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                           ParamStore& params, double eps, double tolerance,
                           Rng& rng, int coords_per_param = 64);

}  // namespace garfont::nn
