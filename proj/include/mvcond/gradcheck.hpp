#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "mvcond/tensor.hpp"

namespace mvcond {

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheckOptions {
  double eps = 1e-6;
  // 0 checks every coordinate; otherwise a seeded random subset per input.
  int64_t max_coords_per_input = 0;
  uint64_t seed = 0;
};

// Max over checked coordinates of |analytic - central difference| / max(1, |analytic|).
// Inputs are perturbed in place and restored. `f` must return a single element.
double grad_check(const ScalarFn& f, std::vector<Tensor> inputs, const GradCheckOptions& opts = {});

}  // namespace mvcond
