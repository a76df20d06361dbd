#include "mvcond/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mvcond/errors.hpp"

namespace mvcond {

double grad_check(const ScalarFn& f, std::vector<Tensor> inputs, const GradCheckOptions& opts) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor out = f(inputs);
  if (out.numel() != 1) throw ContractError("grad_check: function must be scalar-valued, got " + shape_str(out.shape()));
  if (!out.requires_grad()) throw ContractError("grad_check: output does not depend on any input");
  out.backward();

  std::mt19937_64 rng(opts.seed);
  double worst = 0.0;
  NoGradGuard no_grad;
  for (auto& t : inputs) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    std::vector<int64_t> coords(static_cast<size_t>(t.numel()));
    std::iota(coords.begin(), coords.end(), 0);
    if (opts.max_coords_per_input > 0 && t.numel() > opts.max_coords_per_input) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<size_t>(opts.max_coords_per_input));
    }
    auto values = t.mutable_data();
    for (int64_t c : coords) {
      const size_t i = static_cast<size_t>(c);
      const double orig = values[i];
      values[i] = orig + opts.eps;
      const double plus = f(inputs).item();
      values[i] = orig - opts.eps;
      const double minus = f(inputs).item();
      values[i] = orig;
      const double numeric = (plus - minus) / (2.0 * opts.eps);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
  }
  return worst;
}

}  // namespace mvcond
