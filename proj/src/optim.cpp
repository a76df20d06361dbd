#include "mvcond/optim.hpp"

#include <cmath>

#include "mvcond/errors.hpp"

namespace mvcond {

void adam_step(const std::vector<Parameter>& params, OptimizerState& state) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient in parameter " + p.name);
    }
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    Tensor t = p.tensor;
    auto& mom = state.moments[p.name];
    const size_t n = static_cast<size_t>(t.numel());
    if (mom.m.size() != n) {
      mom.m.assign(n, 0.0);
      mom.v.assign(n, 0.0);
    }
    auto g = t.grad();
    auto w = t.mutable_data();
    for (size_t i = 0; i < n; ++i) {
      mom.m[i] = static_cast<float>(state.beta1 * mom.m[i] + (1.0 - state.beta1) * g[i]);
      mom.v[i] = static_cast<float>(state.beta2 * mom.v[i] + (1.0 - state.beta2) * g[i] * g[i]);
      const double mhat = mom.m[i] / bc1;
      const double vhat = mom.v[i] / bc2;
      w[i] = static_cast<float>(w[i] - state.lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

}  // namespace mvcond
