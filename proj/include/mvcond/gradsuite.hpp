#pragma once

// Randomized finite-difference gradient suite over every differentiable op,
// the learned blocks, and the full encode -> lift -> render -> inject ->
// denoise chain. Runs in 64-bit with checked numerics.

#include <cstdint>
#include <string>
#include <vector>

namespace mvcond {

struct GradCase {
  std::string name;
  double error = 0.0;
  bool passed = false;
};

struct GradSuiteOptions {
  uint64_t seed = 0;
  int trials_per_op = 4;
  double tolerance = 1e-4;
  // Adds a case whose backward is deliberately wrong (negative control).
  bool inject_bug = false;
};

struct GradSuiteResult {
  std::vector<GradCase> cases;
  double max_error = 0.0;
  double seconds = 0.0;
  bool passed() const;
};

GradSuiteResult run_grad_suite(const GradSuiteOptions& opts = {});

}  // namespace mvcond
