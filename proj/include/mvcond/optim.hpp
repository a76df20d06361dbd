#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mvcond/module.hpp"

namespace mvcond {

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
};

struct OptimizerState {
  std::map<std::string, AdamMoments> moments;
  int64_t step = 0;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One Adam update over `params` using their accumulated gradients. Parameters
// without a gradient buffer are skipped. Updated parameters and moments are
// rounded to float32 so a checkpoint round trip loses nothing.
// Throws TrainingError naming the parameter on a non-finite gradient.
void adam_step(const std::vector<Parameter>& params, OptimizerState& state);

}  // namespace mvcond
