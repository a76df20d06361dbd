#pragma once

// Small parameterized building blocks. Each layer holds handles to tensors
// registered in a ParameterStore under "<name>.<field>".

#include <random>
#include <string>

#include "mvcond/module.hpp"
#include "mvcond/tensor.hpp"

namespace mvcond {

enum class Init { kFanIn, kZero };

struct Linear {
  Tensor weight;  // [Din, Dout]
  Tensor bias;    // [Dout]

  static Linear make(ParameterStore& store, const std::string& name, int64_t din, int64_t dout, std::mt19937_64& rng,
                     Init init = Init::kFanIn, double gain = 1.0);
  Tensor operator()(const Tensor& x) const;
};

struct Conv {
  Tensor kernel;  // [Cout, Cin, k, k]
  Tensor bias;    // [Cout]
  int stride = 1;

  static Conv make(ParameterStore& store, const std::string& name, int64_t cin, int64_t cout, int k, int stride,
                   std::mt19937_64& rng, Init init = Init::kFanIn);
  Tensor operator()(const Tensor& x) const;
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  static LayerNorm make(ParameterStore& store, const std::string& name, int64_t dim);
  Tensor operator()(const Tensor& x, int axis) const;
};

// Pre-norm single-head attention with a residual connection over tokens
// [B, N, D]. Self-attention when `context` is the input itself.
struct AttentionBlock {
  LayerNorm norm;
  Linear q, k, v, out;

  static AttentionBlock make(ParameterStore& store, const std::string& name, int64_t dim, int64_t context_dim,
                             std::mt19937_64& rng);
  Tensor operator()(const Tensor& x, const Tensor& context) const;
};

// Pre-norm two-layer SiLU MLP with a residual connection.
struct MlpBlock {
  LayerNorm norm;
  Linear fc1, fc2;

  static MlpBlock make(ParameterStore& store, const std::string& name, int64_t dim, int64_t hidden, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const;
};

}  // namespace mvcond
