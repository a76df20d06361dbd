#pragma once

// Named parameter registry shared by all learned modules.

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "mvcond/tensor.hpp"

namespace mvcond {

struct Parameter {
  std::string name;
  Tensor tensor;
};

class ParameterStore {
 public:
  // Registers a trainable tensor; names must be unique and nonempty.
  Tensor& add(const std::string& name, Tensor tensor);
  bool contains(const std::string& name) const;
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;

  std::vector<Parameter> parameters() const;
  std::vector<Parameter> parameters_with_prefix(const std::string& prefix) const;
  size_t size() const { return order_.size(); }
  int64_t count_scalars() const;

  void zero_grad();

 private:
  std::map<std::string, Tensor> tensors_;
  std::vector<std::string> order_;
};

// Weight initializers. All draw from the caller's engine so construction is seed-deterministic.
Tensor init_uniform(Shape shape, double bound, std::mt19937_64& rng);
// U(-1/sqrt(fan_in), 1/sqrt(fan_in))
Tensor init_fan_in(Shape shape, int64_t fan_in, std::mt19937_64& rng);

// Rounds every element to the nearest float32 value.
void round_to_float(std::span<double> values);

}  // namespace mvcond
