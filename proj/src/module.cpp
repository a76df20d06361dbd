#include "mvcond/module.hpp"

#include <cmath>

#include "mvcond/errors.hpp"

namespace mvcond {

Tensor& ParameterStore::add(const std::string& name, Tensor tensor) {
  if (name.empty()) throw ContractError("parameter name must be nonempty");
  if (tensors_.count(name)) throw ContractError("duplicate parameter name: " + name);
  tensor.set_requires_grad(true);
  order_.push_back(name);
  return tensors_.emplace(name, std::move(tensor)).first->second;
}

bool ParameterStore::contains(const std::string& name) const { return tensors_.count(name) != 0; }

Tensor& ParameterStore::get(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ContractError("unknown parameter: " + name);
  return it->second;
}

const Tensor& ParameterStore::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ContractError("unknown parameter: " + name);
  return it->second;
}

std::vector<Parameter> ParameterStore::parameters() const { return parameters_with_prefix(""); }

std::vector<Parameter> ParameterStore::parameters_with_prefix(const std::string& prefix) const {
  std::vector<Parameter> out;
  for (const auto& name : order_) {
    if (name.compare(0, prefix.size(), prefix) == 0) out.push_back({name, tensors_.at(name)});
  }
  return out;
}

int64_t ParameterStore::count_scalars() const {
  int64_t n = 0;
  for (const auto& [name, t] : tensors_) n += t.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [name, t] : tensors_) t.zero_grad();
}

Tensor init_uniform(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(static_cast<size_t>(numel_of(shape)));
  for (double& x : v) x = static_cast<double>(static_cast<float>(dist(rng)));
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor init_fan_in(Shape shape, int64_t fan_in, std::mt19937_64& rng) {
  return init_uniform(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

void round_to_float(std::span<double> values) {
  for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace mvcond
