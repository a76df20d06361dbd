#include "mvcond/layers.hpp"

#include <cmath>

#include "mvcond/ops.hpp"

namespace mvcond {

Linear Linear::make(ParameterStore& store, const std::string& name, int64_t din, int64_t dout, std::mt19937_64& rng,
                    Init init, double gain) {
  Linear l;
  Tensor w = init == Init::kZero ? Tensor::zeros({din, dout}) : init_uniform({din, dout}, gain / std::sqrt(double(din)), rng);
  l.weight = store.add(name + ".weight", w);
  l.bias = store.add(name + ".bias", Tensor::zeros({dout}));
  return l;
}

Tensor Linear::operator()(const Tensor& x) const { return linear(x, weight, bias); }

Conv Conv::make(ParameterStore& store, const std::string& name, int64_t cin, int64_t cout, int k, int stride,
                std::mt19937_64& rng, Init init) {
  Conv c;
  Shape shape{cout, cin, k, k};
  c.kernel = store.add(name + ".kernel", init == Init::kZero ? Tensor::zeros(shape) : init_fan_in(shape, cin * k * k, rng));
  c.bias = store.add(name + ".bias", Tensor::zeros({cout}));
  c.stride = stride;
  return c;
}

Tensor Conv::operator()(const Tensor& x) const {
  return conv2d(x, kernel, bias, stride, static_cast<int>(kernel.size(2) / 2));
}

LayerNorm LayerNorm::make(ParameterStore& store, const std::string& name, int64_t dim) {
  LayerNorm n;
  n.gain = store.add(name + ".gain", Tensor::full({dim}, 1.0));
  n.bias = store.add(name + ".bias", Tensor::zeros({dim}));
  return n;
}

Tensor LayerNorm::operator()(const Tensor& x, int axis) const { return layer_norm(x, gain, bias, axis); }

AttentionBlock AttentionBlock::make(ParameterStore& store, const std::string& name, int64_t dim, int64_t context_dim,
                                    std::mt19937_64& rng) {
  AttentionBlock b;
  b.norm = LayerNorm::make(store, name + ".norm", dim);
  b.q = Linear::make(store, name + ".q", dim, dim, rng);
  b.k = Linear::make(store, name + ".k", context_dim, dim, rng);
  b.v = Linear::make(store, name + ".v", context_dim, dim, rng);
  b.out = Linear::make(store, name + ".out", dim, dim, rng);
  return b;
}

Tensor AttentionBlock::operator()(const Tensor& x, const Tensor& context) const {
  const Tensor h = norm(x, -1);
  const Tensor ctx = context.node() == x.node() ? h : context;
  return add(x, out(attention(q(h), k(ctx), v(ctx))));
}

MlpBlock MlpBlock::make(ParameterStore& store, const std::string& name, int64_t dim, int64_t hidden, std::mt19937_64& rng) {
  MlpBlock b;
  b.norm = LayerNorm::make(store, name + ".norm", dim);
  b.fc1 = Linear::make(store, name + ".fc1", dim, hidden, rng);
  b.fc2 = Linear::make(store, name + ".fc2", hidden, dim, rng);
  return b;
}

Tensor MlpBlock::operator()(const Tensor& x) const { return add(x, fc2(silu(fc1(norm(x, -1))))); }

}  // namespace mvcond
