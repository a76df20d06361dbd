#pragma once

// Differentiable primitives. All shapes are explicit: the only broadcast is
// the bias add in linear/add_bias/add_channel_bias.

#include <vector>

#include "mvcond/tensor.hpp"

namespace mvcond {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

// x[..., D] + b[D]
Tensor add_bias(const Tensor& x, const Tensor& b);
// x[B, C, ...] + b[C]
Tensor add_channel_bias(const Tensor& x, const Tensor& b);
// x[B, C, ...] + b[B, C]
Tensor add_sample_channel_bias(const Tensor& x, const Tensor& b);

// y = x W + b over the last axis. x[..., Din], W[Din, Dout], b[Dout] (b may be undefined).
Tensor linear(const Tensor& x, const Tensor& W, const Tensor& b);

// Cross-correlation. x[B, C, H, W], k[Cout, C, kh, kw]; bias[Cout] optional.
Tensor conv2d(const Tensor& x, const Tensor& k, int stride, int pad);
Tensor conv2d(const Tensor& x, const Tensor& k, const Tensor& bias, int stride, int pad);

Tensor softmax(const Tensor& x, int axis);

// softmax(Q K^T / sqrt(D)) V with Q[B,Nq,D], K[B,Nk,D], V[B,Nk,Dv].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v);

// Normalizes along `axis`; gain and bias have length shape[axis].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, int axis, double eps = 1e-5);

Tensor silu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor square(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// sum((a - b)^2)
Tensor sum_squared_error(const Tensor& a, const Tensor& b);
// mean((a - b)^2)
Tensor mean_squared_error(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int64_t start, int64_t length);
// Cyclic shift: out[i] = x[(i - shift) mod n] along each axis.
Tensor roll(const Tensor& x, const std::vector<int64_t>& shifts, const std::vector<int>& axes);

// Bilinear resampling of x[B, C, H, W] with half-pixel centers and edge clamping.
Tensor resample_bilinear(const Tensor& x, int64_t out_h, int64_t out_w);
Tensor upsample_nearest(const Tensor& x, int factor);

}  // namespace mvcond
