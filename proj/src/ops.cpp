#include "mvcond/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Core>

#include "mvcond/errors.hpp"

namespace mvcond {

namespace {

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

ConstMatMap cmat(std::span<const double> d, int64_t rows, int64_t cols) { return ConstMatMap(d.data(), rows, cols); }
ConstMatMap cmat(const double* d, int64_t rows, int64_t cols) { return ConstMatMap(d, rows, cols); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

int normalize_axis(int axis, int rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw DimensionError(std::string(op) + ": axis out of range");
  return axis;
}

struct AxisSplit {
  int64_t outer, n, inner;
};

AxisSplit split_axis(const Shape& s, int axis) {
  AxisSplit r{1, s[static_cast<size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

void accumulate(Node& target, std::span<const double> g) {
  auto& buf = target.grad_buffer();
  for (size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return make_result(a.shape(), std::move(out), {a, b}, [a, b](Node& self) {
    if (a.requires_grad()) accumulate(*a.node(), self.grad);
    if (b.requires_grad()) accumulate(*b.node(), self.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return make_result(a.shape(), std::move(out), {a, b}, [a, b](Node& self) {
    if (a.requires_grad()) accumulate(*a.node(), self.grad);
    if (b.requires_grad()) {
      auto& g = b.node()->grad_buffer();
      for (size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out(ad.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return make_result(a.shape(), std::move(out), {a, b}, [a, b](Node& self) {
    if (a.requires_grad()) {
      auto& g = a.node()->grad_buffer();
      auto bv = b.data();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (b.requires_grad()) {
      auto& g = b.node()->grad_buffer();
      auto av = a.data();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  auto ad = a.data();
  std::vector<double> out(ad.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * s;
  return make_result(a.shape(), std::move(out), {a}, [a, s](Node& self) {
    auto& g = a.node()->grad_buffer();
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  if (b.dim() != 1 || x.dim() < 1 || x.size(-1) != b.size(0)) {
    throw DimensionError("add_bias: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  }
  const int64_t d = b.size(0);
  std::vector<double> out(x.data().begin(), x.data().end());
  auto bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bd[i % static_cast<size_t>(d)];
  return make_result(x.shape(), std::move(out), {x, b}, [x, b, d](Node& self) {
    if (x.requires_grad()) accumulate(*x.node(), self.grad);
    if (b.requires_grad()) {
      auto& g = b.node()->grad_buffer();
      for (size_t i = 0; i < self.grad.size(); ++i) g[i % static_cast<size_t>(d)] += self.grad[i];
    }
  });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
  if (b.dim() != 1 || x.dim() < 2 || x.size(1) != b.size(0)) {
    throw DimensionError("add_channel_bias: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  }
  const auto sp = split_axis(x.shape(), 1);
  std::vector<double> out(x.data().begin(), x.data().end());
  auto bd = b.data();
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t c = 0; c < sp.n; ++c)
      for (int64_t i = 0; i < sp.inner; ++i) out[static_cast<size_t>((o * sp.n + c) * sp.inner + i)] += bd[static_cast<size_t>(c)];
  return make_result(x.shape(), std::move(out), {x, b}, [x, b, sp](Node& self) {
    if (x.requires_grad()) accumulate(*x.node(), self.grad);
    if (b.requires_grad()) {
      auto& g = b.node()->grad_buffer();
      for (int64_t o = 0; o < sp.outer; ++o)
        for (int64_t c = 0; c < sp.n; ++c) {
          double acc = 0.0;
          for (int64_t i = 0; i < sp.inner; ++i) acc += self.grad[static_cast<size_t>((o * sp.n + c) * sp.inner + i)];
          g[static_cast<size_t>(c)] += acc;
        }
    }
  });
}

Tensor add_sample_channel_bias(const Tensor& x, const Tensor& b) {
  if (b.dim() != 2 || x.dim() < 2 || x.size(0) != b.size(0) || x.size(1) != b.size(1)) {
    throw DimensionError("add_sample_channel_bias: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  }
  const auto sp = split_axis(x.shape(), 1);  // outer == batch
  std::vector<double> out(x.data().begin(), x.data().end());
  auto bd = b.data();
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t c = 0; c < sp.n; ++c)
      for (int64_t i = 0; i < sp.inner; ++i) out[static_cast<size_t>((o * sp.n + c) * sp.inner + i)] += bd[static_cast<size_t>(o * sp.n + c)];
  return make_result(x.shape(), std::move(out), {x, b}, [x, b, sp](Node& self) {
    if (x.requires_grad()) accumulate(*x.node(), self.grad);
    if (b.requires_grad()) {
      auto& g = b.node()->grad_buffer();
      for (int64_t o = 0; o < sp.outer; ++o)
        for (int64_t c = 0; c < sp.n; ++c) {
          double acc = 0.0;
          for (int64_t i = 0; i < sp.inner; ++i) acc += self.grad[static_cast<size_t>((o * sp.n + c) * sp.inner + i)];
          g[static_cast<size_t>(o * sp.n + c)] += acc;
        }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& W, const Tensor& b) {
  if (x.dim() < 1 || W.dim() != 2 || x.size(-1) != W.size(0)) {
    throw DimensionError("linear: x " + shape_str(x.shape()) + " vs W " + shape_str(W.shape()));
  }
  const int64_t din = W.size(0), dout = W.size(1);
  if (b.defined() && (b.dim() != 1 || b.size(0) != dout)) {
    throw DimensionError("linear: bias " + shape_str(b.shape()) + " for output width " + std::to_string(dout));
  }
  const int64_t rows = x.numel() / din;
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  std::vector<double> out(static_cast<size_t>(rows * dout), 0.0);
  MatMap Y(out.data(), rows, dout);
  Y.noalias() = cmat(x.data(), rows, din) * cmat(W.data(), din, dout);
  if (b.defined()) Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data().data(), dout);
  std::vector<Tensor> parents{x, W};
  if (b.defined()) parents.push_back(b);
  return make_result(std::move(out_shape), std::move(out), parents, [x, W, b, rows, din, dout](Node& self) {
    const ConstMatMap gy(self.grad.data(), rows, dout);
    if (x.requires_grad()) {
      MatMap gx(x.node()->grad_buffer().data(), rows, din);
      gx.noalias() += gy * cmat(W.data(), din, dout).transpose();
    }
    if (W.requires_grad()) {
      MatMap gw(W.node()->grad_buffer().data(), din, dout);
      gw.noalias() += cmat(x.data(), rows, din).transpose() * gy;
    }
    if (b.defined() && b.requires_grad()) {
      Eigen::Map<Eigen::RowVectorXd> gb(b.node()->grad_buffer().data(), dout);
      gb += gy.colwise().sum();
    }
  });
}

namespace {

struct ConvGeom {
  int64_t B, C, H, W, Co, kh, kw, Ho, Wo;
  int stride, pad;
};

// Valid output range [lo, hi) for kernel offset k so that o*stride + k - pad is inside [0, n).
inline void valid_range(int64_t k, int64_t n, int64_t out, int stride, int pad, int64_t& lo, int64_t& hi) {
  lo = 0;
  while (lo < out && lo * stride + k - pad < 0) ++lo;
  hi = out;
  while (hi > lo && (hi - 1) * stride + k - pad >= n) --hi;
}

// Patch matrix [C*kh*kw, Ho*Wo] of one image, zero outside the input.
void im2col(const ConvGeom& g, const double* x, double* cols) {
  const int64_t P = g.Ho * g.Wo;
  for (int64_t ci = 0; ci < g.C; ++ci)
    for (int64_t ky = 0; ky < g.kh; ++ky)
      for (int64_t kx = 0; kx < g.kw; ++kx) {
        double* row = cols + ((ci * g.kh + ky) * g.kw + kx) * P;
        std::fill(row, row + P, 0.0);
        int64_t oy0, oy1, ox0, ox1;
        valid_range(ky, g.H, g.Ho, g.stride, g.pad, oy0, oy1);
        valid_range(kx, g.W, g.Wo, g.stride, g.pad, ox0, ox1);
        for (int64_t oy = oy0; oy < oy1; ++oy) {
          const double* src = x + (ci * g.H + oy * g.stride + ky - g.pad) * g.W + kx - g.pad;
          for (int64_t ox = ox0; ox < ox1; ++ox) row[oy * g.Wo + ox] = src[ox * g.stride];
        }
      }
}

void col2im_add(const ConvGeom& g, const double* cols, double* x) {
  const int64_t P = g.Ho * g.Wo;
  for (int64_t ci = 0; ci < g.C; ++ci)
    for (int64_t ky = 0; ky < g.kh; ++ky)
      for (int64_t kx = 0; kx < g.kw; ++kx) {
        const double* row = cols + ((ci * g.kh + ky) * g.kw + kx) * P;
        int64_t oy0, oy1, ox0, ox1;
        valid_range(ky, g.H, g.Ho, g.stride, g.pad, oy0, oy1);
        valid_range(kx, g.W, g.Wo, g.stride, g.pad, ox0, ox1);
        for (int64_t oy = oy0; oy < oy1; ++oy) {
          double* dst = x + (ci * g.H + oy * g.stride + ky - g.pad) * g.W + kx - g.pad;
          for (int64_t ox = ox0; ox < ox1; ++ox) dst[ox * g.stride] += row[oy * g.Wo + ox];
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& k, int stride, int pad) { return conv2d(x, k, Tensor(), stride, pad); }

Tensor conv2d(const Tensor& x, const Tensor& k, const Tensor& bias, int stride, int pad) {
  if (x.dim() != 4 || k.dim() != 4) throw DimensionError("conv2d: expects 4-d input and kernel");
  if (x.size(1) != k.size(1)) {
    throw DimensionError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs kernel " + shape_str(k.shape()));
  }
  if (stride < 1 || pad < 0) throw DimensionError("conv2d: invalid stride/pad");
  ConvGeom g{x.size(0), x.size(1), x.size(2), x.size(3), k.size(0), k.size(2), k.size(3), 0, 0, stride, pad};
  g.Ho = (g.H + 2 * pad - g.kh) / stride + 1;
  g.Wo = (g.W + 2 * pad - g.kw) / stride + 1;
  if (g.Ho <= 0 || g.Wo <= 0) throw DimensionError("conv2d: empty output");
  if (bias.defined() && (bias.dim() != 1 || bias.size(0) != g.Co)) throw DimensionError("conv2d: bias shape");

  std::vector<double> out(static_cast<size_t>(g.B * g.Co * g.Ho * g.Wo), 0.0);
  auto xd = x.data();
  auto kd = k.data();
  for (int64_t b = 0; b < g.B; ++b)
    for (int64_t co = 0; co < g.Co; ++co) {
      double* o = out.data() + (b * g.Co + co) * g.Ho * g.Wo;
      for (int64_t ci = 0; ci < g.C; ++ci) {
        const double* xi = xd.data() + (b * g.C + ci) * g.H * g.W;
        for (int64_t ky = 0; ky < g.kh; ++ky) {
          int64_t oy0, oy1;
          valid_range(ky, g.H, g.Ho, stride, pad, oy0, oy1);
          for (int64_t kx = 0; kx < g.kw; ++kx) {
            const double w = kd[static_cast<size_t>(((co * g.C + ci) * g.kh + ky) * g.kw + kx)];
            int64_t ox0, ox1;
            valid_range(kx, g.W, g.Wo, stride, pad, ox0, ox1);
            for (int64_t oy = oy0; oy < oy1; ++oy) {
              const double* row = xi + (oy * stride + ky - pad) * g.W + kx - pad;
              double* orow = o + oy * g.Wo;
              for (int64_t ox = ox0; ox < ox1; ++ox) orow[ox] += w * row[ox * stride];
            }
          }
        }
      }
      if (bias.defined()) {
        const double bv = bias.data()[static_cast<size_t>(co)];
        for (int64_t i = 0; i < g.Ho * g.Wo; ++i) o[i] += bv;
      }
    }

  std::vector<Tensor> parents{x, k};
  if (bias.defined()) parents.push_back(bias);
  return make_result({g.B, g.Co, g.Ho, g.Wo}, std::move(out), parents, [x, k, bias, g](Node& self) {
    const int64_t K = g.C * g.kh * g.kw, P = g.Ho * g.Wo;
    const double* xd = x.data().data();
    const ConstMatMap kmat(k.data().data(), g.Co, K);
    double* gx = x.requires_grad() ? x.node()->grad_buffer().data() : nullptr;
    double* gk = k.requires_grad() ? k.node()->grad_buffer().data() : nullptr;
    std::vector<double> cols(static_cast<size_t>(K * P));
    for (int64_t b = 0; b < g.B; ++b) {
      const ConstMatMap go(self.grad.data() + b * g.Co * P, g.Co, P);
      if (gk) {
        im2col(g, xd + b * g.C * g.H * g.W, cols.data());
        MatMap(gk, g.Co, K).noalias() += go * ConstMatMap(cols.data(), K, P).transpose();
      }
      if (gx) {
        MatMap gcols(cols.data(), K, P);
        gcols.noalias() = kmat.transpose() * go;
        col2im_add(g, cols.data(), gx + b * g.C * g.H * g.W);
      }
    }
    if (bias.defined() && bias.requires_grad()) {
      auto& gb = bias.node()->grad_buffer();
      for (int64_t b = 0; b < g.B; ++b)
        for (int64_t co = 0; co < g.Co; ++co) {
          const double* o = self.grad.data() + (b * g.Co + co) * P;
          double acc = 0.0;
          for (int64_t i = 0; i < P; ++i) acc += o[i];
          gb[static_cast<size_t>(co)] += acc;
        }
    }
  });
}

Tensor softmax(const Tensor& x, int axis) {
  axis = normalize_axis(axis, x.dim(), "softmax");
  const auto sp = split_axis(x.shape(), axis);
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t i = 0; i < sp.inner; ++i) {
      const int64_t base = o * sp.n * sp.inner + i;
      double mx = -INFINITY;
      for (int64_t j = 0; j < sp.n; ++j) mx = std::max(mx, xd[static_cast<size_t>(base + j * sp.inner)]);
      double z = 0.0;
      for (int64_t j = 0; j < sp.n; ++j) {
        const size_t idx = static_cast<size_t>(base + j * sp.inner);
        out[idx] = std::exp(xd[idx] - mx);
        z += out[idx];
      }
      for (int64_t j = 0; j < sp.n; ++j) out[static_cast<size_t>(base + j * sp.inner)] /= z;
    }
  return make_result(x.shape(), std::move(out), {x}, [x, sp](Node& self) {
    const auto& y = self.value;
    auto& gx = x.node()->grad_buffer();
    for (int64_t o = 0; o < sp.outer; ++o)
      for (int64_t i = 0; i < sp.inner; ++i) {
        const int64_t base = o * sp.n * sp.inner + i;
        double dot = 0.0;
        for (int64_t j = 0; j < sp.n; ++j) {
          const size_t idx = static_cast<size_t>(base + j * sp.inner);
          dot += self.grad[idx] * y[idx];
        }
        for (int64_t j = 0; j < sp.n; ++j) {
          const size_t idx = static_cast<size_t>(base + j * sp.inner);
          gx[idx] += y[idx] * (self.grad[idx] - dot);
        }
      }
  });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.dim() != 3 || k.dim() != 3 || v.dim() != 3) throw DimensionError("attention: expects rank-3 Q, K, V");
  const int64_t B = q.size(0), Nq = q.size(1), D = q.size(2);
  const int64_t Nk = k.size(1), Dv = v.size(2);
  if (k.size(0) != B || v.size(0) != B || k.size(2) != D || v.size(1) != Nk) {
    throw DimensionError("attention: Q " + shape_str(q.shape()) + " K " + shape_str(k.shape()) + " V " +
                         shape_str(v.shape()));
  }
  const double inv = 1.0 / std::sqrt(static_cast<double>(D));
  const double* qd = q.data().data();
  const double* kd = k.data().data();
  const double* vd = v.data().data();
  auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(B * Nq * Nk));
  std::vector<double> out(static_cast<size_t>(B * Nq * Dv), 0.0);
  for (int64_t b = 0; b < B; ++b) {
    MatMap P(probs->data() + b * Nq * Nk, Nq, Nk);
    P.noalias() = cmat(qd + b * Nq * D, Nq, D) * cmat(kd + b * Nk * D, Nk, D).transpose();
    P *= inv;
    for (int64_t i = 0; i < Nq; ++i) {
      auto row = P.row(i);
      row = (row.array() - row.maxCoeff()).exp().matrix();
      row /= row.sum();
    }
    MatMap(out.data() + b * Nq * Dv, Nq, Dv).noalias() = P * cmat(vd + b * Nk * Dv, Nk, Dv);
  }
  return make_result({B, Nq, Dv}, std::move(out), {q, k, v}, [q, k, v, probs, B, Nq, Nk, D, Dv, inv](Node& self) {
    const double* qd = q.data().data();
    const double* kd = k.data().data();
    const double* vd = v.data().data();
    double* gq = q.requires_grad() ? q.node()->grad_buffer().data() : nullptr;
    double* gk = k.requires_grad() ? k.node()->grad_buffer().data() : nullptr;
    double* gv = v.requires_grad() ? v.node()->grad_buffer().data() : nullptr;
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> dS(Nq, Nk);
    for (int64_t b = 0; b < B; ++b) {
      const ConstMatMap P(probs->data() + b * Nq * Nk, Nq, Nk);
      const ConstMatMap go(self.grad.data() + b * Nq * Dv, Nq, Dv);
      if (gv) MatMap(gv + b * Nk * Dv, Nk, Dv).noalias() += P.transpose() * go;
      if (!gq && !gk) continue;
      dS.noalias() = go * cmat(vd + b * Nk * Dv, Nk, Dv).transpose();
      const Eigen::VectorXd dot = (dS.array() * P.array()).rowwise().sum();
      dS = (P.array() * (dS.colwise() - dot).array() * inv).matrix();
      if (gq) MatMap(gq + b * Nq * D, Nq, D).noalias() += dS * cmat(kd + b * Nk * D, Nk, D);
      if (gk) MatMap(gk + b * Nk * D, Nk, D).noalias() += dS.transpose() * cmat(qd + b * Nq * D, Nq, D);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, int axis, double eps) {
  axis = normalize_axis(axis, x.dim(), "layer_norm");
  const auto sp = split_axis(x.shape(), axis);
  if (gain.dim() != 1 || bias.dim() != 1 || gain.size(0) != sp.n || bias.size(0) != sp.n) {
    throw DimensionError("layer_norm: gain/bias must have length " + std::to_string(sp.n));
  }
  auto xd = x.data();
  auto gd = gain.data();
  auto bd = bias.data();
  std::vector<double> out(xd.size());
  auto xhat = std::make_shared<std::vector<double>>(xd.size());
  auto rstd = std::make_shared<std::vector<double>>(static_cast<size_t>(sp.outer * sp.inner));
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t i = 0; i < sp.inner; ++i) {
      const int64_t base = o * sp.n * sp.inner + i;
      double mu = 0.0;
      for (int64_t j = 0; j < sp.n; ++j) mu += xd[static_cast<size_t>(base + j * sp.inner)];
      mu /= static_cast<double>(sp.n);
      double var = 0.0;
      for (int64_t j = 0; j < sp.n; ++j) {
        const double d = xd[static_cast<size_t>(base + j * sp.inner)] - mu;
        var += d * d;
      }
      var /= static_cast<double>(sp.n);
      const double r = 1.0 / std::sqrt(var + eps);
      (*rstd)[static_cast<size_t>(o * sp.inner + i)] = r;
      for (int64_t j = 0; j < sp.n; ++j) {
        const size_t idx = static_cast<size_t>(base + j * sp.inner);
        const double h = (xd[idx] - mu) * r;
        (*xhat)[idx] = h;
        out[idx] = h * gd[static_cast<size_t>(j)] + bd[static_cast<size_t>(j)];
      }
    }
  return make_result(x.shape(), std::move(out), {x, gain, bias}, [x, gain, bias, sp, xhat, rstd](Node& self) {
    auto gd = gain.data();
    std::vector<double>* gx = x.requires_grad() ? &x.node()->grad_buffer() : nullptr;
    std::vector<double>* gg = gain.requires_grad() ? &gain.node()->grad_buffer() : nullptr;
    std::vector<double>* gb = bias.requires_grad() ? &bias.node()->grad_buffer() : nullptr;
    const double n = static_cast<double>(sp.n);
    for (int64_t o = 0; o < sp.outer; ++o)
      for (int64_t i = 0; i < sp.inner; ++i) {
        const int64_t base = o * sp.n * sp.inner + i;
        double m1 = 0.0, m2 = 0.0;
        for (int64_t j = 0; j < sp.n; ++j) {
          const size_t idx = static_cast<size_t>(base + j * sp.inner);
          const double dy = self.grad[idx];
          const double dh = dy * gd[static_cast<size_t>(j)];
          m1 += dh;
          m2 += dh * (*xhat)[idx];
          if (gg) (*gg)[static_cast<size_t>(j)] += dy * (*xhat)[idx];
          if (gb) (*gb)[static_cast<size_t>(j)] += dy;
        }
        if (!gx) continue;
        m1 /= n;
        m2 /= n;
        const double r = (*rstd)[static_cast<size_t>(o * sp.inner + i)];
        for (int64_t j = 0; j < sp.n; ++j) {
          const size_t idx = static_cast<size_t>(base + j * sp.inner);
          const double dh = self.grad[idx] * gd[static_cast<size_t>(j)];
          (*gx)[idx] += r * (dh - m1 - (*xhat)[idx] * m2);
        }
      }
  });
}

Tensor silu(const Tensor& x) {
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = xd[i] / (1.0 + std::exp(-xd[i]));
  return make_result(x.shape(), std::move(out), {x}, [x](Node& self) {
    auto xd = x.data();
    auto& g = x.node()->grad_buffer();
    for (size_t i = 0; i < g.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-xd[i]));
      g[i] += self.grad[i] * s * (1.0 + xd[i] * (1.0 - s));
    }
  });
}

Tensor relu(const Tensor& x) {
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > 0.0 ? xd[i] : 0.0;
  return make_result(x.shape(), std::move(out), {x}, [x](Node& self) {
    auto xd = x.data();
    auto& g = x.node()->grad_buffer();
    for (size_t i = 0; i < g.size(); ++i)
      if (xd[i] > 0.0) g[i] += self.grad[i];
  });
}

Tensor square(const Tensor& x) { return mul(x, x); }

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({}, {s}, {x}, [x](Node& self) {
    auto& g = x.node()->grad_buffer();
    for (double& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ContractError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_squared_error(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sum_squared_error");
  auto ad = a.data();
  auto bd = b.data();
  double s = 0.0;
  for (size_t i = 0; i < ad.size(); ++i) {
    const double d = ad[i] - bd[i];
    s += d * d;
  }
  return make_result({}, {s}, {a, b}, [a, b](Node& self) {
    auto ad = a.data();
    auto bd = b.data();
    const double g0 = self.grad[0];
    if (a.requires_grad()) {
      auto& g = a.node()->grad_buffer();
      for (size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * (ad[i] - bd[i]) * g0;
    }
    if (b.requires_grad()) {
      auto& g = b.node()->grad_buffer();
      for (size_t i = 0; i < g.size(); ++i) g[i] -= 2.0 * (ad[i] - bd[i]) * g0;
    }
  });
}

Tensor mean_squared_error(const Tensor& a, const Tensor& b) {
  if (a.numel() == 0) throw ContractError("mean_squared_error of empty tensors");
  return scale(sum_squared_error(a, b), 1.0 / static_cast<double>(a.numel()));
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x}, [x](Node& self) { accumulate(*x.node(), self.grad); });
}

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  const int rank = x.dim();
  if (static_cast<int>(perm.size()) != rank) throw DimensionError("permute: rank mismatch");
  std::vector<bool> used(static_cast<size_t>(rank), false);
  for (int p : perm) {
    if (p < 0 || p >= rank || used[static_cast<size_t>(p)]) throw DimensionError("permute: invalid permutation");
    used[static_cast<size_t>(p)] = true;
  }
  const Shape& in = x.shape();
  Shape out_shape(static_cast<size_t>(rank));
  std::vector<int64_t> in_strides(static_cast<size_t>(rank), 1);
  for (int i = rank - 2; i >= 0; --i) in_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(i) + 1] * in[static_cast<size_t>(i) + 1];
  std::vector<int64_t> src_strides(static_cast<size_t>(rank));
  for (int i = 0; i < rank; ++i) {
    out_shape[static_cast<size_t>(i)] = in[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    src_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  }
  // Gather index for every output element.
  const int64_t n = x.numel();
  auto index = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n));
  std::vector<int64_t> counter(static_cast<size_t>(rank), 0);
  int64_t src = 0;
  for (int64_t o = 0; o < n; ++o) {
    (*index)[static_cast<size_t>(o)] = src;
    for (int d = rank - 1; d >= 0; --d) {
      const size_t du = static_cast<size_t>(d);
      ++counter[du];
      src += src_strides[du];
      if (counter[du] < out_shape[du]) break;
      src -= src_strides[du] * counter[du];
      counter[du] = 0;
    }
  }
  auto xd = x.data();
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t o = 0; o < n; ++o) out[static_cast<size_t>(o)] = xd[static_cast<size_t>((*index)[static_cast<size_t>(o)])];
  return make_result(std::move(out_shape), std::move(out), {x}, [x, index](Node& self) {
    auto& g = x.node()->grad_buffer();
    for (size_t o = 0; o < index->size(); ++o) g[static_cast<size_t>((*index)[o])] += self.grad[o];
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const int rank = parts[0].dim();
  axis = normalize_axis(axis, rank, "concat");
  Shape out_shape = parts[0].shape();
  out_shape[static_cast<size_t>(axis)] = 0;
  for (const auto& p : parts) {
    if (p.dim() != rank) throw DimensionError("concat: rank mismatch");
    for (int d = 0; d < rank; ++d)
      if (d != axis && p.size(d) != parts[0].size(d)) throw DimensionError("concat: shape mismatch off-axis");
    out_shape[static_cast<size_t>(axis)] += p.size(axis);
  }
  const auto sp = split_axis(out_shape, axis);
  std::vector<double> out(static_cast<size_t>(numel_of(out_shape)));
  std::vector<int64_t> offsets;
  int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const int64_t n = p.size(axis);
    auto pd = p.data();
    for (int64_t o = 0; o < sp.outer; ++o)
      std::copy_n(pd.data() + o * n * sp.inner, n * sp.inner, out.data() + (o * sp.n + off) * sp.inner);
    off += n;
  }
  return make_result(out_shape, std::move(out), parts, [parts, offsets, sp, axis](Node& self) {
    for (size_t k = 0; k < parts.size(); ++k) {
      if (!parts[k].requires_grad()) continue;
      const int64_t n = parts[k].size(axis);
      auto& g = parts[k].node()->grad_buffer();
      for (int64_t o = 0; o < sp.outer; ++o) {
        const double* src = self.grad.data() + (o * sp.n + offsets[k]) * sp.inner;
        double* dst = g.data() + o * n * sp.inner;
        for (int64_t i = 0; i < n * sp.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

Tensor slice(const Tensor& x, int axis, int64_t start, int64_t length) {
  axis = normalize_axis(axis, x.dim(), "slice");
  const auto sp = split_axis(x.shape(), axis);
  if (start < 0 || length < 0 || start + length > sp.n) throw DimensionError("slice: range out of bounds");
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = length;
  std::vector<double> out(static_cast<size_t>(sp.outer * length * sp.inner));
  auto xd = x.data();
  for (int64_t o = 0; o < sp.outer; ++o)
    std::copy_n(xd.data() + (o * sp.n + start) * sp.inner, length * sp.inner, out.data() + o * length * sp.inner);
  return make_result(std::move(out_shape), std::move(out), {x}, [x, sp, start, length](Node& self) {
    auto& g = x.node()->grad_buffer();
    for (int64_t o = 0; o < sp.outer; ++o) {
      const double* src = self.grad.data() + o * length * sp.inner;
      double* dst = g.data() + (o * sp.n + start) * sp.inner;
      for (int64_t i = 0; i < length * sp.inner; ++i) dst[i] += src[i];
    }
  });
}

Tensor roll(const Tensor& x, const std::vector<int64_t>& shifts, const std::vector<int>& axes) {
  if (shifts.size() != axes.size()) throw DimensionError("roll: shifts/axes length mismatch");
  const int rank = x.dim();
  const Shape& s = x.shape();
  std::vector<int64_t> shift(static_cast<size_t>(rank), 0);
  for (size_t i = 0; i < axes.size(); ++i) {
    const int a = normalize_axis(axes[i], rank, "roll");
    const int64_t n = s[static_cast<size_t>(a)];
    shift[static_cast<size_t>(a)] = ((shifts[i] % n) + n) % n;
  }
  const int64_t total = x.numel();
  auto index = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(total));
  std::vector<int64_t> coord(static_cast<size_t>(rank), 0);
  for (int64_t o = 0; o < total; ++o) {
    int64_t src = 0;
    for (int d = 0; d < rank; ++d) {
      const size_t du = static_cast<size_t>(d);
      const int64_t c = (coord[du] - shift[du] + s[du]) % s[du];
      src = src * s[du] + c;
    }
    (*index)[static_cast<size_t>(o)] = src;
    for (int d = rank - 1; d >= 0; --d) {
      const size_t du = static_cast<size_t>(d);
      if (++coord[du] < s[du]) break;
      coord[du] = 0;
    }
  }
  auto xd = x.data();
  std::vector<double> out(static_cast<size_t>(total));
  for (int64_t o = 0; o < total; ++o) out[static_cast<size_t>(o)] = xd[static_cast<size_t>((*index)[static_cast<size_t>(o)])];
  return make_result(s, std::move(out), {x}, [x, index](Node& self) {
    auto& g = x.node()->grad_buffer();
    for (size_t o = 0; o < index->size(); ++o) g[static_cast<size_t>((*index)[o])] += self.grad[o];
  });
}

namespace {

struct Tap {
  int64_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<Tap> bilinear_taps(int64_t in, int64_t out) {
  std::vector<Tap> taps(static_cast<size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int64_t i0 = static_cast<int64_t>(std::floor(src));
    const int64_t i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<size_t>(o)] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

Tensor resample_bilinear(const Tensor& x, int64_t out_h, int64_t out_w) {
  if (x.dim() != 4) throw DimensionError("resample_bilinear: expects [B,C,H,W]");
  if (out_h < 1 || out_w < 1) throw DimensionError("resample_bilinear: target must be >= 1");
  const int64_t BC = x.size(0) * x.size(1), H = x.size(2), W = x.size(3);
  if (H == out_h && W == out_w) return reshape(x, x.shape());
  const auto ty = bilinear_taps(H, out_h);
  const auto tx = bilinear_taps(W, out_w);
  auto xd = x.data();
  std::vector<double> out(static_cast<size_t>(BC * out_h * out_w));
  for (int64_t p = 0; p < BC; ++p) {
    const double* src = xd.data() + p * H * W;
    double* dst = out.data() + p * out_h * out_w;
    for (int64_t oy = 0; oy < out_h; ++oy) {
      const Tap& a = ty[static_cast<size_t>(oy)];
      for (int64_t ox = 0; ox < out_w; ++ox) {
        const Tap& b = tx[static_cast<size_t>(ox)];
        const double top = src[a.i0 * W + b.i0] * (1.0 - b.w1) + src[a.i0 * W + b.i1] * b.w1;
        const double bot = src[a.i1 * W + b.i0] * (1.0 - b.w1) + src[a.i1 * W + b.i1] * b.w1;
        dst[oy * out_w + ox] = top * (1.0 - a.w1) + bot * a.w1;
      }
    }
  }
  Shape out_shape{x.size(0), x.size(1), out_h, out_w};
  return make_result(std::move(out_shape), std::move(out), {x}, [x, ty, tx, BC, H, W, out_h, out_w](Node& self) {
    auto& g = x.node()->grad_buffer();
    for (int64_t p = 0; p < BC; ++p) {
      double* dst = g.data() + p * H * W;
      const double* go = self.grad.data() + p * out_h * out_w;
      for (int64_t oy = 0; oy < out_h; ++oy) {
        const Tap& a = ty[static_cast<size_t>(oy)];
        for (int64_t ox = 0; ox < out_w; ++ox) {
          const Tap& b = tx[static_cast<size_t>(ox)];
          const double v = go[oy * out_w + ox];
          dst[a.i0 * W + b.i0] += v * (1.0 - a.w1) * (1.0 - b.w1);
          dst[a.i0 * W + b.i1] += v * (1.0 - a.w1) * b.w1;
          dst[a.i1 * W + b.i0] += v * a.w1 * (1.0 - b.w1);
          dst[a.i1 * W + b.i1] += v * a.w1 * b.w1;
        }
      }
    }
  });
}

Tensor upsample_nearest(const Tensor& x, int factor) {
  if (x.dim() != 4) throw DimensionError("upsample_nearest: expects [B,C,H,W]");
  if (factor < 1) throw DimensionError("upsample_nearest: factor must be >= 1");
  const int64_t BC = x.size(0) * x.size(1), H = x.size(2), W = x.size(3);
  const int64_t Ho = H * factor, Wo = W * factor;
  auto xd = x.data();
  std::vector<double> out(static_cast<size_t>(BC * Ho * Wo));
  for (int64_t p = 0; p < BC; ++p)
    for (int64_t y = 0; y < Ho; ++y)
      for (int64_t xx = 0; xx < Wo; ++xx)
        out[static_cast<size_t>((p * Ho + y) * Wo + xx)] = xd[static_cast<size_t>((p * H + y / factor) * W + xx / factor)];
  return make_result({x.size(0), x.size(1), Ho, Wo}, std::move(out), {x}, [x, BC, H, W, Ho, Wo, factor](Node& self) {
    auto& g = x.node()->grad_buffer();
    for (int64_t p = 0; p < BC; ++p)
      for (int64_t y = 0; y < Ho; ++y)
        for (int64_t xx = 0; xx < Wo; ++xx)
          g[static_cast<size_t>((p * H + y / factor) * W + xx / factor)] += self.grad[static_cast<size_t>((p * Ho + y) * Wo + xx)];
  });
}

}  // namespace mvcond
