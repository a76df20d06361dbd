#include "mvcond/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "mvcond/errors.hpp"
#include "mvcond/ops.hpp"

namespace mvcond {

Tensor TriPlane::plane(int index) const {
  NoGradGuard guard;
  return reshape(slice(planes, 0, index, 1), {planes.size(1), planes.size(2), planes.size(3)});
}

TriPlane TriPlane::zeros(int resolution, int features) {
  return {Tensor::zeros({3, resolution, resolution, features})};
}

void validate_triplane(const TriPlane& tp) {
  if (!tp.planes.defined() || tp.planes.dim() != 4 || tp.planes.size(0) != 3 || tp.planes.size(1) != tp.planes.size(2) ||
      tp.planes.size(3) < 2) {
    throw DimensionError("tri-plane must have shape [3, S, S, F] with F >= 2");
  }
}

FusionWeights view_weights(const std::vector<double>& gaps) {
  if (gaps.empty()) throw ContractError("view_weights: at least one view is required");
  FusionWeights w;
  double total = 0.0;
  for (double g : gaps) {
    if (!(g >= 0.0 && g <= kPi + 1e-12)) throw ContractError("view_weights: azimuth gap outside [0, pi]");
    w.raw.push_back((std::cos(g) + 1.0) / 2.0);
    total += w.raw.back();
  }
  const double n = static_cast<double>(gaps.size());
  const bool degenerate = total < kWeightEps * n;
  const double denom = degenerate ? total + kWeightEps * n : total;
  for (double r : w.raw) w.normalized.push_back((degenerate ? r + kWeightEps : r) / denom);
  return w;
}

FusionWeights weights_for(const std::vector<SphericalPose>& inputs, const SphericalPose& target) {
  std::vector<double> gaps;
  gaps.reserve(inputs.size());
  for (const auto& in : inputs) gaps.push_back(azimuth_gap(target, in));
  return view_weights(gaps);
}

bool inside_cube(const Eigen::Vector3d& p) { return p.cwiseAbs().maxCoeff() <= 1.0; }

namespace {

struct Corner {
  int64_t r0, r1, c0, c1;
  double wr, wc;  // weight of r1 / c1
};

inline void axis_tap(double coord, int64_t S, int64_t& i0, int64_t& i1, double& w) {
  if (S == 1) {
    i0 = i1 = 0;
    w = 0.0;
    return;
  }
  const double f = (coord + 1.0) * 0.5 * static_cast<double>(S - 1);
  i0 = std::min(static_cast<int64_t>(std::floor(f)), S - 2);
  i0 = std::max<int64_t>(i0, 0);
  i1 = i0 + 1;
  w = f - static_cast<double>(i0);
}

// (col coordinate, row coordinate) per plane: xy -> (x, y), xz -> (x, z), yz -> (y, z).
inline Corner plane_corner(int plane, const Eigen::Vector3d& p, int64_t S) {
  static constexpr int kCol[3] = {0, 0, 1};
  static constexpr int kRow[3] = {1, 2, 2};
  Corner c{};
  axis_tap(p[kRow[plane]], S, c.r0, c.r1, c.wr);
  axis_tap(p[kCol[plane]], S, c.c0, c.c1, c.wc);
  return c;
}

// out[f] += scale * bilinear(plane, corner)[f]
inline void gather(const double* planes, int plane, const Corner& c, int64_t S, int64_t F, double scale, double* out) {
  const double* base = planes + plane * S * S * F;
  const double w00 = (1.0 - c.wr) * (1.0 - c.wc) * scale, w01 = (1.0 - c.wr) * c.wc * scale;
  const double w10 = c.wr * (1.0 - c.wc) * scale, w11 = c.wr * c.wc * scale;
  const double* p00 = base + (c.r0 * S + c.c0) * F;
  const double* p01 = base + (c.r0 * S + c.c1) * F;
  const double* p10 = base + (c.r1 * S + c.c0) * F;
  const double* p11 = base + (c.r1 * S + c.c1) * F;
  for (int64_t f = 0; f < F; ++f) out[f] += w00 * p00[f] + w01 * p01[f] + w10 * p10[f] + w11 * p11[f];
}

inline void scatter(double* grad_planes, int plane, const Corner& c, int64_t S, int64_t F, double scale, const double* g) {
  double* base = grad_planes + plane * S * S * F;
  const double w00 = (1.0 - c.wr) * (1.0 - c.wc) * scale, w01 = (1.0 - c.wr) * c.wc * scale;
  const double w10 = c.wr * (1.0 - c.wc) * scale, w11 = c.wr * c.wc * scale;
  double* p00 = base + (c.r0 * S + c.c0) * F;
  double* p01 = base + (c.r0 * S + c.c1) * F;
  double* p10 = base + (c.r1 * S + c.c0) * F;
  double* p11 = base + (c.r1 * S + c.c1) * F;
  for (int64_t f = 0; f < F; ++f) {
    p00[f] += w00 * g[f];
    p01[f] += w01 * g[f];
    p10[f] += w10 * g[f];
    p11[f] += w11 * g[f];
  }
}

}  // namespace

PointFeature sample_triplane(const TriPlane& tp, const Eigen::Vector3d& p) {
  validate_triplane(tp);
  const int64_t S = tp.planes.size(1), F = tp.planes.size(3);
  PointFeature out;
  out.feature.assign(static_cast<size_t>(F - 1), 0.0);
  if (!inside_cube(p)) return out;
  std::vector<double> acc(static_cast<size_t>(F), 0.0);
  for (int k = 0; k < 3; ++k) gather(tp.planes.data().data(), k, plane_corner(k, p, S), S, F, 1.0, acc.data());
  out.density_logit = acc[0];
  std::copy(acc.begin() + 1, acc.end(), out.feature.begin());
  return out;
}

PointFeature fuse_point(const std::vector<PointFeature>& features, const FusionWeights& w) {
  if (features.size() != w.normalized.size() || features.empty()) {
    throw ContractError("fuse_point: feature count does not match weight count");
  }
  PointFeature out;
  out.feature.assign(features[0].feature.size(), 0.0);
  for (size_t i = 0; i < features.size(); ++i) {
    if (features[i].feature.size() != out.feature.size()) throw DimensionError("fuse_point: feature width mismatch");
    out.density_logit += w.normalized[i] * features[i].density_logit;
    for (size_t c = 0; c < out.feature.size(); ++c) out.feature[c] += w.normalized[i] * features[i].feature[c];
  }
  return out;
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

namespace {

struct RenderSetup {
  int64_t views, S, F, rays, samples;
  double near, delta;
  std::vector<double> weights;
  std::vector<double> t_in, t_out;  // per ray: span inside every input cube
  // Per ray and view: sample position in the input frame is a + t * b.
  std::vector<Eigen::Vector3d> a, b;
};

// Per-ray forward state kept only long enough to run the backward pass.
struct RayTrace {
  std::vector<double> g;      // samples x F fused values
  std::vector<double> alpha;  // samples
  std::vector<double> trans;  // transmittance before each sample
  std::vector<double> t;      // sample depth (midpoint of the clipped interval)
  std::vector<double> dt;     // clipped interval length, 0 outside the cubes
};

// Parametric span of a + t b inside [-1, 1]^3 (empty when lo >= hi).
void cube_span(const Eigen::Vector3d& a, const Eigen::Vector3d& b, double& lo, double& hi) {
  lo = -std::numeric_limits<double>::infinity();
  hi = std::numeric_limits<double>::infinity();
  for (int k = 0; k < 3; ++k) {
    if (std::abs(b[k]) < 1e-300) {
      if (std::abs(a[k]) > 1.0) hi = lo;
      continue;
    }
    double t0 = (-1.0 - a[k]) / b[k], t1 = (1.0 - a[k]) / b[k];
    if (t0 > t1) std::swap(t0, t1);
    lo = std::max(lo, t0);
    hi = std::min(hi, t1);
  }
}

void trace_ray(const RenderSetup& s, const std::vector<const double*>& planes, int64_t r, RayTrace& tr, double* out) {
  const int64_t F = s.F;
  tr.g.assign(static_cast<size_t>(s.samples * F), 0.0);
  tr.alpha.assign(static_cast<size_t>(s.samples), 0.0);
  tr.trans.assign(static_cast<size_t>(s.samples), 0.0);
  tr.t.assign(static_cast<size_t>(s.samples), 0.0);
  tr.dt.assign(static_cast<size_t>(s.samples), 0.0);
  std::fill(out, out + F, 0.0);
  double T = 1.0;
  for (int64_t j = 0; j < s.samples; ++j) {
    tr.trans[static_cast<size_t>(j)] = T;
    const double lo = std::max(s.near + static_cast<double>(j) * s.delta, s.t_in[static_cast<size_t>(r)]);
    const double hi = std::min(s.near + static_cast<double>(j + 1) * s.delta, s.t_out[static_cast<size_t>(r)]);
    if (!(hi > lo)) continue;
    const double t = 0.5 * (lo + hi);
    tr.t[static_cast<size_t>(j)] = t;
    tr.dt[static_cast<size_t>(j)] = hi - lo;
    double* g = tr.g.data() + j * F;
    for (int64_t i = 0; i < s.views; ++i) {
      const size_t k = static_cast<size_t>(r * s.views + i);
      const Eigen::Vector3d q = s.a[k] + t * s.b[k];
      for (int p = 0; p < 3; ++p) gather(planes[static_cast<size_t>(i)], p, plane_corner(p, q, s.S), s.S, F, s.weights[static_cast<size_t>(i)], g);
    }
    const double sigma = softplus(g[0]);
    const double alpha = 1.0 - std::exp(-sigma * (hi - lo));
    tr.alpha[static_cast<size_t>(j)] = alpha;
    const double w = T * alpha;
    for (int64_t c = 1; c < F; ++c) out[c - 1] += w * g[c];
    out[F - 1] += w;
    T *= 1.0 - alpha;
  }
}

}  // namespace

RenderedLatent render_target_latent(const std::vector<TriPlane>& triplanes, const std::vector<SphericalPose>& input_poses,
                                    const SphericalPose& target_pose, const RayBundle& rays) {
  std::vector<CameraPose> cams;
  for (const auto& sp : input_poses) cams.push_back(spherical_to_pose(sp));
  return render_target_latent(triplanes, cams, spherical_to_pose(target_pose), weights_for(input_poses, target_pose), rays);
}

RenderedLatent render_target_latent(const std::vector<TriPlane>& triplanes, const std::vector<CameraPose>& input_poses,
                                    const CameraPose& target_pose, const FusionWeights& weights, const RayBundle& rays) {
  if (triplanes.empty()) throw ContractError("render_target_latent: no input views");
  if (triplanes.size() != input_poses.size() || triplanes.size() != weights.normalized.size()) {
    throw ContractError("render_target_latent: tri-planes, poses and weights must align");
  }
  if (rays.size() == 0 || rays.size() != static_cast<size_t>(rays.width) * rays.height) {
    throw ContractError("render_target_latent: ray bundle must cover a full grid");
  }
  for (const auto& tp : triplanes) {
    validate_triplane(tp);
    if (tp.planes.shape() != triplanes[0].planes.shape()) throw DimensionError("render_target_latent: tri-plane shapes differ");
  }

  auto setup = std::make_shared<RenderSetup>();
  RenderSetup& s = *setup;
  s.views = static_cast<int64_t>(triplanes.size());
  s.S = triplanes[0].planes.size(1);
  s.F = triplanes[0].planes.size(3);
  s.rays = static_cast<int64_t>(rays.size());
  s.samples = rays.samples_per_ray;
  s.near = rays.near;
  s.delta = rays.step();
  s.weights = weights.normalized;

  std::vector<ViewFrame> frames;
  for (const auto& in : input_poses) frames.push_back({relative_transform(target_pose, in), in.translation});
  const RigidTransform world_to_target = target_pose.world_to_camera();
  s.a.resize(static_cast<size_t>(s.rays * s.views));
  s.b.resize(s.a.size());
  for (int64_t r = 0; r < s.rays; ++r) {
    const Eigen::Vector3d o_t = transform_point(world_to_target, rays.origins[static_cast<size_t>(r)]);
    const Eigen::Vector3d d_t = world_to_target.rotation * rays.directions[static_cast<size_t>(r)];
    for (int64_t i = 0; i < s.views; ++i) {
      const ViewFrame& f = frames[static_cast<size_t>(i)];
      const size_t k = static_cast<size_t>(r * s.views + i);
      s.a[k] = transform_point(f.target_to_input, o_t) - f.input_offset;
      s.b[k] = f.target_to_input.rotation * d_t;
    }
  }
  s.t_in.resize(static_cast<size_t>(s.rays));
  s.t_out.resize(static_cast<size_t>(s.rays));
  for (int64_t r = 0; r < s.rays; ++r) {
    double lo = -std::numeric_limits<double>::infinity(), hi = std::numeric_limits<double>::infinity();
    for (int64_t i = 0; i < s.views; ++i) {
      const size_t k = static_cast<size_t>(r * s.views + i);
      double l, h;
      cube_span(s.a[k], s.b[k], l, h);
      lo = std::max(lo, l);
      hi = std::min(hi, h);
    }
    s.t_in[static_cast<size_t>(r)] = lo;
    s.t_out[static_cast<size_t>(r)] = hi;
  }

  std::vector<const double*> plane_data;
  std::vector<Tensor> parents;
  for (const auto& tp : triplanes) {
    plane_data.push_back(tp.planes.data().data());
    parents.push_back(tp.planes);
  }

  std::vector<double> out(static_cast<size_t>(s.rays * s.F));
  RayTrace tr;
  for (int64_t r = 0; r < s.rays; ++r) trace_ray(s, plane_data, r, tr, out.data() + r * s.F);

  Tensor combined = make_result({rays.height, rays.width, s.F}, std::move(out), parents, [setup, parents](Node& self) {
    const RenderSetup& s = *setup;
    const int64_t F = s.F;
    std::vector<const double*> planes;
    std::vector<double*> grads;
    for (const auto& p : parents) {
      planes.push_back(p.data().data());
      grads.push_back(p.requires_grad() ? p.node()->grad_buffer().data() : nullptr);
    }
    RayTrace tr;
    std::vector<double> scratch(static_cast<size_t>(F));
    std::vector<double> e(static_cast<size_t>(s.samples));
    std::vector<double> dg(static_cast<size_t>(F));
    for (int64_t r = 0; r < s.rays; ++r) {
      const double* G = self.grad.data() + r * F;  // feature grads then opacity grad
      trace_ray(s, planes, r, tr, scratch.data());
      for (int64_t j = 0; j < s.samples; ++j) {
        double ej = G[F - 1];
        const double* g = tr.g.data() + j * F;
        for (int64_t c = 1; c < F; ++c) ej += G[c - 1] * g[c];
        e[static_cast<size_t>(j)] = ej;
      }
      double suffix = 0.0;  // sum_{k > j} w_k e_k
      for (int64_t j = s.samples - 1; j >= 0; --j) {
        const size_t ju = static_cast<size_t>(j);
        const double w = tr.trans[ju] * tr.alpha[ju];
        if (tr.dt[ju] > 0.0) {
          const double t_next = tr.trans[ju] * (1.0 - tr.alpha[ju]);
          const double dsigma = tr.dt[ju] * (t_next * e[ju] - suffix);
          const double* g = tr.g.data() + j * F;
          dg[0] = dsigma * sigmoid(g[0]);
          for (int64_t c = 1; c < F; ++c) dg[static_cast<size_t>(c)] = w * G[c - 1];
          const double t = tr.t[ju];
          for (int64_t i = 0; i < s.views; ++i) {
            if (!grads[static_cast<size_t>(i)]) continue;
            const size_t k = static_cast<size_t>(r * s.views + i);
            const Eigen::Vector3d q = s.a[k] + t * s.b[k];
            for (int p = 0; p < 3; ++p)
              scatter(grads[static_cast<size_t>(i)], p, plane_corner(p, q, s.S), s.S, F, s.weights[static_cast<size_t>(i)], dg.data());
          }
        }
        suffix += w * e[ju];
      }
    }
  });

  RenderedLatent result;
  result.grid = slice(combined, 2, 0, s.F - 1);
  result.opacity = reshape(slice(combined, 2, s.F - 1, 1), {rays.height, rays.width});
  return result;
}

}  // namespace mvcond
