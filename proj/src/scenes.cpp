#include "mvcond/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "mvcond/errors.hpp"

namespace mvcond {

namespace fs = std::filesystem;
using json = nlohmann::json;

double Primitive::bounding_radius() const {
  switch (kind) {
    case PrimitiveKind::kSphere:
      return center.norm() + size.x();
    case PrimitiveKind::kBox:
      return center.norm() + size.norm();
    case PrimitiveKind::kCapsule:
      return center.norm() + size.y() + size.x();
  }
  return 0.0;
}

double Primitive::sdf(const Eigen::Vector3d& p) const {
  const Eigen::Vector3d q = p - center;
  switch (kind) {
    case PrimitiveKind::kSphere:
      return q.norm() - size.x();
    case PrimitiveKind::kBox: {
      const Eigen::Vector3d d = q.cwiseAbs() - size;
      return d.cwiseMax(0.0).norm() + std::min(d.maxCoeff(), 0.0);
    }
    case PrimitiveKind::kCapsule: {
      const double h = std::clamp(q.dot(axis), -size.y(), size.y());
      return (q - h * axis).norm() - size.x();
    }
  }
  return 1e9;
}

bool SceneSpec::operator==(const SceneSpec& o) const {
  if (seed != o.seed || primitives.size() != o.primitives.size()) return false;
  for (size_t i = 0; i < primitives.size(); ++i) {
    const auto& a = primitives[i];
    const auto& b = o.primitives[i];
    if (a.kind != b.kind || a.center != b.center || a.size != b.size || a.axis != b.axis || a.rgb != b.rgb) return false;
  }
  return true;
}

namespace {

// Uniform doubles from raw 64-bit draws; avoids implementation-defined distributions.
class SceneRng {
 public:
  explicit SceneRng(uint64_t seed) : engine_(seed) {}
  double uniform(double lo, double hi) {
    const double u = static_cast<double>(engine_() >> 11) * (1.0 / 9007199254740992.0);
    return lo + (hi - lo) * u;
  }
  int integer(int lo, int hi) { return lo + static_cast<int>(engine_() % static_cast<uint64_t>(hi - lo + 1)); }

 private:
  std::mt19937_64 engine_;
};

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

uint64_t scene_seed(uint64_t dataset_seed, int index) {
  return splitmix64(dataset_seed * 0x100000001b3ULL + static_cast<uint64_t>(index));
}

SceneSpec build_scene(uint64_t seed) {
  SceneRng rng(seed);
  SceneSpec scene;
  scene.seed = seed;
  const int count = rng.integer(2, 6);
  for (int i = 0; i < count; ++i) {
    Primitive p;
    p.kind = static_cast<PrimitiveKind>(rng.integer(0, 2));
    p.center = Eigen::Vector3d(rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4));
    if (i == 0 && p.center.head<2>().norm() < 0.2) {
      // Keep the first primitive off the vertical axis so azimuths are distinguishable.
      Eigen::Vector2d xy = p.center.head<2>();
      if (xy.norm() < 1e-9) xy = Eigen::Vector2d(1.0, 0.0);
      p.center.head<2>() = xy.normalized() * 0.25;
    }
    switch (p.kind) {
      case PrimitiveKind::kSphere:
        p.size = Eigen::Vector3d(rng.uniform(0.12, 0.3), 0.0, 0.0);
        break;
      case PrimitiveKind::kBox:
        p.size = Eigen::Vector3d(rng.uniform(0.08, 0.25), rng.uniform(0.08, 0.25), rng.uniform(0.08, 0.25));
        break;
      case PrimitiveKind::kCapsule: {
        Eigen::Vector3d axis(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
        if (axis.norm() < 1e-3) axis = Eigen::Vector3d::UnitZ();
        p.axis = axis.normalized();
        p.size = Eigen::Vector3d(rng.uniform(0.06, 0.15), rng.uniform(0.05, 0.2), 0.0);
        break;
      }
    }
    p.rgb = Eigen::Vector3d(rng.uniform(0.05, 0.9), rng.uniform(0.05, 0.9), rng.uniform(0.05, 0.9));
    // Shrink until the primitive sits inside the bounding sphere with a margin.
    const double limit = 0.95 * kSceneBound;
    for (int guard = 0; guard < 64 && p.bounding_radius() > limit; ++guard) {
      if (p.center.norm() > 0.6) p.center *= 0.9;
      p.size *= 0.9;
    }
    scene.primitives.push_back(p);
  }
  return scene;
}

SceneSpec mirror_y(const SceneSpec& scene) {
  SceneSpec out = scene;
  for (auto& p : out.primitives) {
    p.center.y() = -p.center.y();
    p.axis.y() = -p.axis.y();
  }
  return out;
}

namespace {

struct Hit {
  bool hit = false;
  Eigen::Vector3d rgb = Eigen::Vector3d::Ones();
};

double scene_sdf(const SceneSpec& scene, const Eigen::Vector3d& p, int* nearest) {
  double best = 1e9;
  for (size_t i = 0; i < scene.primitives.size(); ++i) {
    const double d = scene.primitives[i].sdf(p);
    if (d < best) {
      best = d;
      if (nearest) *nearest = static_cast<int>(i);
    }
  }
  return best;
}

Hit trace(const SceneSpec& scene, const Eigen::Vector3d& origin, const Eigen::Vector3d& dir) {
  Hit h;
  if (scene.primitives.empty()) return h;
  // Ray / bounding-sphere interval.
  const double b = origin.dot(dir);
  const double c = origin.squaredNorm() - kSceneBound * kSceneBound;
  const double disc = b * b - c;
  if (disc <= 0.0) return h;
  double t = std::max(0.0, -b - std::sqrt(disc));
  const double t_max = -b + std::sqrt(disc);
  int idx = -1;
  for (int step = 0; step < kMarchSteps && t <= t_max; ++step) {
    const Eigen::Vector3d p = origin + t * dir;
    const double d = scene_sdf(scene, p, &idx);
    if (d < 1e-4) {
      constexpr double e = 1e-4;
      const Eigen::Vector3d n = Eigen::Vector3d(scene_sdf(scene, p + Eigen::Vector3d(e, 0, 0), nullptr) -
                                                    scene_sdf(scene, p - Eigen::Vector3d(e, 0, 0), nullptr),
                                                scene_sdf(scene, p + Eigen::Vector3d(0, e, 0), nullptr) -
                                                    scene_sdf(scene, p - Eigen::Vector3d(0, e, 0), nullptr),
                                                scene_sdf(scene, p + Eigen::Vector3d(0, 0, e), nullptr) -
                                                    scene_sdf(scene, p - Eigen::Vector3d(0, 0, e), nullptr))
                                    .normalized();
      const double shade = 0.35 + 0.65 * std::max(0.0, -n.dot(dir));
      h.hit = true;
      h.rgb = scene.primitives[static_cast<size_t>(idx)].rgb * shade;
      return h;
    }
    t += d;
  }
  return h;
}

template <typename F>
void for_each_pixel(const CameraPose& pose, int resolution, F&& f) {
  const Intrinsics k = Intrinsics::from_fov(
      resolution, rad_to_deg(2.0 * std::atan((pose.intrinsics.height / 2.0) / pose.intrinsics.focal)));
  const Eigen::Vector3d origin = pose.center();
  const Eigen::Matrix3d cam_to_world = pose.rotation.transpose();
  for (int v = 0; v < resolution; ++v)
    for (int u = 0; u < resolution; ++u) f(u, v, origin, (cam_to_world * pixel_direction_camera(k, u, v)).normalized());
}

}  // namespace

Image render_view(const SceneSpec& scene, const CameraPose& pose, int resolution) {
  Image img(resolution, resolution, 1.0);
  for_each_pixel(pose, resolution, [&](int u, int v, const Eigen::Vector3d& o, const Eigen::Vector3d& d) {
    const Hit h = trace(scene, o, d);
    for (int c = 0; c < 3; ++c) img.at(u, v, c) = h.rgb[c];
  });
  return img;
}

std::vector<uint8_t> render_silhouette(const SceneSpec& scene, const CameraPose& pose, int resolution) {
  std::vector<uint8_t> mask(static_cast<size_t>(resolution) * resolution, 0);
  for_each_pixel(pose, resolution, [&](int u, int v, const Eigen::Vector3d& o, const Eigen::Vector3d& d) {
    mask[static_cast<size_t>(v) * resolution + u] = trace(scene, o, d).hit ? 1 : 0;
  });
  return mask;
}

namespace {

std::string scene_id_for(int index) {
  std::ostringstream os;
  os << "scene_" << std::setw(4) << std::setfill('0') << index;
  return os.str();
}

MultiViewSample generate_one(const DatasetOptions& opts, int index) {
  MultiViewSample s;
  s.scene_id = scene_id_for(index);
  s.seed = scene_seed(opts.seed, index);
  s.resolution = opts.resolution;
  const SceneSpec scene = build_scene(s.seed);
  const double elev = opts.elevations_deg[static_cast<size_t>(index) % opts.elevations_deg.size()];
  for (int k = 0; k < opts.n_views; ++k) {
    const double phi_deg = 360.0 * k / opts.n_views;
    PosedView view;
    view.pose = SphericalPose::from_degrees(elev, phi_deg, opts.radius);
    view.image = quantize8(render_view(scene, spherical_to_pose(view.pose, opts.resolution), opts.resolution));
    view.file = "view_" + std::to_string(k) + ".png";
    s.views.push_back(std::move(view));
  }
  return s;
}

}  // namespace

void validate_options(const DatasetOptions& opts) {
  if (opts.n_views < 2) throw ContractError("n_views must be >= 2");
  if (opts.num_scenes < 1) throw ContractError("num_scenes must be >= 1");
  if (opts.resolution < 1) throw ContractError("resolution must be >= 1");
  if (opts.elevations_deg.empty()) throw ContractError("at least one elevation is required");
}

std::vector<MultiViewSample> generate_samples(const DatasetOptions& opts) {
  validate_options(opts);
  std::vector<MultiViewSample> out(static_cast<size_t>(opts.num_scenes));
  const int threads = std::max(1, std::min(opts.threads, opts.num_scenes));
  if (threads == 1) {
    for (int i = 0; i < opts.num_scenes; ++i) out[static_cast<size_t>(i)] = generate_one(opts, i);
    return out;
  }
  std::vector<std::thread> workers;
  for (int t = 0; t < threads; ++t) {
    workers.emplace_back([&, t] {
      for (int i = t; i < opts.num_scenes; i += threads) out[static_cast<size_t>(i)] = generate_one(opts, i);
    });
  }
  for (auto& w : workers) w.join();
  return out;
}

void write_sample(const MultiViewSample& sample, const fs::path& root) {
  const fs::path dir = root / "scenes" / sample.scene_id;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  json views = json::array();
  for (const auto& v : sample.views) {
    write_png(dir / v.file, v.image);
    views.push_back({{"theta_deg", rad_to_deg(v.pose.theta)},
                     {"phi_deg", rad_to_deg(v.pose.phi)},
                     {"radius", v.pose.radius},
                     {"file", v.file}});
  }
  json doc{{"views", views}, {"resolution", sample.resolution}, {"seed", sample.seed}};
  std::ofstream f(dir / "poses.json");
  if (!f) throw IoError("cannot write " + (dir / "poses.json").string());
  f << doc.dump(2) << '\n';
  if (!f) throw IoError("write failed: " + (dir / "poses.json").string());
}

void make_dataset(const DatasetOptions& opts, const fs::path& out_dir) {
  for (const auto& s : generate_samples(opts)) write_sample(s, out_dir);
}

MultiViewSample load_sample(const fs::path& scene_dir) {
  std::ifstream f(scene_dir / "poses.json");
  if (!f) throw IoError("missing poses.json in " + scene_dir.string());
  json doc;
  try {
    f >> doc;
  } catch (const json::exception& e) {
    throw IoError("malformed poses.json in " + scene_dir.string() + ": " + e.what());
  }
  MultiViewSample s;
  s.scene_id = scene_dir.filename().string();
  try {
    s.resolution = doc.at("resolution").get<int>();
    s.seed = doc.at("seed").get<uint64_t>();
    for (const auto& v : doc.at("views")) {
      PosedView pv;
      pv.file = v.at("file").get<std::string>();
      pv.pose = SphericalPose::from_degrees(v.at("theta_deg").get<double>(), v.at("phi_deg").get<double>(),
                                            v.at("radius").get<double>());
      pv.image = read_png(scene_dir / pv.file);
      if (pv.image.width != s.resolution || pv.image.height != s.resolution) {
        throw IoError("image " + pv.file + " does not match the recorded resolution");
      }
      s.views.push_back(std::move(pv));
    }
  } catch (const json::exception& e) {
    throw IoError("invalid poses.json in " + scene_dir.string() + ": " + e.what());
  }
  return s;
}

std::vector<MultiViewSample> load_dataset(const fs::path& root) {
  const fs::path scenes = root / "scenes";
  if (!fs::is_directory(scenes)) throw IoError("no scenes directory under " + root.string());
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(scenes))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  std::vector<MultiViewSample> out;
  for (const auto& d : dirs) out.push_back(load_sample(d));
  return out;
}

Tensor target_latent_oracle(const Image& img, int latent_res, int channels) {
  if (latent_res < 1 || img.width % latent_res != 0 || img.height % latent_res != 0 || img.width != img.height) {
    throw DimensionError("target_latent_oracle: image size must be a multiple of the latent resolution");
  }
  if (channels < 3) throw DimensionError("target_latent_oracle: need at least 3 channels");
  const int f = img.width / latent_res;
  std::vector<double> out(static_cast<size_t>(latent_res) * latent_res * channels, 0.0);
  const double inv = 1.0 / (f * f);
  for (int y = 0; y < latent_res; ++y)
    for (int x = 0; x < latent_res; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int dy = 0; dy < f; ++dy)
          for (int dx = 0; dx < f; ++dx) acc += img.at(x * f + dx, y * f + dy, c);
        out[(static_cast<size_t>(y) * latent_res + x) * channels + c] = acc * inv;
      }
  return Tensor::from({latent_res, latent_res, channels}, std::move(out));
}

Image decode_latent(const Tensor& latent, int resolution) {
  if (latent.dim() != 3 || latent.size(2) < 3 || latent.size(0) != latent.size(1)) {
    throw DimensionError("decode_latent: expects [h, w, C>=3]");
  }
  const int h = static_cast<int>(latent.size(0));
  if (resolution % h != 0) throw DimensionError("decode_latent: resolution must be a multiple of the latent size");
  const int f = resolution / h;
  const int64_t C = latent.size(2);
  auto d = latent.data();
  Image img(resolution, resolution);
  for (int y = 0; y < resolution; ++y)
    for (int x = 0; x < resolution; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(x, y, c) = std::clamp(d[static_cast<size_t>(((y / f) * h + x / f) * C + c)], 0.0, 1.0);
  return img;
}

}  // namespace mvcond
