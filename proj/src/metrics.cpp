#include "mvcond/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "mvcond/errors.hpp"

namespace mvcond {

namespace {

constexpr int kWin = 11;

std::array<double, kWin * kWin> gaussian_window() {
  std::array<double, kWin * kWin> w{};
  double total = 0.0;
  for (int y = 0; y < kWin; ++y)
    for (int x = 0; x < kWin; ++x) {
      const double dy = y - kWin / 2, dx = x - kWin / 2;
      w[static_cast<size_t>(y * kWin + x)] = std::exp(-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5));
      total += w[static_cast<size_t>(y * kWin + x)];
    }
  for (double& v : w) v /= total;
  return w;
}

}  // namespace

double psnr(std::span<const double> a, std::span<const double> b, double max_val) {
  if (a.size() != b.size()) {
    throw DimensionError("psnr: sizes differ (" + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
  }
  if (a.empty()) throw ContractError("psnr: empty input");
  double mse = 0.0;
  for (size_t i = 0; i < a.size(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]);
  mse /= static_cast<double>(a.size());
  if (mse < 1e-10) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(max_val * max_val / mse));
}

double psnr(const Image& a, const Image& b, double max_val) {
  if (!a.same_size(b)) throw DimensionError("psnr: image sizes differ");
  return psnr(a.pixels, b.pixels, max_val);
}

double ssim(std::span<const double> a, std::span<const double> b, int height, int width, int channels,
            double max_val) {
  if (a.size() != b.size()) throw DimensionError("ssim: sizes differ");
  if (a.size() != static_cast<size_t>(height) * width * channels) throw DimensionError("ssim: size does not match shape");
  if (height < kWin || width < kWin) throw ContractError("ssim: images must be at least 11 x 11");
  static const auto w = gaussian_window();
  const double c1 = (0.01 * max_val) * (0.01 * max_val);
  const double c2 = (0.03 * max_val) * (0.03 * max_val);
  double total = 0.0;
  int count = 0;
  for (int c = 0; c < channels; ++c)
    for (int y0 = 0; y0 + kWin <= height; ++y0)
      for (int x0 = 0; x0 + kWin <= width; ++x0) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int y = 0; y < kWin; ++y)
          for (int x = 0; x < kWin; ++x) {
            const size_t i = (static_cast<size_t>(y0 + y) * width + x0 + x) * channels + c;
            const double wv = w[static_cast<size_t>(y * kWin + x)];
            ma += wv * a[i];
            mb += wv * b[i];
            saa += wv * a[i] * a[i];
            sbb += wv * b[i] * b[i];
            sab += wv * a[i] * b[i];
          }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
  return total / count;
}

double ssim(const Image& a, const Image& b, double max_val) {
  if (!a.same_size(b)) throw DimensionError("ssim: image sizes differ");
  return ssim(a.pixels, b.pixels, a.height, a.width, 3, max_val);
}

}  // namespace mvcond
