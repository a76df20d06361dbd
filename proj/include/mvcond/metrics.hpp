#pragma once

// Image quality metrics over planar or interleaved arrays of equal shape.

#include <span>

#include "mvcond/image.hpp"

namespace mvcond {

inline constexpr double kPsnrCap = 99.0;

// 10 log10(max^2 / MSE), capped at kPsnrCap when MSE < 1e-10.
double psnr(std::span<const double> a, std::span<const double> b, double max_val = 1.0);
double psnr(const Image& a, const Image& b, double max_val = 1.0);

// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03,
// evaluated at every window position that fits inside the image ("valid")
// and averaged over channels. Arrays are [height, width, channels].
double ssim(std::span<const double> a, std::span<const double> b, int height, int width, int channels,
            double max_val = 1.0);
double ssim(const Image& a, const Image& b, double max_val = 1.0);

}  // namespace mvcond
