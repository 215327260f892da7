// SPDX-License-Identifier: Apache-2.0
#include <array>
#include <cmath>
#include <vector>

#include "uniwrv/analysis.hpp"
#include "uniwrv/errors.hpp"
#include "uniwrv/tensorkit/tensor.hpp"

namespace uniwrv::analysis {

namespace {

void require_pair(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rank() != 3 || a.dim(2) != 3 || a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": need two [H,W,3] images of one size, got " +
                         tensorkit::shape_str(a.shape()) + " and " + tensorkit::shape_str(b.shape()));
  }
}

std::vector<double> luminance(const Tensor& img) {
  const std::size_t n = img.dim(0) * img.dim(1);
  auto d = img.data();
  std::vector<double> y(n);
  for (std::size_t p = 0; p < n; ++p) y[p] = 0.299 * d[p * 3] + 0.587 * d[p * 3 + 1] + 0.114 * d[p * 3 + 2];
  return y;
}

constexpr int kTaps = 11;

std::array<double, kTaps> gaussian_taps() {
  std::array<double, kTaps> g{};
  double s = 0;
  for (int i = 0; i < kTaps; ++i) {
    const double x = i - kTaps / 2;
    g[i] = std::exp(-x * x / (2 * 1.5 * 1.5));
    s += g[i];
  }
  for (double& v : g) v /= s;
  return g;
}

// Separable valid-region filtering of an H x W plane.
std::vector<double> blur(const std::vector<double>& in, std::size_t H, std::size_t W) {
  static const auto g = gaussian_taps();
  const std::size_t Wo = W - kTaps + 1, Ho = H - kTaps + 1;
  std::vector<double> rows(H * Wo, 0.0), out(Ho * Wo, 0.0);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < Wo; ++x) {
      double acc = 0;
      for (int t = 0; t < kTaps; ++t) acc += g[t] * in[y * W + x + t];
      rows[y * Wo + x] = acc;
    }
  for (std::size_t y = 0; y < Ho; ++y)
    for (std::size_t x = 0; x < Wo; ++x) {
      double acc = 0;
      for (int t = 0; t < kTaps; ++t) acc += g[t] * rows[(y + t) * Wo + x];
      out[y * Wo + x] = acc;
    }
  return out;
}

}  // namespace

double psnr(const Tensor& a, const Tensor& b) {
  require_pair(a, b, "psnr");
  auto x = a.data(), y = b.data();
  double se = 0;
  for (std::size_t i = 0; i < x.size(); ++i) se += (x[i] - y[i]) * (x[i] - y[i]);
  const double mse = se / static_cast<double>(x.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

double ssim(const Tensor& a, const Tensor& b) {
  require_pair(a, b, "ssim");
  const std::size_t H = a.dim(0), W = a.dim(1);
  if (H < kTaps || W < kTaps) throw DimensionError("ssim: images must be at least 11x11");
  const auto x = luminance(a), y = luminance(b);
  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = blur(x, H, W), my = blur(y, H, W), sxx = blur(xx, H, W), syy = blur(yy, H, W), sxy = blur(xy, H, W);
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
    total += ((2 * mx[i] * my[i] + c1) * (2 * cxy + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(mx.size());
}

}  // namespace uniwrv::analysis
