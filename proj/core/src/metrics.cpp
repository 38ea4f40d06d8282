#include "nflow/metrics.hpp"

#include <array>
#include <cmath>
#include <limits>

namespace nflow {

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

std::array<double, kWindow> gaussian_weights() {
  std::array<double, kWindow> w{};
  double total = 0;
  for (int i = 0; i < kWindow; ++i) {
    const double d = i - kWindow / 2;
    w[i] = std::exp(-d * d / (2 * kSigma * kSigma));
    total += w[i];
  }
  for (double& v : w) v /= total;
  return w;
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) +
                     " differ");
  }
}

}  // namespace

template <typename T>
double psnr(const Tensor<T>& x, const Tensor<T>& x_hat) {
  require_same_shape(x, x_hat, "psnr");
  double se = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i]) - static_cast<double>(x_hat[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(x.size());
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

template <typename T>
double ssim(const Tensor<T>& x, const Tensor<T>& x_hat) {
  require_same_shape(x, x_hat, "ssim");
  std::size_t C = 1, H = 0, W = 0;
  if (x.rank() == 3) {
    C = x.dim(0);
    H = x.dim(1);
    W = x.dim(2);
  } else if (x.rank() == 2) {
    H = x.dim(0);
    W = x.dim(1);
  } else {
    throw ShapeError("ssim: expected [C, H, W] or [H, W], got " + shape_string(x.shape()));
  }
  if (H < kWindow || W < kWindow) {
    throw ShapeError("ssim: image " + std::to_string(H) + "x" + std::to_string(W) + " is smaller than the " +
                     std::to_string(kWindow) + "x" + std::to_string(kWindow) + " window");
  }
  const auto w = gaussian_weights();
  const std::size_t Ho = H - kWindow + 1, Wo = W - kWindow + 1;
  double channel_sum = 0;
  for (std::size_t c = 0; c < C; ++c) {
    const T* a = x.ptr() + c * H * W;
    const T* b = x_hat.ptr() + c * H * W;
    double map_sum = 0;
    for (std::size_t i = 0; i < Ho; ++i) {
      for (std::size_t j = 0; j < Wo; ++j) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int u = 0; u < kWindow; ++u) {
          for (int v = 0; v < kWindow; ++v) {
            const double g = w[u] * w[v];
            const double pa = a[(i + u) * W + j + v];
            const double pb = b[(i + u) * W + j + v];
            ma += g * pa;
            mb += g * pb;
            saa += g * pa * pa;
            sbb += g * pb * pb;
            sab += g * pa * pb;
          }
        }
        const double va = saa - ma * ma;
        const double vb = sbb - mb * mb;
        const double cov = sab - ma * mb;
        map_sum += ((2 * ma * mb + kC1) * (2 * cov + kC2)) / ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
      }
    }
    channel_sum += map_sum / static_cast<double>(Ho * Wo);
  }
  return channel_sum / static_cast<double>(C);
}

template double psnr(const Tensor<float>&, const Tensor<float>&);
template double psnr(const Tensor<double>&, const Tensor<double>&);
template double ssim(const Tensor<float>&, const Tensor<float>&);
template double ssim(const Tensor<double>&, const Tensor<double>&);

}  // namespace nflow
