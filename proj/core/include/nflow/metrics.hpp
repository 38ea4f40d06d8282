#pragma once

#include "nflow/tensor.hpp"

namespace nflow {

/// 10 log10(1 / MSE) for images in [0, 1]; +infinity when they are equal.
template <typename T>
double psnr(const Tensor<T>& x, const Tensor<T>& x_hat);

/// Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5), averaged over
/// channels. Accepts [C, H, W] or [H, W].
template <typename T>
double ssim(const Tensor<T>& x, const Tensor<T>& x_hat);

}  // namespace nflow
