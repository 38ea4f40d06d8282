#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "nflow/tensor.hpp"

namespace nflow {

/// Central-difference gradient of a scalar function, one coordinate at a time.
template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T eps) {
  if (!(eps > T(0))) throw DomainError("finite_diff_grad: eps must be positive");
  Tensor<T> grad = Tensor<T>::zeros_like(x);
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + eps;
    const T up = f(probe);
    probe[i] = orig - eps;
    const T down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (T(2) * eps);
  }
  return grad;
}

/// Max |a_i - b_i| / max(max|b|, floor), the relative error convention used by the gradient checks.
template <typename T>
T relative_error(const Tensor<T>& a, const Tensor<T>& b, T floor = T(1e-12)) {
  T num = 0;
  T den = floor;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max(den, std::abs(b[i]));
  }
  return num / den;
}

}  // namespace nflow
