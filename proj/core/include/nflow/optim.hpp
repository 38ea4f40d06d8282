#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "nflow/tensor.hpp"

namespace nflow {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected Adam over a fixed list of tensors. Moment buffers are
/// allocated on the first step and must keep their shapes afterwards.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig config);

  void step(std::span<Tensor<T>* const> values, std::span<const Tensor<T>* const> grads);
  void step(Tensor<T>& value, const Tensor<T>& grad);

  std::size_t steps() const { return t_; }
  const AdamConfig& config() const { return config_; }
  const std::vector<Tensor<T>>& first_moment() const { return m_; }
  const std::vector<Tensor<T>>& second_moment() const { return v_; }

 private:
  AdamConfig config_;
  std::size_t t_ = 0;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
};

extern template class Adam<float>;
extern template class Adam<double>;

}  // namespace nflow
