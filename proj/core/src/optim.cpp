#include "nflow/optim.hpp"

#include <cmath>

namespace nflow {

template <typename T>
Adam<T>::Adam(AdamConfig config) : config_(config) {
  if (!(config.learning_rate >= 0)) throw DomainError("adam: learning rate must be >= 0");
  if (!(config.beta1 >= 0 && config.beta1 < 1)) throw DomainError("adam: beta1 must lie in [0, 1)");
  if (!(config.beta2 >= 0 && config.beta2 < 1)) throw DomainError("adam: beta2 must lie in [0, 1)");
}

template <typename T>
void Adam<T>::step(std::span<Tensor<T>* const> values, std::span<const Tensor<T>* const> grads) {
  if (values.size() != grads.size()) throw ShapeError("adam: values/grads count mismatch");
  if (m_.empty()) {
    for (const Tensor<T>* v : values) {
      m_.push_back(Tensor<T>::zeros_like(*v));
      v_.push_back(Tensor<T>::zeros_like(*v));
    }
  }
  if (m_.size() != values.size()) throw ShapeError("adam: tensor list changed between steps");
  ++t_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const double lr = config_.learning_rate;
  const double eps = config_.epsilon;
  for (std::size_t k = 0; k < values.size(); ++k) {
    Tensor<T>& x = *values[k];
    const Tensor<T>& g = *grads[k];
    if (g.size() != x.size() || m_[k].size() != x.size()) {
      throw ShapeError("adam: shape mismatch at slot " + std::to_string(k));
    }
    Tensor<T>& m = m_[k];
    Tensor<T>& v = v_[k];
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double gi = g[i];
      const double mi = b1 * m[i] + (1.0 - b1) * gi;
      const double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      x[i] -= static_cast<T>(lr * (mi / c1) / (std::sqrt(vi / c2) + eps));
    }
  }
}

template <typename T>
void Adam<T>::step(Tensor<T>& value, const Tensor<T>& grad) {
  Tensor<T>* values[] = {&value};
  const Tensor<T>* grads[] = {&grad};
  step(std::span<Tensor<T>* const>(values), std::span<const Tensor<T>* const>(grads));
}

template class Adam<float>;
template class Adam<double>;

}  // namespace nflow
