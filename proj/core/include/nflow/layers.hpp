#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "nflow/autodiff.hpp"

namespace nflow {

/// Output of one invertible layer. `logdet` is rank 0 when it is the same for
/// every sample, otherwise [N].
template <typename T>
struct LayerResult {
  Var<T> out;
  Var<T> logdet;
};

/// Binds a layer parameter. A tape that tracks parameters writes gradients
/// back into them on backward(), so such tapes must only see non-const models.
template <typename T>
Var<T> bind(Tape<T>& tape, const Parameter<T>& p) {
  return tape.parameter(const_cast<Parameter<T>&>(p));
}

/// Per-channel affine normalization, out = exp(log_scale) * h + bias, with
/// data-dependent initialization on the first batch.
template <typename T>
class ActNorm {
 public:
  ActNorm() = default;
  ActNorm(const std::string& prefix, std::size_t channels);

  bool initialized() const { return initialized_; }
  void set_initialized(bool on) { initialized_ = on; }

  /// Sets scale and bias so that this batch leaves the layer with zero mean
  /// and unit (population) variance per channel.
  void initialize(const Tensor<T>& batch);

  LayerResult<T> forward(Tape<T>& tape, Var<T> h) const;
  LayerResult<T> inverse(Tape<T>& tape, Var<T> h) const;

  std::size_t channels() const { return log_scale_.value.size(); }
  std::vector<Parameter<T>*> parameters() { return {&log_scale_, &bias_}; }
  Parameter<T>& log_scale() { return log_scale_; }
  Parameter<T>& bias() { return bias_; }

 private:
  void require_initialized() const;

  Parameter<T> log_scale_;
  Parameter<T> bias_;
  bool initialized_ = false;
};

/// Affine coupling: h1 passes through, h2' = h2 * sigmoid(s + 2) + t with
/// (s, t) = CNN(h1). With `apply_swap` the halves are exchanged before the
/// split and again before the concat, so channel order is preserved.
template <typename T>
class CouplingLayer {
 public:
  CouplingLayer() = default;
  CouplingLayer(const std::string& prefix, std::size_t channels, std::size_t hidden, std::size_t kernel,
                bool apply_swap, std::mt19937_64& rng);

  LayerResult<T> forward(Tape<T>& tape, Var<T> h) const;
  LayerResult<T> inverse(Tape<T>& tape, Var<T> h) const;

  bool apply_swap() const { return apply_swap_; }
  std::size_t kernel() const { return kernel_; }
  std::vector<Parameter<T>*> parameters() { return {&w1_, &b1_, &w2_, &b2_, &w3_, &b3_}; }

 private:
  struct Halves {
    Var<T> passive;
    Var<T> active;
  };
  Halves split_halves(Var<T> h) const;
  Var<T> join_halves(Var<T> passive, Var<T> active) const;
  std::pair<Var<T>, Var<T>> shift_and_logit(Tape<T>& tape, Var<T> passive) const;

  Parameter<T> w1_, b1_, w2_, b2_, w3_, b3_;
  std::size_t channels_ = 0;
  std::size_t kernel_ = 3;
  bool apply_swap_ = false;
};

/// Learned channel permutation out = W h per pixel; W starts as a random rotation.
template <typename T>
class InvConv1x1 {
 public:
  static constexpr double kMinAbsDet = 1e-12;

  InvConv1x1() = default;
  InvConv1x1(const std::string& prefix, std::size_t channels, std::mt19937_64& rng);

  LayerResult<T> forward(Tape<T>& tape, Var<T> h) const;
  /// Applies W^{-1}, solved from the current weights on every call.
  LayerResult<T> inverse(Tape<T>& tape, Var<T> h) const;

  T abs_det() const;
  std::vector<Parameter<T>*> parameters() { return {&weight_}; }
  Parameter<T>& weight() { return weight_; }

 private:
  Parameter<T> weight_;
};

template <typename T> Var<T> squeeze_forward(Var<T> h) { return squeeze2(h); }
template <typename T> Var<T> squeeze_inverse(Var<T> h) { return unsqueeze2(h); }

/// Keeps the first C/2 channels, factors out the last C/2.
template <typename T>
std::pair<Var<T>, Var<T>> split_forward(Var<T> h);
template <typename T>
Var<T> split_merge(Var<T> keep, Var<T> factored);

extern template class ActNorm<float>;
extern template class ActNorm<double>;
extern template class CouplingLayer<float>;
extern template class CouplingLayer<double>;
extern template class InvConv1x1<float>;
extern template class InvConv1x1<double>;

}  // namespace nflow
