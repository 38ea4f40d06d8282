#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "nflow/tensor.hpp"

namespace nflow {

/// A named trainable tensor. Gradients are accumulated into `grad` by Tape::backward.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  void zero_grad() { grad = Tensor<T>::zeros_like(value); }
};

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const;
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape<T>;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode recording of one evaluation. A tape is built per evaluation,
/// differentiated at most once, then dropped. Confined to one thread.
template <typename T>
class Tape {
 public:
  /// Vector-Jacobian product: receives dL/d(output) and accumulates into inputs.
  using Backward = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  Var<T> variable(Tensor<T> value);

  /// Binds a parameter by reference; the parameter must outlive the tape.
  /// Gradients flow into it only while parameter tracking is on.
  Var<T> parameter(Parameter<T>& p);
  void set_track_parameters(bool on) { track_parameters_ = on; }
  bool track_parameters() const { return track_parameters_; }

  /// Records an op output. The node requires a gradient iff any input does;
  /// otherwise `backward` is discarded.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward backward);
  Var<T> record(Tensor<T> value, std::span<const Var<T>> inputs, Backward backward);

  const Tensor<T>& value(std::size_t id) const { return *nodes_[id].value_ptr; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  void accumulate(Var<T> v, const Tensor<T>& g);
  /// Gradient buffer of `v`, zero-filled on first access.
  Tensor<T>& grad_buffer(Var<T> v);

  /// Propagates d(output)/d(.) through the recorded graph. `output` must hold one value.
  void backward(Var<T> output);
  /// Gradient of the last backward() w.r.t. `v`; zeros when `v` is off every path.
  Tensor<T> grad(Var<T> v) const;
  std::vector<Tensor<T>> gradients(Var<T> output, std::span<const Var<T>> targets);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* value_ptr = nullptr;
    Tensor<T> grad;
    Backward backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  Var<T> push(Node node);

  std::deque<Node> nodes_;
  bool track_parameters_ = true;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->requires_grad(id_);
}

// ---------------------------------------------------------------------------
// Differentiable operations. Binary ops accept equal shapes or a one-element
// operand, which is broadcast.

enum class Elementwise { sigmoid, log_sigmoid, log, exp, abs, relu, negate, square };

template <typename T> Var<T> elementwise(Var<T> x, Elementwise kind);
template <typename T> Var<T> sigmoid(Var<T> x);
/// log(sigmoid(x)) evaluated without underflow.
template <typename T> Var<T> log_sigmoid(Var<T> x);
template <typename T> Var<T> log(Var<T> x);
template <typename T> Var<T> exp(Var<T> x);
template <typename T> Var<T> abs(Var<T> x);
template <typename T> Var<T> relu(Var<T> x);
template <typename T> Var<T> negate(Var<T> x);
template <typename T> Var<T> square(Var<T> x);
template <typename T> Var<T> scale(Var<T> x, T factor);
template <typename T> Var<T> add_scalar(Var<T> x, T offset);

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> div(Var<T> a, Var<T> b);

/// Sum of all entries, rank-0 result.
template <typename T> Var<T> sum(Var<T> x);
/// Sum over every axis but the first: [N, ...] -> [N].
template <typename T> Var<T> sum_per_sample(Var<T> x);
template <typename T> Var<T> reshape(Var<T> x, Shape shape);

/// Cross-correlation over [N,C,H,W] inputs with square kernels [Co,Ci,k,k].
template <typename T> Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, std::size_t padding);

template <typename T> Var<T> slice_channels(Var<T> x, std::size_t begin, std::size_t end);
template <typename T> Var<T> concat_channels(Var<T> a, Var<T> b);
/// [N,C,H,W] -> [N,4C,H/2,W/2]; the 2x2 block (tl, tr, bl, br) of channel k lands in 4k..4k+3.
template <typename T> Var<T> squeeze2(Var<T> x);
template <typename T> Var<T> unsqueeze2(Var<T> x);

/// out[n,c,...] = x[n,c,...] * s[c]
template <typename T> Var<T> channel_scale(Var<T> x, Var<T> s);
/// out[n,c,...] = x[n,c,...] + b[c]
template <typename T> Var<T> channel_shift(Var<T> x, Var<T> b);
/// Per-pixel channel mixing: out[n,:,y,x] = M * x[n,:,y,x].
template <typename T> Var<T> channel_matmul(Var<T> x, Var<T> m);

/// Inverse of a square matrix; throws DomainError when |det| <= 1e-12.
template <typename T> Var<T> matrix_inverse(Var<T> m);
template <typename T> Var<T> log_abs_det(Var<T> m);

/// Sum_i log N(z_i; mean, std^2). Rank-0 result.
template <typename T> Var<T> gaussian_logpdf(Var<T> z, T mean, T std);
template <typename T> Var<T> gaussian_logpdf_per_sample(Var<T> z, T mean, T std);

/// Concatenates [N, ...] chunks into [N, total] (chunk order, then row-major).
template <typename T> Var<T> flatten_samples(std::span<const Var<T>> chunks);
/// Columns [offset, offset + volume(sample_shape)) of [N, n] reshaped to [N, sample_shape...].
template <typename T> Var<T> slice_features(Var<T> flat, std::size_t offset, const Shape& sample_shape);

/// A fixed linear map with its adjoint supplying the VJP.
template <typename T>
Var<T> linear_map(Var<T> x, const std::function<Tensor<T>(const Tensor<T>&)>& forward,
                  const std::function<Tensor<T>(const Tensor<T>&)>& adjoint);

template <typename T> Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T> Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T> Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }
template <typename T> Var<T> operator/(Var<T> a, Var<T> b) { return div(a, b); }
template <typename T> Var<T> operator-(Var<T> a) { return negate(a); }
template <typename T> Var<T> operator*(T c, Var<T> a) { return scale(a, c); }
template <typename T> Var<T> operator*(Var<T> a, T c) { return scale(a, c); }
template <typename T> Var<T> operator+(Var<T> a, T c) { return add_scalar(a, c); }

/// Plain tensor convolution used by the op and by benchmarks.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                         std::size_t padding);

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace nflow
