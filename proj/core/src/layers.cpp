#include "nflow/layers.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace nflow {

namespace {

template <typename T>
Parameter<T> make_param(const std::string& name, Shape shape) {
  Parameter<T> p{name, Tensor<T>(std::move(shape)), {}};
  p.zero_grad();
  return p;
}

template <typename T>
void fill_normal(Tensor<T>& t, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(dist(rng));
}

template <typename T>
void require_even_channels(Var<T> h, const char* what) {
  const Nchw d = as_nchw(h.shape(), what);
  if (d.c % 2) {
    throw ShapeError(std::string(what) + ": channel count " + std::to_string(d.c) + " is odd");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// ActNorm

template <typename T>
ActNorm<T>::ActNorm(const std::string& prefix, std::size_t channels)
    : log_scale_(make_param<T>(prefix + ".log_scale", {channels})),
      bias_(make_param<T>(prefix + ".bias", {channels})) {}

template <typename T>
void ActNorm<T>::initialize(const Tensor<T>& batch) {
  const Nchw d = as_nchw(batch.shape(), "actnorm_init");
  if (d.c != channels()) {
    throw ShapeError("actnorm_init: batch has " + std::to_string(d.c) + " channels, layer has " +
                     std::to_string(channels()));
  }
  const std::size_t count = d.n * d.plane();
  if (count < 2) throw DomainError("actnorm_init: need at least 2 values per channel, got " + std::to_string(count));
  for (std::size_t c = 0; c < d.c; ++c) {
    double mean = 0;
    for (std::size_t n = 0; n < d.n; ++n) {
      const T* p = batch.ptr() + n * d.sample() + c * d.plane();
      for (std::size_t i = 0; i < d.plane(); ++i) mean += p[i];
    }
    mean /= static_cast<double>(count);
    double var = 0;
    for (std::size_t n = 0; n < d.n; ++n) {
      const T* p = batch.ptr() + n * d.sample() + c * d.plane();
      for (std::size_t i = 0; i < d.plane(); ++i) var += (p[i] - mean) * (p[i] - mean);
    }
    var /= static_cast<double>(count);
    if (!(var > 1e-20)) {
      throw DomainError("actnorm_init: channel " + std::to_string(c) + " of " + log_scale_.name +
                        " has zero variance");
    }
    const double std = std::sqrt(var);
    log_scale_.value[c] = static_cast<T>(-std::log(std));
    bias_.value[c] = static_cast<T>(-mean / std);
  }
  initialized_ = true;
}

template <typename T>
void ActNorm<T>::require_initialized() const {
  if (!initialized_) throw Error("actnorm " + log_scale_.name + " used before initialization");
}

template <typename T>
LayerResult<T> ActNorm<T>::forward(Tape<T>& tape, Var<T> h) const {
  require_initialized();
  const Nchw d = as_nchw(h.shape(), "actnorm");
  Var<T> logs = bind(tape, log_scale_);
  Var<T> out = channel_shift(channel_scale(h, exp(logs)), bind(tape, bias_));
  return {out, scale(sum(logs), static_cast<T>(d.plane()))};
}

template <typename T>
LayerResult<T> ActNorm<T>::inverse(Tape<T>& tape, Var<T> h) const {
  require_initialized();
  const Nchw d = as_nchw(h.shape(), "actnorm");
  Var<T> logs = bind(tape, log_scale_);
  Var<T> out = channel_scale(channel_shift(h, negate(bind(tape, bias_))), exp(negate(logs)));
  return {out, scale(sum(logs), -static_cast<T>(d.plane()))};
}

// ---------------------------------------------------------------------------
// Coupling

template <typename T>
CouplingLayer<T>::CouplingLayer(const std::string& prefix, std::size_t channels, std::size_t hidden,
                                std::size_t kernel, bool apply_swap, std::mt19937_64& rng)
    : channels_(channels), kernel_(kernel), apply_swap_(apply_swap) {
  if (channels % 2) throw ShapeError("coupling " + prefix + ": channel count " + std::to_string(channels) + " is odd");
  if (kernel != 1 && kernel != 3) throw ShapeError("coupling " + prefix + ": kernel must be 1 or 3");
  const std::size_t half = channels / 2;
  w1_ = make_param<T>(prefix + ".conv1.weight", {hidden, half, kernel, kernel});
  b1_ = make_param<T>(prefix + ".conv1.bias", {hidden});
  w2_ = make_param<T>(prefix + ".conv2.weight", {hidden, hidden, 1, 1});
  b2_ = make_param<T>(prefix + ".conv2.bias", {hidden});
  w3_ = make_param<T>(prefix + ".conv3.weight", {channels, hidden, kernel, kernel});
  b3_ = make_param<T>(prefix + ".conv3.bias", {channels});
  fill_normal(w1_.value, std::sqrt(2.0 / static_cast<double>(half * kernel * kernel)), rng);
  fill_normal(w2_.value, std::sqrt(2.0 / static_cast<double>(hidden)), rng);
  // conv3 stays zero: the layer starts as h2' = h2 * sigmoid(2).
}

template <typename T>
typename CouplingLayer<T>::Halves CouplingLayer<T>::split_halves(Var<T> h) const {
  require_even_channels(h, "coupling");
  const std::size_t c = as_nchw(h.shape(), "coupling").c;
  if (c != channels_) {
    throw ShapeError("coupling: input has " + std::to_string(c) + " channels, layer expects " +
                     std::to_string(channels_));
  }
  Var<T> first = slice_channels(h, 0, c / 2);
  Var<T> second = slice_channels(h, c / 2, c);
  if (apply_swap_) return {second, first};
  return {first, second};
}

template <typename T>
Var<T> CouplingLayer<T>::join_halves(Var<T> passive, Var<T> active) const {
  if (apply_swap_) return concat_channels(active, passive);
  return concat_channels(passive, active);
}

template <typename T>
std::pair<Var<T>, Var<T>> CouplingLayer<T>::shift_and_logit(Tape<T>& tape, Var<T> passive) const {
  const std::size_t pad = (kernel_ - 1) / 2;
  Var<T> a = relu(conv2d(passive, bind(tape, w1_), bind(tape, b1_), pad));
  a = relu(conv2d(a, bind(tape, w2_), bind(tape, b2_), 0));
  Var<T> st = conv2d(a, bind(tape, w3_), bind(tape, b3_), pad);
  const std::size_t half = channels_ / 2;
  Var<T> logit = add_scalar(slice_channels(st, 0, half), T(2));
  Var<T> shift = slice_channels(st, half, channels_);
  return {logit, shift};
}

template <typename T>
LayerResult<T> CouplingLayer<T>::forward(Tape<T>& tape, Var<T> h) const {
  const Halves parts = split_halves(h);
  const auto [logit, shift] = shift_and_logit(tape, parts.passive);
  Var<T> active = add(mul(parts.active, sigmoid(logit)), shift);
  return {join_halves(parts.passive, active), sum_per_sample(log_sigmoid(logit))};
}

template <typename T>
LayerResult<T> CouplingLayer<T>::inverse(Tape<T>& tape, Var<T> h) const {
  const Halves parts = split_halves(h);
  const auto [logit, shift] = shift_and_logit(tape, parts.passive);
  Var<T> active = div(sub(parts.active, shift), sigmoid(logit));
  return {join_halves(parts.passive, active), negate(sum_per_sample(log_sigmoid(logit)))};
}

// ---------------------------------------------------------------------------
// Invertible 1x1 convolution

template <typename T>
InvConv1x1<T>::InvConv1x1(const std::string& prefix, std::size_t channels, std::mt19937_64& rng)
    : weight_(make_param<T>(prefix + ".weight", {channels, channels})) {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic>;
  const auto c = static_cast<Eigen::Index>(channels);
  Mat g(c, c);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (Eigen::Index i = 0; i < c; ++i)
    for (Eigen::Index j = 0; j < c; ++j) g(i, j) = dist(rng);
  Eigen::HouseholderQR<Mat> qr(g);
  Mat q = qr.householderQ();
  const Mat r = qr.matrixQR().template triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < c; ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  for (Eigen::Index i = 0; i < c; ++i)
    for (Eigen::Index j = 0; j < c; ++j) weight_.value[static_cast<std::size_t>(i * c + j)] = static_cast<T>(q(i, j));
}

template <typename T>
T InvConv1x1<T>::abs_det() const {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto c = static_cast<Eigen::Index>(weight_.value.dim(0));
  Mat w(c, c);
  for (Eigen::Index i = 0; i < c * c; ++i) w.data()[i] = weight_.value[static_cast<std::size_t>(i)];
  return static_cast<T>(std::abs(w.partialPivLu().determinant()));
}

template <typename T>
LayerResult<T> InvConv1x1<T>::forward(Tape<T>& tape, Var<T> h) const {
  const Nchw d = as_nchw(h.shape(), "invconv");
  Var<T> w = bind(tape, weight_);
  Var<T> ld = log_abs_det(w);
  if (!(static_cast<double>(ld.value().item()) > std::log(kMinAbsDet))) {
    throw DomainError("invconv " + weight_.name + ": |det W| below " + std::to_string(kMinAbsDet));
  }
  return {channel_matmul(h, w), scale(ld, static_cast<T>(d.plane()))};
}

template <typename T>
LayerResult<T> InvConv1x1<T>::inverse(Tape<T>& tape, Var<T> h) const {
  const Nchw d = as_nchw(h.shape(), "invconv");
  Var<T> w = bind(tape, weight_);
  Var<T> w_inv = matrix_inverse(w);
  return {channel_matmul(h, w_inv), scale(log_abs_det(w), -static_cast<T>(d.plane()))};
}

// ---------------------------------------------------------------------------
// Split

template <typename T>
std::pair<Var<T>, Var<T>> split_forward(Var<T> h) {
  require_even_channels(h, "split");
  const std::size_t c = as_nchw(h.shape(), "split").c;
  return {slice_channels(h, 0, c / 2), slice_channels(h, c / 2, c)};
}

template <typename T>
Var<T> split_merge(Var<T> keep, Var<T> factored) {
  return concat_channels(keep, factored);
}

template class ActNorm<float>;
template class ActNorm<double>;
template class CouplingLayer<float>;
template class CouplingLayer<double>;
template class InvConv1x1<float>;
template class InvConv1x1<double>;
template std::pair<Var<float>, Var<float>> split_forward(Var<float>);
template std::pair<Var<double>, Var<double>> split_forward(Var<double>);
template Var<float> split_merge(Var<float>, Var<float>);
template Var<double> split_merge(Var<double>, Var<double>);

}  // namespace nflow
