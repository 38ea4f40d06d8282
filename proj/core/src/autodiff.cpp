#include "nflow/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <memory>
#include <cmath>
#include <numbers>
#include <utility>

namespace nflow {

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Var<T> Tape<T>::push(Node node) {
  nodes_.push_back(std::move(node));
  Node& n = nodes_.back();
  if (!n.value_ptr) n.value_ptr = &n.owned;
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.owned = std::move(value);
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::variable(Tensor<T> value) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::parameter(Parameter<T>& p) {
  Node n;
  n.value_ptr = &p.value;
  if (track_parameters_) {
    n.param = &p;
    n.requires_grad = true;
  }
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::span<const Var<T>> inputs, Backward backward) {
  Node n;
  n.owned = std::move(value);
  for (const Var<T>& v : inputs) {
    if (v.tape_ != this) throw Error("op input recorded on a different tape");
    n.requires_grad = n.requires_grad || nodes_[v.id_].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward backward) {
  return record(std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()),
                std::move(backward));
}

template <typename T>
Tensor<T>& Tape<T>::grad_buffer(Var<T> v) {
  Node& n = nodes_[v.id_];
  if (n.grad.empty()) n.grad = Tensor<T>::zeros_like(*n.value_ptr);
  return n.grad;
}

template <typename T>
void Tape<T>::accumulate(Var<T> v, const Tensor<T>& g) {
  Node& n = nodes_[v.id_];
  if (!n.requires_grad) return;
  if (g.size() != n.value_ptr->size()) {
    throw ShapeError("gradient of " + shape_string(g.shape()) + " for value of " +
                     shape_string(n.value_ptr->shape()));
  }
  if (n.grad.empty()) {
    n.grad = Tensor<T>(n.value_ptr->shape(), g.storage());
    return;
  }
  T* dst = n.grad.ptr();
  const T* src = g.ptr();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
}

template <typename T>
void Tape<T>::backward(Var<T> output) {
  if (output.tape_ != this) throw Error("backward: output belongs to another tape");
  if (output.size() != 1) {
    throw ShapeError("backward: output must be a scalar, got " + shape_string(output.shape()));
  }
  for (Node& n : nodes_) n.grad = Tensor<T>();
  if (!nodes_[output.id_].requires_grad) return;
  nodes_[output.id_].grad = Tensor<T>(output.shape(), T(1));
  for (std::size_t i = output.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty()) continue;
    if (n.backward) n.backward(*this, n.grad);
    if (n.param) {
      Parameter<T>& p = *n.param;
      if (p.grad.size() != p.value.size()) p.zero_grad();
      for (std::size_t k = 0; k < p.grad.size(); ++k) p.grad[k] += n.grad[k];
    }
  }
}

template <typename T>
Tensor<T> Tape<T>::grad(Var<T> v) const {
  const Node& n = nodes_[v.id_];
  if (n.grad.empty()) return Tensor<T>::zeros_like(*n.value_ptr);
  return n.grad;
}

template <typename T>
std::vector<Tensor<T>> Tape<T>::gradients(Var<T> output, std::span<const Var<T>> targets) {
  backward(output);
  std::vector<Tensor<T>> out;
  out.reserve(targets.size());
  for (const Var<T>& t : targets) out.push_back(grad(t));
  return out;
}

template class Tape<float>;
template class Tape<double>;

// ---------------------------------------------------------------------------
// Elementwise

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
T sigmoid_value(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
T log_sigmoid_value(T x) {
  // log(1/(1+e^-x)) = -softplus(-x)
  if (x >= 0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

template <typename T, typename F, typename G>
Var<T> unary(Var<T> x, F value_fn, G deriv_fn) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = value_fn(xv[i]);
  return x.tape().record(std::move(out), {x}, [x, deriv_fn](Tape<T>& tape, const Tensor<T>& g) {
    if (!x.requires_grad()) return;
    const Tensor<T>& xv = x.value();
    Tensor<T>& gx = tape.grad_buffer(x);
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += g[i] * deriv_fn(xv[i]);
  });
}

}  // namespace

template <typename T>
Var<T> sigmoid(Var<T> x) {
  return unary(x, [](T v) { return sigmoid_value(v); },
               [](T v) {
                 const T s = sigmoid_value(v);
                 return s * (T(1) - s);
               });
}

template <typename T>
Var<T> log_sigmoid(Var<T> x) {
  return unary(x, [](T v) { return log_sigmoid_value(v); },
               [](T v) { return T(1) - sigmoid_value(v); });
}

template <typename T>
Var<T> log(Var<T> x) {
  const Tensor<T>& xv = x.value();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    if (!(xv[i] > T(0))) {
      throw DomainError("log: non-positive value " + std::to_string(xv[i]) + " at index " +
                        std::to_string(i));
    }
  }
  return unary(x, [](T v) { return std::log(v); }, [](T v) { return T(1) / v; });
}

template <typename T>
Var<T> exp(Var<T> x) {
  return unary(x, [](T v) { return std::exp(v); }, [](T v) { return std::exp(v); });
}

template <typename T>
Var<T> abs(Var<T> x) {
  return unary(x, [](T v) { return std::abs(v); },
               [](T v) { return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0)); });
}

template <typename T>
Var<T> relu(Var<T> x) {
  return unary(x, [](T v) { return v > 0 ? v : T(0); }, [](T v) { return v > 0 ? T(1) : T(0); });
}

template <typename T>
Var<T> negate(Var<T> x) {
  return unary(x, [](T v) { return -v; }, [](T) { return T(-1); });
}

template <typename T>
Var<T> square(Var<T> x) {
  return unary(x, [](T v) { return v * v; }, [](T v) { return T(2) * v; });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  return unary(x, [factor](T v) { return v * factor; }, [factor](T) { return factor; });
}

template <typename T>
Var<T> add_scalar(Var<T> x, T offset) {
  return unary(x, [offset](T v) { return v + offset; }, [](T) { return T(1); });
}

template <typename T>
Var<T> elementwise(Var<T> x, Elementwise kind) {
  switch (kind) {
    case Elementwise::sigmoid: return sigmoid(x);
    case Elementwise::log_sigmoid: return log_sigmoid(x);
    case Elementwise::log: return log(x);
    case Elementwise::exp: return exp(x);
    case Elementwise::abs: return abs(x);
    case Elementwise::relu: return relu(x);
    case Elementwise::negate: return negate(x);
    case Elementwise::square: return square(x);
  }
  throw Error("elementwise: unknown kind");
}

// ---------------------------------------------------------------------------
// Binary with one-element broadcast

namespace {

enum class BinaryKind { add, sub, mul, div };

template <typename T>
Var<T> binary(Var<T> a, Var<T> b, BinaryKind kind) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const bool same = av.shape() == bv.shape();
  const bool b_scalar = !same && bv.size() == 1;
  const bool a_scalar = !same && !b_scalar && av.size() == 1;
  if (!same && !a_scalar && !b_scalar) {
    throw ShapeError("binary op: shapes " + shape_string(av.shape()) + " and " +
                     shape_string(bv.shape()) + " are neither equal nor scalar-broadcastable");
  }
  const Shape& out_shape = a_scalar ? bv.shape() : av.shape();
  const std::size_t n = shape_volume(out_shape);
  const std::size_t sa = a_scalar ? 0 : 1;
  const std::size_t sb = b_scalar ? 0 : 1;
  Tensor<T> out(out_shape);
  for (std::size_t i = 0; i < n; ++i) {
    const T x = av[i * sa];
    const T y = bv[i * sb];
    switch (kind) {
      case BinaryKind::add: out[i] = x + y; break;
      case BinaryKind::sub: out[i] = x - y; break;
      case BinaryKind::mul: out[i] = x * y; break;
      case BinaryKind::div: out[i] = x / y; break;
    }
  }
  return a.tape().record(std::move(out), {a, b},
                         [a, b, kind, n, sa, sb](Tape<T>& tape, const Tensor<T>& g) {
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    if (a.requires_grad()) {
      Tensor<T>& ga = tape.grad_buffer(a);
      for (std::size_t i = 0; i < n; ++i) {
        T d = 0;
        switch (kind) {
          case BinaryKind::add:
          case BinaryKind::sub: d = g[i]; break;
          case BinaryKind::mul: d = g[i] * bv[i * sb]; break;
          case BinaryKind::div: d = g[i] / bv[i * sb]; break;
        }
        ga[i * sa] += d;
      }
    }
    if (b.requires_grad()) {
      Tensor<T>& gb = tape.grad_buffer(b);
      for (std::size_t i = 0; i < n; ++i) {
        T d = 0;
        switch (kind) {
          case BinaryKind::add: d = g[i]; break;
          case BinaryKind::sub: d = -g[i]; break;
          case BinaryKind::mul: d = g[i] * av[i * sa]; break;
          case BinaryKind::div: {
            const T y = bv[i * sb];
            d = -g[i] * av[i * sa] / (y * y);
            break;
          }
        }
        gb[i * sb] += d;
      }
    }
  });
}

}  // namespace

template <typename T> Var<T> add(Var<T> a, Var<T> b) { return binary(a, b, BinaryKind::add); }
template <typename T> Var<T> sub(Var<T> a, Var<T> b) { return binary(a, b, BinaryKind::sub); }
template <typename T> Var<T> mul(Var<T> a, Var<T> b) { return binary(a, b, BinaryKind::mul); }
template <typename T> Var<T> div(Var<T> a, Var<T> b) { return binary(a, b, BinaryKind::div); }

// ---------------------------------------------------------------------------
// Reductions and reshapes

template <typename T>
Var<T> sum(Var<T> x) {
  const Tensor<T>& xv = x.value();
  T s = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i];
  return x.tape().record(Tensor<T>::scalar(s), {x}, [x](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T>& gx = tape.grad_buffer(x);
    const T d = g[0];
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += d;
  });
}

template <typename T>
Var<T> sum_per_sample(Var<T> x) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() == 0) throw ShapeError("sum_per_sample: rank-0 input");
  const std::size_t n = xv.dim(0);
  const std::size_t inner = xv.size() / n;
  Tensor<T> out(Shape{n});
  for (std::size_t s = 0; s < n; ++s) {
    T acc = 0;
    const T* p = xv.ptr() + s * inner;
    for (std::size_t i = 0; i < inner; ++i) acc += p[i];
    out[s] = acc;
  }
  return x.tape().record(std::move(out), {x}, [x, n, inner](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T>& gx = tape.grad_buffer(x);
    for (std::size_t s = 0; s < n; ++s) {
      T* p = gx.ptr() + s * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] += g[s];
    }
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return x.tape().record(std::move(out), {x}, [x](Tape<T>& tape, const Tensor<T>& g) {
    tape.accumulate(x, g);
  });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeometry {
  Nchw in;
  std::size_t cout, k, pad, ho, wo;
  std::size_t col_rows() const { return in.c * k * k; }
  std::size_t col_cols() const { return ho * wo; }
  bool direct() const { return k == 1 && pad == 0; }
};

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                           std::size_t padding) {
  const Nchw in = as_nchw(x.shape(), "conv2d input");
  if (w.rank() != 4) throw ShapeError("conv2d: weight must be rank 4, got " + shape_string(w.shape()));
  if (w.dim(1) != in.c) {
    throw ShapeError("conv2d: axis 1 (input channels) of weight is " + std::to_string(w.dim(1)) +
                     " but input has " + std::to_string(in.c) + " channels");
  }
  if (w.dim(2) != w.dim(3)) {
    throw ShapeError("conv2d: axes 2/3 (kernel height/width) differ: " + shape_string(w.shape()));
  }
  const std::size_t k = w.dim(2);
  if (b.size() != w.dim(0)) {
    throw ShapeError("conv2d: axis 0 (output channels) of bias is " + std::to_string(b.size()) +
                     ", expected " + std::to_string(w.dim(0)));
  }
  if (in.h + 2 * padding < k) {
    throw ShapeError("conv2d: axis H (height) " + std::to_string(in.h) + " too small for kernel " +
                     std::to_string(k) + " with padding " + std::to_string(padding));
  }
  if (in.w + 2 * padding < k) {
    throw ShapeError("conv2d: axis W (width) " + std::to_string(in.w) + " too small for kernel " +
                     std::to_string(k) + " with padding " + std::to_string(padding));
  }
  return {in, w.dim(0), k, padding, in.h + 2 * padding - k + 1, in.w + 2 * padding - k + 1};
}

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::size_t k = g.k;
  for (std::size_t c = 0; c < g.in.c; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = col + ((c * k + ky) * k + kx) * g.col_cols();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in.h)) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = x + (c * g.in.h + static_cast<std::size_t>(iy)) * g.in.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in.w)) ? T(0)
                                                                            : src[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* x) {
  const std::size_t k = g.k;
  for (std::size_t c = 0; c < g.in.c; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = col + ((c * k + ky) * k + kx) * g.col_cols();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in.h)) continue;
          T* dst = x + (c * g.in.h + static_cast<std::size_t>(iy)) * g.in.w;
          const T* src = row + oy * g.wo;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in.w)) continue;
            dst[static_cast<std::size_t>(ix)] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
Shape conv_output_shape(const Tensor<T>& x, const ConvGeometry& g) {
  if (x.rank() == 3) return {g.cout, g.ho, g.wo};
  return {g.in.n, g.cout, g.ho, g.wo};
}

}  // namespace

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                         std::size_t padding) {
  const ConvGeometry g = conv_geometry(x, weight, bias, padding);
  Tensor<T> out(conv_output_shape(x, g));
  AlignedVector<T> col(g.direct() ? 0 : g.col_rows() * g.col_cols());
  CMapMat<T> w(weight.ptr(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(g.col_rows()));
  for (std::size_t n = 0; n < g.in.n; ++n) {
    const T* xs = x.ptr() + n * g.in.sample();
    const T* cp = xs;
    if (!g.direct()) {
      im2col(xs, g, col.data());
      cp = col.data();
    }
    CMapMat<T> cm(cp, static_cast<Eigen::Index>(g.col_rows()), static_cast<Eigen::Index>(g.col_cols()));
    MapMat<T> om(out.ptr() + n * g.cout * g.col_cols(), static_cast<Eigen::Index>(g.cout),
                 static_cast<Eigen::Index>(g.col_cols()));
    om.noalias() = w * cm;
    for (std::size_t co = 0; co < g.cout; ++co) om.row(static_cast<Eigen::Index>(co)).array() += bias[co];
  }
  return out;
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, std::size_t padding) {
  Tensor<T> out = conv2d_forward(x.value(), weight.value(), bias.value(), padding);
  return x.tape().record(std::move(out), {x, weight, bias},
                         [x, weight, bias, padding](Tape<T>& tape, const Tensor<T>& grad) {
    const Tensor<T>& xv = x.value();
    const Tensor<T>& wv = weight.value();
    const ConvGeometry g = conv_geometry(xv, wv, bias.value(), padding);
    const auto rows = static_cast<Eigen::Index>(g.col_rows());
    const auto cols = static_cast<Eigen::Index>(g.col_cols());
    const auto cout = static_cast<Eigen::Index>(g.cout);
    CMapMat<T> w(wv.ptr(), cout, rows);
    AlignedVector<T> col(g.direct() ? 0 : g.col_rows() * g.col_cols());
    AlignedVector<T> gcol(g.direct() ? 0 : g.col_rows() * g.col_cols());
    T* gw = weight.requires_grad() ? tape.grad_buffer(weight).ptr() : nullptr;
    T* gb = bias.requires_grad() ? tape.grad_buffer(bias).ptr() : nullptr;
    T* gx = x.requires_grad() ? tape.grad_buffer(x).ptr() : nullptr;
    for (std::size_t n = 0; n < g.in.n; ++n) {
      CMapMat<T> gm(grad.ptr() + n * g.cout * g.col_cols(), cout, cols);
      if (gb) {
        for (std::size_t co = 0; co < g.cout; ++co) gb[co] += gm.row(static_cast<Eigen::Index>(co)).sum();
      }
      if (gw) {
        const T* xs = xv.ptr() + n * g.in.sample();
        const T* cp = xs;
        if (!g.direct()) {
          im2col(xs, g, col.data());
          cp = col.data();
        }
        CMapMat<T> cm(cp, rows, cols);
        MapMat<T> gwm(gw, cout, rows);
        gwm.noalias() += gm * cm.transpose();
      }
      if (gx) {
        T* gxs = gx + n * g.in.sample();
        if (g.direct()) {
          MapMat<T> gxm(gxs, rows, cols);
          gxm.noalias() += w.transpose() * gm;
        } else {
          MapMat<T> gcm(gcol.data(), rows, cols);
          gcm.noalias() = w.transpose() * gm;
          col2im_add(gcol.data(), g, gxs);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Channel reshuffles

template <typename T>
Var<T> slice_channels(Var<T> x, std::size_t begin, std::size_t end) {
  const Tensor<T>& xv = x.value();
  const Nchw d = as_nchw(xv.shape(), "slice_channels");
  if (begin >= end || end > d.c) {
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + std::to_string(d.c) + " channels");
  }
  const std::size_t oc = end - begin;
  Shape shape = xv.shape();
  shape[shape.size() - 3] = oc;
  Tensor<T> out(shape);
  const std::size_t chunk = oc * d.plane();
  for (std::size_t n = 0; n < d.n; ++n) {
    const T* src = xv.ptr() + n * d.sample() + begin * d.plane();
    std::copy(src, src + chunk, out.ptr() + n * chunk);
  }
  return x.tape().record(std::move(out), {x}, [x, d, begin, chunk](Tape<T>& tape, const Tensor<T>& g) {
    T* gx = tape.grad_buffer(x).ptr();
    for (std::size_t n = 0; n < d.n; ++n) {
      T* dst = gx + n * d.sample() + begin * d.plane();
      const T* src = g.ptr() + n * chunk;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const Nchw da = as_nchw(av.shape(), "concat_channels");
  const Nchw db = as_nchw(bv.shape(), "concat_channels");
  if (av.rank() != bv.rank() || da.n != db.n || da.h != db.h || da.w != db.w) {
    throw ShapeError("concat_channels: " + shape_string(av.shape()) + " vs " + shape_string(bv.shape()));
  }
  Shape shape = av.shape();
  shape[shape.size() - 3] = da.c + db.c;
  Tensor<T> out(shape);
  const std::size_t ca = da.sample();
  const std::size_t cb = db.sample();
  for (std::size_t n = 0; n < da.n; ++n) {
    T* dst = out.ptr() + n * (ca + cb);
    std::copy(av.ptr() + n * ca, av.ptr() + (n + 1) * ca, dst);
    std::copy(bv.ptr() + n * cb, bv.ptr() + (n + 1) * cb, dst + ca);
  }
  return a.tape().record(std::move(out), {a, b}, [a, b, ca, cb, nb = da.n](Tape<T>& tape, const Tensor<T>& g) {
    T* ga = a.requires_grad() ? tape.grad_buffer(a).ptr() : nullptr;
    T* gb = b.requires_grad() ? tape.grad_buffer(b).ptr() : nullptr;
    for (std::size_t n = 0; n < nb; ++n) {
      const T* src = g.ptr() + n * (ca + cb);
      if (ga) for (std::size_t i = 0; i < ca; ++i) ga[n * ca + i] += src[i];
      if (gb) for (std::size_t i = 0; i < cb; ++i) gb[n * cb + i] += src[ca + i];
    }
  });
}

namespace {

// Index of x[n,c,y,x] inside the squeezed layout.
struct SqueezeMap {
  Nchw in;
  std::size_t squeezed_index(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    const std::size_t oh = in.h / 2;
    const std::size_t ow = in.w / 2;
    const std::size_t oc = 4 * c + 2 * (y % 2) + (x % 2);
    return ((n * 4 * in.c + oc) * oh + y / 2) * ow + x / 2;
  }
};

}  // namespace

template <typename T>
Var<T> squeeze2(Var<T> x) {
  const Tensor<T>& xv = x.value();
  const Nchw d = as_nchw(xv.shape(), "squeeze");
  if (d.h % 2 || d.w % 2) {
    throw ShapeError("squeeze: spatial size " + std::to_string(d.h) + "x" + std::to_string(d.w) +
                     " is not even");
  }
  Shape shape = xv.shape();
  const std::size_t r = shape.size();
  shape[r - 3] = d.c * 4;
  shape[r - 2] = d.h / 2;
  shape[r - 1] = d.w / 2;
  Tensor<T> out(shape);
  const SqueezeMap map{d};
  std::size_t i = 0;
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t c = 0; c < d.c; ++c)
      for (std::size_t y = 0; y < d.h; ++y)
        for (std::size_t xx = 0; xx < d.w; ++xx) out[map.squeezed_index(n, c, y, xx)] = xv[i++];
  return x.tape().record(std::move(out), {x}, [x, map](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T>& gx = tape.grad_buffer(x);
    const Nchw& d = map.in;
    std::size_t i = 0;
    for (std::size_t n = 0; n < d.n; ++n)
      for (std::size_t c = 0; c < d.c; ++c)
        for (std::size_t y = 0; y < d.h; ++y)
          for (std::size_t xx = 0; xx < d.w; ++xx) gx[i++] += g[map.squeezed_index(n, c, y, xx)];
  });
}

template <typename T>
Var<T> unsqueeze2(Var<T> x) {
  const Tensor<T>& xv = x.value();
  const Nchw d = as_nchw(xv.shape(), "unsqueeze");
  if (d.c % 4) throw ShapeError("unsqueeze: channel count " + std::to_string(d.c) + " not divisible by 4");
  Shape shape = xv.shape();
  const std::size_t r = shape.size();
  shape[r - 3] = d.c / 4;
  shape[r - 2] = d.h * 2;
  shape[r - 1] = d.w * 2;
  const SqueezeMap map{Nchw{d.n, d.c / 4, d.h * 2, d.w * 2}};
  Tensor<T> out(shape);
  std::size_t i = 0;
  const Nchw& o = map.in;
  for (std::size_t n = 0; n < o.n; ++n)
    for (std::size_t c = 0; c < o.c; ++c)
      for (std::size_t y = 0; y < o.h; ++y)
        for (std::size_t xx = 0; xx < o.w; ++xx) out[i++] = xv[map.squeezed_index(n, c, y, xx)];
  return x.tape().record(std::move(out), {x}, [x, map](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T>& gx = tape.grad_buffer(x);
    const Nchw& o = map.in;
    std::size_t i = 0;
    for (std::size_t n = 0; n < o.n; ++n)
      for (std::size_t c = 0; c < o.c; ++c)
        for (std::size_t y = 0; y < o.h; ++y)
          for (std::size_t xx = 0; xx < o.w; ++xx) gx[map.squeezed_index(n, c, y, xx)] += g[i++];
  });
}

// ---------------------------------------------------------------------------
// Per-channel affine pieces

template <typename T>
Var<T> channel_scale(Var<T> x, Var<T> s) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& sv = s.value();
  const Nchw d = as_nchw(xv.shape(), "channel_scale");
  if (sv.size() != d.c) {
    throw ShapeError("channel_scale: " + std::to_string(sv.size()) + " scales for " +
                     std::to_string(d.c) + " channels");
  }
  Tensor<T> out(xv.shape());
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t c = 0; c < d.c; ++c) {
      const std::size_t off = n * d.sample() + c * d.plane();
      for (std::size_t i = 0; i < d.plane(); ++i) out[off + i] = xv[off + i] * sv[c];
    }
  return x.tape().record(std::move(out), {x, s}, [x, s, d](Tape<T>& tape, const Tensor<T>& g) {
    const Tensor<T>& xv = x.value();
    const Tensor<T>& sv = s.value();
    T* gx = x.requires_grad() ? tape.grad_buffer(x).ptr() : nullptr;
    T* gs = s.requires_grad() ? tape.grad_buffer(s).ptr() : nullptr;
    for (std::size_t n = 0; n < d.n; ++n)
      for (std::size_t c = 0; c < d.c; ++c) {
        const std::size_t off = n * d.sample() + c * d.plane();
        T acc = 0;
        for (std::size_t i = 0; i < d.plane(); ++i) {
          if (gx) gx[off + i] += g[off + i] * sv[c];
          acc += g[off + i] * xv[off + i];
        }
        if (gs) gs[c] += acc;
      }
  });
}

template <typename T>
Var<T> channel_shift(Var<T> x, Var<T> b) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& bv = b.value();
  const Nchw d = as_nchw(xv.shape(), "channel_shift");
  if (bv.size() != d.c) {
    throw ShapeError("channel_shift: " + std::to_string(bv.size()) + " offsets for " +
                     std::to_string(d.c) + " channels");
  }
  Tensor<T> out(xv.shape());
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t c = 0; c < d.c; ++c) {
      const std::size_t off = n * d.sample() + c * d.plane();
      for (std::size_t i = 0; i < d.plane(); ++i) out[off + i] = xv[off + i] + bv[c];
    }
  return x.tape().record(std::move(out), {x, b}, [x, b, d](Tape<T>& tape, const Tensor<T>& g) {
    if (x.requires_grad()) tape.accumulate(x, g);
    if (b.requires_grad()) {
      T* gb = tape.grad_buffer(b).ptr();
      for (std::size_t n = 0; n < d.n; ++n)
        for (std::size_t c = 0; c < d.c; ++c) {
          const std::size_t off = n * d.sample() + c * d.plane();
          T acc = 0;
          for (std::size_t i = 0; i < d.plane(); ++i) acc += g[off + i];
          gb[c] += acc;
        }
    }
  });
}

template <typename T>
Var<T> channel_matmul(Var<T> x, Var<T> m) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& mv = m.value();
  const Nchw d = as_nchw(xv.shape(), "channel_matmul");
  if (mv.rank() != 2 || mv.dim(0) != d.c || mv.dim(1) != d.c) {
    throw ShapeError("channel_matmul: matrix " + shape_string(mv.shape()) + " for " +
                     std::to_string(d.c) + " channels");
  }
  const auto c = static_cast<Eigen::Index>(d.c);
  const auto p = static_cast<Eigen::Index>(d.plane());
  Tensor<T> out(xv.shape());
  CMapMat<T> mm(mv.ptr(), c, c);
  for (std::size_t n = 0; n < d.n; ++n) {
    CMapMat<T> xm(xv.ptr() + n * d.sample(), c, p);
    MapMat<T> om(out.ptr() + n * d.sample(), c, p);
    om.noalias() = mm * xm;
  }
  return x.tape().record(std::move(out), {x, m}, [x, m, d, c, p](Tape<T>& tape, const Tensor<T>& g) {
    const Tensor<T>& xv = x.value();
    CMapMat<T> mm(m.value().ptr(), c, c);
    T* gx = x.requires_grad() ? tape.grad_buffer(x).ptr() : nullptr;
    T* gm = m.requires_grad() ? tape.grad_buffer(m).ptr() : nullptr;
    for (std::size_t n = 0; n < d.n; ++n) {
      CMapMat<T> gom(g.ptr() + n * d.sample(), c, p);
      if (gx) {
        MapMat<T> gxm(gx + n * d.sample(), c, p);
        gxm.noalias() += mm.transpose() * gom;
      }
      if (gm) {
        CMapMat<T> xm(xv.ptr() + n * d.sample(), c, p);
        MapMat<T> gmm(gm, c, c);
        gmm.noalias() += gom * xm.transpose();
      }
    }
  });
}

namespace {

template <typename T>
void require_square(const Tensor<T>& m, const char* what) {
  if (m.rank() != 2 || m.dim(0) != m.dim(1)) {
    throw ShapeError(std::string(what) + ": expected a square matrix, got " + shape_string(m.shape()));
  }
}

}  // namespace

template <typename T>
Var<T> matrix_inverse(Var<T> m) {
  const Tensor<T>& mv = m.value();
  require_square(mv, "matrix_inverse");
  const auto c = static_cast<Eigen::Index>(mv.dim(0));
  RowMat<T> a = CMapMat<T>(mv.ptr(), c, c);
  Eigen::PartialPivLU<RowMat<T>> lu(a);
  const T det = lu.determinant();
  if (!(std::abs(det) > T(1e-12))) {
    throw DomainError("matrix_inverse: matrix is numerically singular (|det| = " +
                      std::to_string(std::abs(det)) + ")");
  }
  Tensor<T> out(mv.shape());
  MapMat<T>(out.ptr(), c, c) = lu.inverse();
  // dL/dM = -M^{-T} G M^{-T}
  auto inv = std::make_shared<RowMat<T>>(CMapMat<T>(out.ptr(), c, c));
  return m.tape().record(std::move(out), {m}, [m, inv](Tape<T>& tape, const Tensor<T>& g) {
    const auto c = inv->rows();
    MapMat<T> gm(tape.grad_buffer(m).ptr(), c, c);
    gm.noalias() -= inv->transpose() * CMapMat<T>(g.ptr(), c, c) * inv->transpose();
  });
}

template <typename T>
Var<T> log_abs_det(Var<T> m) {
  const Tensor<T>& mv = m.value();
  require_square(mv, "log_abs_det");
  const auto c = static_cast<Eigen::Index>(mv.dim(0));
  RowMat<T> a = CMapMat<T>(mv.ptr(), c, c);
  Eigen::PartialPivLU<RowMat<T>> lu(a);
  const auto& u = lu.matrixLU();
  T value = 0;
  for (Eigen::Index i = 0; i < c; ++i) {
    const T d = std::abs(u(i, i));
    if (!(d > T(0))) throw DomainError("log_abs_det: singular matrix (zero pivot " + std::to_string(i) + ")");
    value += std::log(d);
  }
  return m.tape().record(Tensor<T>::scalar(value), {m}, [m](Tape<T>& tape, const Tensor<T>& g) {
    const Tensor<T>& mv = m.value();
    const auto c = static_cast<Eigen::Index>(mv.dim(0));
    RowMat<T> a = CMapMat<T>(mv.ptr(), c, c);
    RowMat<T> inv_t = a.partialPivLu().inverse().transpose();
    MapMat<T> gm(tape.grad_buffer(m).ptr(), c, c);
    gm += g[0] * inv_t;
  });
}

// ---------------------------------------------------------------------------
// Densities and flat latent views

template <typename T>
Var<T> gaussian_logpdf(Var<T> z, T mean, T std) {
  return sum(gaussian_logpdf_per_sample(reshape(z, Shape{1, z.size()}), mean, std));
}

template <typename T>
Var<T> gaussian_logpdf_per_sample(Var<T> z, T mean, T std) {
  if (!(std > T(0))) throw DomainError("gaussian_logpdf: std must be positive, got " + std::to_string(std));
  const Tensor<T>& zv = z.value();
  if (zv.rank() == 0) throw ShapeError("gaussian_logpdf_per_sample: rank-0 input");
  const std::size_t n = zv.dim(0);
  const std::size_t inner = zv.size() / n;
  const T konst = T(-0.5) * std::log(T(2) * std::numbers::pi_v<T>) - std::log(std);
  const T inv_var = T(1) / (std * std);
  Tensor<T> out(Shape{n});
  for (std::size_t s = 0; s < n; ++s) {
    T acc = 0;
    const T* p = zv.ptr() + s * inner;
    for (std::size_t i = 0; i < inner; ++i) {
      const T u = p[i] - mean;
      acc += u * u;
    }
    out[s] = static_cast<T>(inner) * konst - T(0.5) * inv_var * acc;
  }
  return z.tape().record(std::move(out), {z}, [z, n, inner, mean, inv_var](Tape<T>& tape, const Tensor<T>& g) {
    const Tensor<T>& zv = z.value();
    Tensor<T>& gz = tape.grad_buffer(z);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t k = s * inner + i;
        gz[k] -= g[s] * (zv[k] - mean) * inv_var;
      }
  });
}

template <typename T>
Var<T> flatten_samples(std::span<const Var<T>> chunks) {
  if (chunks.empty()) throw ShapeError("flatten_samples: no chunks");
  const std::size_t n = chunks[0].value().dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    const Tensor<T>& v = chunks[i].value();
    if (v.rank() == 0 || v.dim(0) != n) {
      throw ShapeError("flatten_samples: chunk " + std::to_string(i) + " has shape " + shape_string(v.shape()) +
                       ", expected leading batch " + std::to_string(n));
    }
    widths.push_back(v.size() / n);
    total += widths.back();
  }
  Tensor<T> out(Shape{n, total});
  std::size_t offset = 0;
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    const Tensor<T>& v = chunks[i].value();
    for (std::size_t s = 0; s < n; ++s) {
      std::copy(v.ptr() + s * widths[i], v.ptr() + (s + 1) * widths[i], out.ptr() + s * total + offset);
    }
    offset += widths[i];
  }
  std::vector<Var<T>> inputs(chunks.begin(), chunks.end());
  return chunks[0].tape().record(std::move(out), chunks,
                                 [inputs, widths, n, total](Tape<T>& tape, const Tensor<T>& g) {
    std::size_t offset = 0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (inputs[i].requires_grad()) {
        T* gi = tape.grad_buffer(inputs[i]).ptr();
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t k = 0; k < widths[i]; ++k) gi[s * widths[i] + k] += g[s * total + offset + k];
      }
      offset += widths[i];
    }
  });
}

template <typename T>
Var<T> slice_features(Var<T> flat, std::size_t offset, const Shape& sample_shape) {
  const Tensor<T>& fv = flat.value();
  if (fv.rank() != 2) throw ShapeError("slice_features: expected [N, n], got " + shape_string(fv.shape()));
  const std::size_t n = fv.dim(0);
  const std::size_t total = fv.dim(1);
  const std::size_t width = shape_volume(sample_shape);
  if (offset + width > total) {
    throw ShapeError("slice_features: columns [" + std::to_string(offset) + "," + std::to_string(offset + width) +
                     ") exceed width " + std::to_string(total));
  }
  Shape shape{n};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  Tensor<T> out(shape);
  for (std::size_t s = 0; s < n; ++s) {
    const T* src = fv.ptr() + s * total + offset;
    std::copy(src, src + width, out.ptr() + s * width);
  }
  return flat.tape().record(std::move(out), {flat}, [flat, n, total, width, offset](Tape<T>& tape, const Tensor<T>& g) {
    T* gf = tape.grad_buffer(flat).ptr();
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t k = 0; k < width; ++k) gf[s * total + offset + k] += g[s * width + k];
  });
}

template <typename T>
Var<T> linear_map(Var<T> x, const std::function<Tensor<T>(const Tensor<T>&)>& forward,
                  const std::function<Tensor<T>(const Tensor<T>&)>& adjoint) {
  Tensor<T> out = forward(x.value());
  return x.tape().record(std::move(out), {x}, [x, adjoint](Tape<T>& tape, const Tensor<T>& g) {
    tape.accumulate(x, adjoint(g));
  });
}

// ---------------------------------------------------------------------------

#define NFLOW_INSTANTIATE_OPS(T)                                                              \
  template Var<T> elementwise(Var<T>, Elementwise);                                           \
  template Var<T> sigmoid(Var<T>);                                                            \
  template Var<T> log_sigmoid(Var<T>);                                                        \
  template Var<T> log(Var<T>);                                                                \
  template Var<T> exp(Var<T>);                                                                \
  template Var<T> abs(Var<T>);                                                                \
  template Var<T> relu(Var<T>);                                                               \
  template Var<T> negate(Var<T>);                                                             \
  template Var<T> square(Var<T>);                                                             \
  template Var<T> scale(Var<T>, T);                                                           \
  template Var<T> add_scalar(Var<T>, T);                                                      \
  template Var<T> add(Var<T>, Var<T>);                                                        \
  template Var<T> sub(Var<T>, Var<T>);                                                        \
  template Var<T> mul(Var<T>, Var<T>);                                                        \
  template Var<T> div(Var<T>, Var<T>);                                                        \
  template Var<T> sum(Var<T>);                                                                \
  template Var<T> sum_per_sample(Var<T>);                                                     \
  template Var<T> reshape(Var<T>, Shape);                                                     \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, std::size_t);                                \
  template Tensor<T> conv2d_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                    std::size_t);                                             \
  template Var<T> slice_channels(Var<T>, std::size_t, std::size_t);                           \
  template Var<T> concat_channels(Var<T>, Var<T>);                                            \
  template Var<T> squeeze2(Var<T>);                                                           \
  template Var<T> unsqueeze2(Var<T>);                                                         \
  template Var<T> channel_scale(Var<T>, Var<T>);                                              \
  template Var<T> channel_shift(Var<T>, Var<T>);                                              \
  template Var<T> channel_matmul(Var<T>, Var<T>);                                             \
  template Var<T> matrix_inverse(Var<T>);                                                     \
  template Var<T> log_abs_det(Var<T>);                                                        \
  template Var<T> gaussian_logpdf(Var<T>, T, T);                                              \
  template Var<T> gaussian_logpdf_per_sample(Var<T>, T, T);                                   \
  template Var<T> flatten_samples(std::span<const Var<T>>);                                   \
  template Var<T> slice_features(Var<T>, std::size_t, const Shape&);                          \
  template Var<T> linear_map(Var<T>, const std::function<Tensor<T>(const Tensor<T>&)>&,       \
                             const std::function<Tensor<T>(const Tensor<T>&)>&);

NFLOW_INSTANTIATE_OPS(float)
NFLOW_INSTANTIATE_OPS(double)

#undef NFLOW_INSTANTIATE_OPS

}  // namespace nflow
