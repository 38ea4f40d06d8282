#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "nflow/flow_model.hpp"
#include "nflow/gradcheck.hpp"

namespace nflow::testing {

template <typename T>
Tensor<T> uniform_tensor(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(shape);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(u(rng));
  return t;
}

template <typename T>
Tensor<T> normal_tensor(const Shape& shape, std::uint64_t seed, double std = 1.0) {
  Tensor<T> t(shape);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, std);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(n(rng));
  return t;
}

using OpFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

/// Worst relative error between the tape gradient and central differences
/// of sum(w * op(inputs)) over every input, with fixed random weights w.
inline double op_gradient_error(const OpFn& op, const std::vector<Tensor<double>>& inputs, double eps = 1e-5) {
  Tensor<double> weights;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& t : inputs) vars.push_back(tape.constant(t));
    weights = uniform_tensor<double>(op(tape, vars).shape(), 77, 0.5, 1.5);
  }
  auto scalar = [&](Tape<double>& tape, const std::vector<Var<double>>& vars) {
    return sum(mul(op(tape, vars), tape.constant(weights)));
  };
  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (std::size_t j = 0; j < inputs.size(); ++j)
      vars.push_back(j == k ? tape.variable(inputs[j]) : tape.constant(inputs[j]));
    tape.backward(scalar(tape, vars));
    const Tensor<double> analytic = tape.grad(vars[k]);
    const Tensor<double> numeric = finite_diff_grad<double>(
        [&](const Tensor<double>& probe) {
          Tape<double> t2;
          std::vector<Var<double>> v2;
          for (std::size_t j = 0; j < inputs.size(); ++j) v2.push_back(t2.constant(j == k ? probe : inputs[j]));
          return scalar(t2, v2).value().item();
        },
        inputs[k], eps);
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  return worst;
}

inline FlowConfig tiny_config(Permutation perm = Permutation::coupling_swap) {
  FlowConfig c;
  c.channels = 2;
  c.height = 4;
  c.width = 4;
  c.num_scales = 2;
  c.steps_per_scale = 1;
  c.hidden_channels = 8;
  c.permutation = perm;
  return c;
}

/// A model whose every layer is non-trivial: actnorm initialized on random
/// data and all coupling weights (including the zero-initialized last conv)
/// perturbed.
template <typename T>
FlowModel<T> scrambled_model(const FlowConfig& config, std::uint64_t seed, double scale = 0.3) {
  FlowModel<T> m = FlowModel<T>::build(config, seed);
  Shape batch{16};
  for (std::size_t d : config.image_shape()) batch.push_back(d);
  m.initialize_actnorm(uniform_tensor<T>(batch, seed + 1, 0.0, 1.0));
  std::mt19937_64 rng(seed + 2);
  std::normal_distribution<double> n(0.0, scale);
  for (Parameter<T>* p : m.parameters()) {
    if (p->name.find(".coupling.conv3") == std::string::npos && p->name.find(".bias") == std::string::npos) continue;
    for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] = static_cast<T>(p->value[i] + n(rng));
  }
  return m;
}

/// log|det| of the finite-difference Jacobian of x -> flatten(F(x)) at one image.
inline double brute_force_logdet(const FlowModel<double>& model, const Tensor<double>& x, double eps = 1e-6) {
  const std::size_t n = x.size();
  Eigen::MatrixXd J(n, n);
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < n; ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const Tensor<double> up = flatten(model.forward(probe).first);
    probe[i] = orig - eps;
    const Tensor<double> down = flatten(model.forward(probe).first);
    probe[i] = orig;
    for (std::size_t r = 0; r < n; ++r) J(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i)) = (up[r] - down[r]) / (2 * eps);
  }
  return std::log(std::abs(J.fullPivLu().determinant()));
}

}  // namespace nflow::testing
