#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "nflow/flow_model.hpp"
#include "nflow/measurement.hpp"

namespace nflow {

enum class Method { ours, csgm, glowip, map };

std::string to_string(Method m);
Method method_from_string(const std::string& s);

struct SolveConfig {
  Method method = Method::ours;
  /// Weight of the likelihood regularizer for `ours`.
  double alpha = 0.05;
  /// Weight of ||z||^2 for csgm and glowip.
  double gamma = 0.1;
  /// Weight of the density term for map.
  double beta = 0.5;
  double noise_sigma = 0.1;
  double learning_rate = 0.005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t iterations = 1500;
  /// Standard deviation of the initial latent; 0 starts at z = 0.
  double init_std = 0.1;
  /// Images optimized together in one tape.
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  /// Worker threads over batches; results do not depend on it.
  std::size_t threads = 1;

  /// Settings for a method on a task, including its initialization.
  static SolveConfig defaults(Method method, Task task);
  void validate() const;
};

struct TracePoint {
  double data_loss = 0;
  double reg_loss = 0;
  double objective = 0;
};

template <typename T>
struct SolveResult {
  Tensor<T> x_hat;   // [N, C, H, W], clipped to [0, 1]
  Tensor<T> z_hat;   // [N, n]
  Tensor<T> x_init;  // clip(F^-1(z0)), [N, C, H, W]
  /// Batch means per iteration, evaluated before each update.
  std::vector<TracePoint> trace;
  /// Per-image terms at z_hat (unweighted).
  std::vector<double> data_loss;
  std::vector<double> reg_loss;
  std::vector<std::size_t> best_iteration;
  double wall_time_ms = 0;
};

template <typename T>
struct ObjectiveTerms {
  Var<T> x;      // F^-1(z), [N, C, H, W]
  Var<T> data;   // [N]
  Var<T> reg;    // [N]
  Var<T> total;  // [N], data + weight * reg
};

/// Per-image objective for z_flat [N, n] against measurements y [N, ...].
template <typename T>
ObjectiveTerms<T> objective(const FlowModel<T>& model, const MeasurementOperator& op, Tape<T>& tape, Var<T> z_flat,
                            const Tensor<T>& y, const SolveConfig& config);

/// Summed objective over the batch at a fixed z_flat.
template <typename T>
T objective_value(const FlowModel<T>& model, const MeasurementOperator& op, const Tensor<T>& z_flat,
                  const Tensor<T>& y, const SolveConfig& config);

/// Gradient of objective_value with respect to z_flat.
template <typename T>
Tensor<T> objective_gradient(const FlowModel<T>& model, const MeasurementOperator& op, const Tensor<T>& z_flat,
                             const Tensor<T>& y, const SolveConfig& config);

/// Initial latents [N, n]; image i draws from derive_seed(seed, first_index + i).
template <typename T>
Tensor<T> initial_latent(std::size_t dims, std::size_t count, const SolveConfig& config, std::size_t first_index);

/// Restores every image in y [N, ...]. z_hat is the iterate with the lowest
/// objective seen for each image. `first_index` offsets the per-image seeds
/// so that splitting a dataset across calls gives the same results.
template <typename T>
SolveResult<T> solve(const FlowModel<T>& model, const MeasurementOperator& op, const Tensor<T>& y,
                     const SolveConfig& config, std::size_t first_index = 0);

template <typename T>
Tensor<T> clip_unit(Tensor<T> x);

}  // namespace nflow
