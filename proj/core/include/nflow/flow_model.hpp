#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nflow/autodiff.hpp"
#include "nflow/layers.hpp"

namespace nflow {

enum class Permutation { coupling_swap, invconv };

std::string to_string(Permutation p);
Permutation permutation_from_string(const std::string& s);

/// Multi-scale architecture. Each scale squeezes (when its input is larger
/// than 1x1), runs its flow steps, then factors out half of the channels
/// (every scale but the last).
struct FlowConfig {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t num_scales = 5;
  std::size_t steps_per_scale = 2;
  /// 0-based scale indices whose step count is doubled.
  std::vector<std::size_t> double_steps_at;
  std::size_t hidden_channels = 512;
  Permutation permutation = Permutation::coupling_swap;

  /// L = 5, K = 2 doubled at the 2x2 and 1x1 scales, 512 hidden channels.
  static FlowConfig reference(std::size_t channels = 3);

  std::size_t steps_at(std::size_t scale) const;
  std::size_t total_steps() const;
  Shape image_shape() const { return {channels, height, width}; }
  bool operator==(const FlowConfig&) const = default;
};

/// Scales (0-based) whose squeezed spatial extent is 2x2 or 1x1.
std::vector<std::size_t> small_scale_indices(const FlowConfig& config);

/// Per-sample chunk shapes, factored chunks first and the final chunk last.
struct LatentLayout {
  std::vector<Shape> chunk_shapes;
  std::size_t total() const;
  bool operator==(const LatentLayout&) const = default;
};

template <typename T>
struct LatentState {
  std::vector<Tensor<T>> chunks;  // each [N, C, H, W]
  std::size_t batch() const { return chunks.empty() ? 0 : chunks.front().dim(0); }
  bool operator==(const LatentState&) const = default;
};

/// [N, n] view, chunk order then row-major.
template <typename T>
Tensor<T> flatten(const LatentState<T>& z);
/// Inverse of flatten; accepts [N, n] or a single [n] vector.
template <typename T>
LatentState<T> unflatten(const Tensor<T>& flat, const LatentLayout& layout);

template <typename T>
class FlowModel {
 public:
  struct Step {
    ActNorm<T> actnorm;
    std::optional<InvConv1x1<T>> invconv;
    CouplingLayer<T> coupling;
  };
  struct ScaleBlock {
    bool squeeze = true;
    bool split = true;
    Shape shape;  // per-sample (C, H, W) seen by the steps
    std::vector<Step> steps;
  };
  struct ForwardVars {
    std::vector<Var<T>> chunks;
    Var<T> logdet;  // [N]
  };
  struct InverseVars {
    Var<T> x;
    Var<T> logdet;  // [N]
  };

  /// Deterministic initialization from `seed`; couplings start near identity
  /// and actnorms start uninitialized.
  static FlowModel build(const FlowConfig& config, std::uint64_t seed);

  const FlowConfig& config() const { return config_; }
  const LatentLayout& latent_layout() const { return layout_; }
  const std::vector<ScaleBlock>& scales() const { return scales_; }
  std::vector<ScaleBlock>& scales() { return scales_; }
  std::size_t num_flow_steps() const;
  std::size_t dimension() const { return shape_volume(config_.image_shape()); }

  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;
  std::size_t parameter_count() const;
  Parameter<T>* find_parameter(const std::string& name);

  bool actnorm_initialized() const;
  /// Marks every actnorm initialized without touching its values.
  void set_actnorm_initialized(bool on);
  /// Data-dependent actnorm initialization, layer by layer, on `batch`.
  void initialize_actnorm(const Tensor<T>& batch);

  ForwardVars forward(Tape<T>& tape, Var<T> x) const;
  InverseVars inverse(Tape<T>& tape, std::span<const Var<T>> chunks) const;
  /// log p(x) per sample through the forward pass.
  Var<T> log_prob(Tape<T>& tape, Var<T> x) const;
  /// -log pZ(z) + log|det J_{F^-1}(z)| per sample, from one inverse pass.
  struct Regularized {
    Var<T> x;
    Var<T> regularizer;
  };
  Regularized latent_regularizer(Tape<T>& tape, std::span<const Var<T>> chunks) const;

  std::pair<LatentState<T>, Tensor<T>> forward(const Tensor<T>& x) const;
  std::pair<Tensor<T>, Tensor<T>> inverse(const LatentState<T>& z) const;
  Tensor<T> log_prob(const Tensor<T>& x) const;
  Tensor<T> latent_regularizer(const LatentState<T>& z) const;
  Tensor<T> bits_per_dim(const Tensor<T>& x) const;

  /// z ~ N(0, sigma^2 I) per chunk.
  LatentState<T> sample_latent(T sigma, std::size_t count, std::uint64_t seed) const;
  Tensor<T> sample(T sigma, std::size_t count, std::uint64_t seed) const;

 private:
  void check_image(const Tensor<T>& x) const;
  void check_latent(std::span<const Var<T>> chunks) const;

  FlowConfig config_;
  LatentLayout layout_;
  std::vector<ScaleBlock> scales_;
};

/// The prior term over all chunks: sum of standard-normal log densities per sample.
template <typename T>
Var<T> latent_log_prior(std::span<const Var<T>> chunks);

/// (-log_prob/n + log 256) / log 2.
template <typename T>
T bits_per_dim_from_log_prob(T log_prob, std::size_t dims);

extern template class FlowModel<float>;
extern template class FlowModel<double>;

}  // namespace nflow
