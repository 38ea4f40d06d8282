#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "nflow/flow_model.hpp"

namespace nflow {

/// 8-bit images in [N, C, H, W] order.
struct ByteImages {
  Shape shape;
  std::vector<std::uint8_t> pixels;
  std::vector<std::string> ids;

  std::size_t count() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t sample_size() const { return count() ? pixels.size() / count() : 0; }
  Shape sample_shape() const { return Shape(shape.begin() + 1, shape.end()); }
  std::span<const std::uint8_t> sample(std::size_t i) const {
    return std::span<const std::uint8_t>(pixels).subspan(i * sample_size(), sample_size());
  }
};

/// (pixel + u) / 256 with u ~ U[0, 1), so values lie in [0, 1).
template <typename T>
Tensor<T> dequantize(std::span<const std::uint8_t> pixels, const Shape& shape, std::uint64_t seed);

/// pixel / 255, used when an image is a fixed target rather than training data.
template <typename T>
Tensor<T> to_unit_range(std::span<const std::uint8_t> pixels, const Shape& shape);

class TrainingError : public Error {
 public:
  using Error::Error;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t batch_size = 32;
  std::size_t epochs = 100;
  /// Stops after this many optimizer steps when non-zero.
  std::size_t max_steps = 0;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 50.0;
  std::uint64_t seed = 0;
};

struct TrainStep {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0;  // -mean log p(x) over the batch, nats per sample
  double bits_per_dim = 0;
};

struct TrainResult {
  std::vector<TrainStep> curve;
  std::size_t rejected_invconv_updates = 0;
};

using StepCallback = std::function<void(const TrainStep&)>;

/// Maximum-likelihood training on 8-bit images, re-dequantized every batch.
template <typename T>
TrainResult train(FlowModel<T>& model, const ByteImages& data, const TrainConfig& config,
                  const StepCallback& on_step = {});

/// Maximum-likelihood training on continuous samples [N, C, H, W].
template <typename T>
TrainResult train(FlowModel<T>& model, const Tensor<T>& data, const TrainConfig& config,
                  const StepCallback& on_step = {});

/// Throws TrainingError naming the first parameter with a non-finite gradient.
template <typename T>
void require_finite_gradients(std::span<Parameter<T>* const> params, std::size_t step);

/// Per-sample log p(x) evaluated in batches.
template <typename T>
Tensor<T> evaluate_log_prob(const FlowModel<T>& model, const Tensor<T>& data, std::size_t batch_size = 64);

/// The listed rows of an [N, ...] tensor, in order.
template <typename T>
Tensor<T> take_rows(const Tensor<T>& data, std::span<const std::size_t> rows);

}  // namespace nflow
