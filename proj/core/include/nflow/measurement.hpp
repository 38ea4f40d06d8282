#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "nflow/autodiff.hpp"

namespace nflow {

enum class MeasurementKind { denoise, blur3x3, inpaint_center, colorize, generic_matrix };

/// How the denoising noise level is read: per-entry standard deviation, or
/// the root of the expected squared norm of the whole noise vector.
enum class NoiseMode { per_entry, total_norm };

/// valid shrinks H and W by 2; reflect pads by mirroring and keeps the size.
enum class BlurMode { valid, reflect };

/// Named restoration tasks and the operator each one uses.
enum class Task { denoise, deblur, inpaint, colorize };

std::string to_string(Task t);
Task task_from_string(const std::string& s);

/// A linear measurement y = A x (+ noise for denoising) on per-sample images
/// of shape (C, H, W). Every method accepts one image [C, H, W] or a batch
/// [N, C, H, W] and keeps that rank in its result.
class MeasurementOperator {
 public:
  static MeasurementOperator denoise(Shape image, double noise_std = 0.1, NoiseMode mode = NoiseMode::per_entry);
  static MeasurementOperator blur3x3(Shape image, BlurMode mode = BlurMode::valid);
  /// side 0 selects H / 2.
  static MeasurementOperator inpaint_center(Shape image, std::size_t side = 0);
  static MeasurementOperator colorize(Shape image);
  /// A is [m, C*H*W]; the output of one image is a length-m vector.
  static MeasurementOperator generic(Shape image, Tensor<double> matrix);
  /// Operator and default settings for a named task.
  static MeasurementOperator for_task(Task task, Shape image, double noise_std = 0.1);

  MeasurementKind kind() const { return kind_; }
  const Shape& input_shape() const { return input_; }
  Shape output_shape() const;
  std::size_t input_size() const { return shape_volume(input_); }
  std::size_t output_size() const { return shape_volume(output_shape()); }

  /// Standard deviation of each noise entry (0 for noiseless operators).
  double noise_std_per_entry() const;
  double noise_std() const { return noise_std_; }
  NoiseMode noise_mode() const { return noise_mode_; }
  BlurMode blur_mode() const { return blur_mode_; }
  std::size_t mask_side() const { return mask_side_; }
  bool is_identity() const { return kind_ == MeasurementKind::denoise; }

  template <typename T>
  Tensor<T> apply(const Tensor<T>& x) const;
  template <typename T>
  Tensor<T> adjoint(const Tensor<T>& y) const;
  template <typename T>
  Var<T> apply(Var<T> x) const;
  /// apply(x) plus Gaussian noise drawn from `seed` (denoising only).
  template <typename T>
  Tensor<T> measure(const Tensor<T>& x, std::uint64_t seed) const;
  /// Inside-mask indicator over (H, W) for inpainting.
  bool masked(std::size_t row, std::size_t col) const;

 private:
  MeasurementOperator(MeasurementKind kind, Shape input) : kind_(kind), input_(std::move(input)) {}
  struct Batch {
    std::size_t n;
    bool batched;
  };
  Batch check_input(const Shape& s) const;
  Batch check_output(const Shape& s) const;
  Shape with_batch(const Shape& per_sample, Batch b) const;

  MeasurementKind kind_;
  Shape input_;
  double noise_std_ = 0;
  NoiseMode noise_mode_ = NoiseMode::per_entry;
  BlurMode blur_mode_ = BlurMode::valid;
  std::size_t mask_side_ = 0;
  Tensor<double> matrix_;
};

}  // namespace nflow
