#include "nflow/measurement.hpp"

#include <cmath>
#include <random>

namespace nflow {

std::string to_string(Task t) {
  switch (t) {
    case Task::denoise: return "denoise";
    case Task::deblur: return "deblur";
    case Task::inpaint: return "inpaint";
    case Task::colorize: return "colorize";
  }
  return "?";
}

Task task_from_string(const std::string& s) {
  if (s == "denoise") return Task::denoise;
  if (s == "deblur") return Task::deblur;
  if (s == "inpaint") return Task::inpaint;
  if (s == "colorize") return Task::colorize;
  throw Error("unknown task '" + s + "' (expected denoise, deblur, inpaint or colorize)");
}

namespace {

void require_image_shape(const Shape& s, const char* what) {
  if (s.size() != 3) throw ShapeError(std::string(what) + ": image shape must be (C, H, W), got " + shape_string(s));
}

// Reflect index into [0, n) without repeating the edge sample.
std::size_t reflect(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto m = static_cast<std::ptrdiff_t>(n);
  while (i < 0 || i >= m) {
    if (i < 0) i = -i;
    if (i >= m) i = 2 * (m - 1) - i;
  }
  return static_cast<std::size_t>(i);
}

}  // namespace

MeasurementOperator MeasurementOperator::denoise(Shape image, double noise_std, NoiseMode mode) {
  require_image_shape(image, "denoise");
  if (!(noise_std >= 0)) throw DomainError("denoise: noise std must be non-negative");
  MeasurementOperator op(MeasurementKind::denoise, std::move(image));
  op.noise_std_ = noise_std;
  op.noise_mode_ = mode;
  return op;
}

MeasurementOperator MeasurementOperator::blur3x3(Shape image, BlurMode mode) {
  require_image_shape(image, "blur3x3");
  if (mode == BlurMode::valid && (image[1] < 3 || image[2] < 3)) {
    throw ShapeError("blur3x3: valid mode needs H, W >= 3, got " + shape_string(image));
  }
  MeasurementOperator op(MeasurementKind::blur3x3, std::move(image));
  op.blur_mode_ = mode;
  return op;
}

MeasurementOperator MeasurementOperator::inpaint_center(Shape image, std::size_t side) {
  require_image_shape(image, "inpaint_center");
  if (side == 0) side = image[1] / 2;
  if (side > image[1] || side > image[2]) {
    throw ShapeError("inpaint_center: mask side " + std::to_string(side) + " exceeds image " + shape_string(image));
  }
  MeasurementOperator op(MeasurementKind::inpaint_center, std::move(image));
  op.mask_side_ = side;
  return op;
}

MeasurementOperator MeasurementOperator::colorize(Shape image) {
  require_image_shape(image, "colorize");
  if (image[0] != 3) throw ShapeError("colorize: needs 3 channels, got " + shape_string(image));
  return MeasurementOperator(MeasurementKind::colorize, std::move(image));
}

MeasurementOperator MeasurementOperator::generic(Shape image, Tensor<double> matrix) {
  require_image_shape(image, "generic");
  if (matrix.rank() != 2 || matrix.dim(1) != shape_volume(image)) {
    throw ShapeError("generic: matrix of shape " + shape_string(matrix.shape()) + " does not act on " +
                     shape_string(image));
  }
  MeasurementOperator op(MeasurementKind::generic_matrix, std::move(image));
  op.matrix_ = std::move(matrix);
  return op;
}

MeasurementOperator MeasurementOperator::for_task(Task task, Shape image, double noise_std) {
  switch (task) {
    case Task::denoise: return denoise(std::move(image), noise_std);
    case Task::deblur: return blur3x3(std::move(image));
    case Task::inpaint: return inpaint_center(std::move(image));
    case Task::colorize: return colorize(std::move(image));
  }
  throw Error("unknown task");
}

Shape MeasurementOperator::output_shape() const {
  switch (kind_) {
    case MeasurementKind::denoise:
    case MeasurementKind::inpaint_center: return input_;
    case MeasurementKind::blur3x3:
      if (blur_mode_ == BlurMode::valid) return {input_[0], input_[1] - 2, input_[2] - 2};
      return input_;
    case MeasurementKind::colorize: return {1, input_[1], input_[2]};
    case MeasurementKind::generic_matrix: return {matrix_.dim(0)};
  }
  return input_;
}

double MeasurementOperator::noise_std_per_entry() const {
  if (kind_ != MeasurementKind::denoise) return 0;
  if (noise_mode_ == NoiseMode::total_norm) return noise_std_ / std::sqrt(static_cast<double>(output_size()));
  return noise_std_;
}

bool MeasurementOperator::masked(std::size_t row, std::size_t col) const {
  if (kind_ != MeasurementKind::inpaint_center) return false;
  const std::size_t r0 = (input_[1] - mask_side_) / 2;
  const std::size_t c0 = (input_[2] - mask_side_) / 2;
  return row >= r0 && row < r0 + mask_side_ && col >= c0 && col < c0 + mask_side_;
}

MeasurementOperator::Batch MeasurementOperator::check_input(const Shape& s) const {
  if (s == input_) return {1, false};
  if (s.size() == input_.size() + 1 && Shape(s.begin() + 1, s.end()) == input_) return {s[0], true};
  throw ShapeError("measurement: input shape " + shape_string(s) + " does not match operator input " +
                   shape_string(input_));
}

MeasurementOperator::Batch MeasurementOperator::check_output(const Shape& s) const {
  const Shape out = output_shape();
  if (s == out) return {1, false};
  if (s.size() == out.size() + 1 && Shape(s.begin() + 1, s.end()) == out) return {s[0], true};
  throw ShapeError("measurement: adjoint input shape " + shape_string(s) + " does not match operator output " +
                   shape_string(out));
}

Shape MeasurementOperator::with_batch(const Shape& per_sample, Batch b) const {
  if (!b.batched) return per_sample;
  Shape s{b.n};
  s.insert(s.end(), per_sample.begin(), per_sample.end());
  return s;
}

template <typename T>
Tensor<T> MeasurementOperator::apply(const Tensor<T>& x) const {
  const Batch b = check_input(x.shape());
  const Shape out_shape = output_shape();
  Tensor<T> y(with_batch(out_shape, b));
  const std::size_t C = input_[0], H = input_[1], W = input_[2];
  const std::size_t in_n = input_size(), out_n = output_size();
  for (std::size_t n = 0; n < b.n; ++n) {
    const T* src = x.ptr() + n * in_n;
    T* dst = y.ptr() + n * out_n;
    switch (kind_) {
      case MeasurementKind::denoise: std::copy(src, src + in_n, dst); break;
      case MeasurementKind::inpaint_center:
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j) {
              const std::size_t k = (c * H + i) * W + j;
              dst[k] = masked(i, j) ? T(0) : src[k];
            }
        break;
      case MeasurementKind::colorize:
        for (std::size_t p = 0; p < H * W; ++p) {
          T acc = 0;
          for (std::size_t c = 0; c < C; ++c) acc += src[c * H * W + p];
          dst[p] = acc / static_cast<T>(C);
        }
        break;
      case MeasurementKind::blur3x3: {
        const std::size_t Ho = out_shape[1], Wo = out_shape[2];
        const bool valid = blur_mode_ == BlurMode::valid;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t i = 0; i < Ho; ++i)
            for (std::size_t j = 0; j < Wo; ++j) {
              T acc = 0;
              for (int di = -1; di <= 1; ++di)
                for (int dj = -1; dj <= 1; ++dj) {
                  const std::size_t ii = valid ? i + 1 + di : reflect(static_cast<std::ptrdiff_t>(i) + di, H);
                  const std::size_t jj = valid ? j + 1 + dj : reflect(static_cast<std::ptrdiff_t>(j) + dj, W);
                  acc += src[(c * H + ii) * W + jj];
                }
              dst[(c * Ho + i) * Wo + j] = acc / T(9);
            }
        break;
      }
      case MeasurementKind::generic_matrix:
        for (std::size_t r = 0; r < out_n; ++r) {
          double acc = 0;
          for (std::size_t k = 0; k < in_n; ++k) acc += matrix_[r * in_n + k] * static_cast<double>(src[k]);
          dst[r] = static_cast<T>(acc);
        }
        break;
    }
  }
  return y;
}

template <typename T>
Tensor<T> MeasurementOperator::adjoint(const Tensor<T>& y) const {
  const Batch b = check_output(y.shape());
  const Shape out_shape = output_shape();
  Tensor<T> x(with_batch(input_, b), T(0));
  const std::size_t C = input_[0], H = input_[1], W = input_[2];
  const std::size_t in_n = input_size(), out_n = output_size();
  for (std::size_t n = 0; n < b.n; ++n) {
    const T* src = y.ptr() + n * out_n;
    T* dst = x.ptr() + n * in_n;
    switch (kind_) {
      case MeasurementKind::denoise: std::copy(src, src + in_n, dst); break;
      case MeasurementKind::inpaint_center:
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j) {
              const std::size_t k = (c * H + i) * W + j;
              dst[k] = masked(i, j) ? T(0) : src[k];
            }
        break;
      case MeasurementKind::colorize:
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t p = 0; p < H * W; ++p) dst[c * H * W + p] = src[p] / static_cast<T>(C);
        break;
      case MeasurementKind::blur3x3: {
        const std::size_t Ho = out_shape[1], Wo = out_shape[2];
        const bool valid = blur_mode_ == BlurMode::valid;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t i = 0; i < Ho; ++i)
            for (std::size_t j = 0; j < Wo; ++j) {
              const T g = src[(c * Ho + i) * Wo + j] / T(9);
              for (int di = -1; di <= 1; ++di)
                for (int dj = -1; dj <= 1; ++dj) {
                  const std::size_t ii = valid ? i + 1 + di : reflect(static_cast<std::ptrdiff_t>(i) + di, H);
                  const std::size_t jj = valid ? j + 1 + dj : reflect(static_cast<std::ptrdiff_t>(j) + dj, W);
                  dst[(c * H + ii) * W + jj] += g;
                }
            }
        break;
      }
      case MeasurementKind::generic_matrix:
        for (std::size_t k = 0; k < in_n; ++k) {
          double acc = 0;
          for (std::size_t r = 0; r < out_n; ++r) acc += matrix_[r * in_n + k] * static_cast<double>(src[r]);
          dst[k] = static_cast<T>(acc);
        }
        break;
    }
  }
  return x;
}

template <typename T>
Var<T> MeasurementOperator::apply(Var<T> x) const {
  check_input(x.shape());
  return linear_map<T>(
      x, [this](const Tensor<T>& v) { return apply(v); }, [this](const Tensor<T>& g) { return adjoint(g); });
}

template <typename T>
Tensor<T> MeasurementOperator::measure(const Tensor<T>& x, std::uint64_t seed) const {
  Tensor<T> y = apply(x);
  const double std = noise_std_per_entry();
  if (std > 0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, std);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<T>(y[i] + dist(rng));
  }
  return y;
}

template Tensor<float> MeasurementOperator::apply(const Tensor<float>&) const;
template Tensor<double> MeasurementOperator::apply(const Tensor<double>&) const;
template Tensor<float> MeasurementOperator::adjoint(const Tensor<float>&) const;
template Tensor<double> MeasurementOperator::adjoint(const Tensor<double>&) const;
template Var<float> MeasurementOperator::apply(Var<float>) const;
template Var<double> MeasurementOperator::apply(Var<double>) const;
template Tensor<float> MeasurementOperator::measure(const Tensor<float>&, std::uint64_t) const;
template Tensor<double> MeasurementOperator::measure(const Tensor<double>&, std::uint64_t) const;

}  // namespace nflow
