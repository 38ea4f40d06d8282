#include "nflow/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "nflow/optim.hpp"
#include "nflow/random.hpp"

namespace nflow {

template <typename T>
Tensor<T> dequantize(std::span<const std::uint8_t> pixels, const Shape& shape, std::uint64_t seed) {
  Tensor<T> out(shape);
  if (out.size() != pixels.size()) throw ShapeError("dequantize: pixel count does not match shape");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    T v = static_cast<T>((static_cast<double>(pixels[i]) + u(rng)) / 256.0);
    // float rounding can land exactly on the next bucket edge; keep [0, 1)
    if (!(v < T(1))) v = std::nextafter(T(1), T(0));
    out[i] = v;
  }
  return out;
}

template <typename T>
Tensor<T> to_unit_range(std::span<const std::uint8_t> pixels, const Shape& shape) {
  Tensor<T> out(shape);
  if (out.size() != pixels.size()) throw ShapeError("to_unit_range: pixel count does not match shape");
  for (std::size_t i = 0; i < pixels.size(); ++i) out[i] = static_cast<T>(pixels[i] / 255.0);
  return out;
}

template <typename T>
Tensor<T> take_rows(const Tensor<T>& data, std::span<const std::size_t> rows) {
  if (data.rank() == 0) throw ShapeError("take_rows: rank-0 tensor");
  Shape shape = data.shape();
  const std::size_t width = data.size() / shape[0];
  shape[0] = rows.size();
  Tensor<T> out(shape);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= data.dim(0)) throw ShapeError("take_rows: row index out of range");
    std::copy(data.ptr() + rows[r] * width, data.ptr() + (rows[r] + 1) * width, out.ptr() + r * width);
  }
  return out;
}

template <typename T>
Tensor<T> evaluate_log_prob(const FlowModel<T>& model, const Tensor<T>& data, std::size_t batch_size) {
  const std::size_t n = data.dim(0);
  Tensor<T> out(Shape{n});
  std::vector<std::size_t> rows;
  for (std::size_t begin = 0; begin < n; begin += batch_size) {
    const std::size_t end = std::min(n, begin + batch_size);
    rows.resize(end - begin);
    std::iota(rows.begin(), rows.end(), begin);
    const Tensor<T> lp = model.log_prob(take_rows(data, rows));
    std::copy(lp.ptr(), lp.ptr() + lp.size(), out.ptr() + begin);
  }
  return out;
}

template <typename T>
void require_finite_gradients(std::span<Parameter<T>* const> params, std::size_t step) {
  for (Parameter<T>* p : params) {
    for (std::size_t i = 0; i < p->grad.size(); ++i) {
      if (!std::isfinite(static_cast<double>(p->grad[i]))) {
        throw TrainingError("train: non-finite gradient in parameter " + p->name + " at step " + std::to_string(step));
      }
    }
  }
}

namespace {

template <typename T>
TrainResult train_loop(FlowModel<T>& model, std::size_t n_items, const TrainConfig& config,
                       const std::function<Tensor<T>(std::span<const std::size_t>, std::size_t)>& batch_fn,
                       const StepCallback& on_step) {
  if (n_items == 0) throw TrainingError("train: empty dataset");
  if (config.batch_size == 0) throw TrainingError("train: batch size must be positive");
  if (!(config.learning_rate > 0)) throw TrainingError("train: learning rate must be positive");

  std::vector<Parameter<T>*> params = model.parameters();
  std::vector<Tensor<T>*> values;
  std::vector<const Tensor<T>*> grads;
  for (Parameter<T>* p : params) {
    p->zero_grad();
    values.push_back(&p->value);
    grads.push_back(&p->grad);
  }
  std::vector<InvConv1x1<T>*> invconvs;
  for (auto& blk : model.scales())
    for (auto& s : blk.steps)
      if (s.invconv) invconvs.push_back(&*s.invconv);

  Adam<T> adam({config.learning_rate, config.beta1, config.beta2, config.epsilon});
  TrainResult result;
  std::vector<std::size_t> order(n_items);
  std::size_t step = 0;
  const std::size_t dims = model.dimension();

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(derive_seed(config.seed, 1000003ull + epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t begin = 0; begin < n_items; begin += config.batch_size) {
      if (config.max_steps && step >= config.max_steps) return result;
      const std::size_t end = std::min(n_items, begin + config.batch_size);
      const std::span<const std::size_t> rows(order.data() + begin, end - begin);
      const Tensor<T> batch = batch_fn(rows, step);
      if (!model.actnorm_initialized()) model.initialize_actnorm(batch);

      for (Parameter<T>* p : params) p->zero_grad();
      Tape<T> tape;
      Var<T> lp = model.log_prob(tape, tape.constant(batch));
      const T count = static_cast<T>(rows.size());
      Var<T> loss = scale(sum(lp), T(-1) / count);
      const double loss_value = loss.value().item();
      if (!std::isfinite(loss_value)) {
        throw TrainingError("train: non-finite loss at step " + std::to_string(step));
      }
      tape.backward(loss);

      require_finite_gradients<T>(params, step);
      double norm2 = 0;
      for (Parameter<T>* p : params)
        for (std::size_t i = 0; i < p->grad.size(); ++i) norm2 += static_cast<double>(p->grad[i]) * p->grad[i];
      const double norm = std::sqrt(norm2);
      if (config.clip_norm > 0 && norm > config.clip_norm) {
        const T factor = static_cast<T>(config.clip_norm / norm);
        for (Parameter<T>* p : params)
          for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad[i] *= factor;
      }

      std::vector<Tensor<T>> saved;
      for (InvConv1x1<T>* ic : invconvs) saved.push_back(ic->weight().value);
      adam.step(std::span<Tensor<T>* const>(values), std::span<const Tensor<T>* const>(grads));
      for (std::size_t k = 0; k < invconvs.size(); ++k) {
        if (!(static_cast<double>(invconvs[k]->abs_det()) > InvConv1x1<T>::kMinAbsDet)) {
          invconvs[k]->weight().value = saved[k];
          ++result.rejected_invconv_updates;
        }
      }

      TrainStep rec;
      rec.step = step;
      rec.epoch = epoch;
      rec.loss = loss_value;
      rec.bits_per_dim = bits_per_dim_from_log_prob(-loss_value, dims);
      result.curve.push_back(rec);
      if (on_step) on_step(rec);
      ++step;
    }
  }
  return result;
}

}  // namespace

template <typename T>
TrainResult train(FlowModel<T>& model, const ByteImages& data, const TrainConfig& config,
                  const StepCallback& on_step) {
  if (data.sample_shape() != model.config().image_shape()) {
    throw ShapeError("train: images of shape " + shape_string(data.sample_shape()) + " do not match model " +
                     shape_string(model.config().image_shape()));
  }
  const std::size_t width = data.sample_size();
  auto batch_fn = [&](std::span<const std::size_t> rows, std::size_t step) {
    std::vector<std::uint8_t> px(rows.size() * width);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto src = data.sample(rows[r]);
      std::copy(src.begin(), src.end(), px.begin() + static_cast<std::ptrdiff_t>(r * width));
    }
    Shape shape = data.shape;
    shape[0] = rows.size();
    return dequantize<T>(px, shape, derive_seed(config.seed, step));
  };
  return train_loop<T>(model, data.count(), config, batch_fn, on_step);
}

template <typename T>
TrainResult train(FlowModel<T>& model, const Tensor<T>& data, const TrainConfig& config,
                  const StepCallback& on_step) {
  auto batch_fn = [&](std::span<const std::size_t> rows, std::size_t) { return take_rows(data, rows); };
  return train_loop<T>(model, data.dim(0), config, batch_fn, on_step);
}

#define NFLOW_INSTANTIATE_TRAINER(T)                                                                    \
  template Tensor<T> dequantize(std::span<const std::uint8_t>, const Shape&, std::uint64_t);           \
  template Tensor<T> to_unit_range(std::span<const std::uint8_t>, const Shape&);                       \
  template void require_finite_gradients(std::span<Parameter<T>* const>, std::size_t);                  \
  template Tensor<T> take_rows(const Tensor<T>&, std::span<const std::size_t>);                        \
  template Tensor<T> evaluate_log_prob(const FlowModel<T>&, const Tensor<T>&, std::size_t);            \
  template TrainResult train(FlowModel<T>&, const ByteImages&, const TrainConfig&, const StepCallback&); \
  template TrainResult train(FlowModel<T>&, const Tensor<T>&, const TrainConfig&, const StepCallback&);

NFLOW_INSTANTIATE_TRAINER(float)
NFLOW_INSTANTIATE_TRAINER(double)

}  // namespace nflow
