#include "nflow/solver.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <random>
#include <thread>

#include "nflow/optim.hpp"
#include "nflow/random.hpp"
#include "nflow/trainer.hpp"

namespace nflow {

std::string to_string(Method m) {
  switch (m) {
    case Method::ours: return "ours";
    case Method::csgm: return "csgm";
    case Method::glowip: return "glowip";
    case Method::map: return "map";
  }
  return "?";
}

Method method_from_string(const std::string& s) {
  if (s == "ours") return Method::ours;
  if (s == "csgm") return Method::csgm;
  if (s == "glowip") return Method::glowip;
  if (s == "map") return Method::map;
  throw Error("unknown method '" + s + "' (expected ours, csgm, glowip or map)");
}

SolveConfig SolveConfig::defaults(Method method, Task task) {
  SolveConfig c;
  c.method = method;
  switch (task) {
    case Task::denoise: c.alpha = 0.05; break;
    case Task::deblur: c.alpha = 0.02; break;
    case Task::inpaint: c.alpha = 0.002; break;
    case Task::colorize: c.alpha = 0.02; break;
  }
  if (task == Task::denoise) {
    c.gamma = 0.1;
  } else {
    c.gamma = method == Method::glowip ? 0.0 : 0.01;
  }
  switch (method) {
    case Method::ours: c.init_std = 0.1; break;
    case Method::csgm: c.init_std = 1.0; break;
    case Method::glowip: c.init_std = 0.0; break;
    case Method::map:
      c.init_std = 0.1;
      c.learning_rate = 0.0015;
      c.beta = 0.5;
      break;
  }
  return c;
}

void SolveConfig::validate() const {
  if (alpha < 0 || gamma < 0 || beta < 0) throw DomainError("solve: objective weights must be non-negative");
  if (iterations < 1) throw DomainError("solve: iterations must be at least 1");
  if (!(learning_rate > 0)) throw DomainError("solve: learning rate must be positive");
  if (init_std < 0) throw DomainError("solve: init std must be non-negative");
  if (batch_size < 1) throw DomainError("solve: batch size must be positive");
  if (method == Method::map && !(noise_sigma > 0)) throw DomainError("solve: map needs a positive noise sigma");
}

template <typename T>
Tensor<T> clip_unit(Tensor<T> x) {
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i], T(0), T(1));
  return x;
}

namespace {

template <typename T>
std::vector<Var<T>> split_latent(Var<T> z_flat, const LatentLayout& layout) {
  std::vector<Var<T>> chunks;
  std::size_t offset = 0;
  for (const Shape& s : layout.chunk_shapes) {
    chunks.push_back(slice_features(z_flat, offset, s));
    offset += shape_volume(s);
  }
  return chunks;
}

}  // namespace

template <typename T>
ObjectiveTerms<T> objective(const FlowModel<T>& model, const MeasurementOperator& op, Tape<T>& tape, Var<T> z_flat,
                            const Tensor<T>& y, const SolveConfig& config) {
  if (config.method == Method::map && !op.is_identity()) {
    throw Error("solve: the map objective is defined for denoising only");
  }
  const Shape& zs = z_flat.shape();
  if (zs.size() != 2 || zs[1] != model.latent_layout().total()) {
    throw ShapeError("objective: latent of shape " + shape_string(zs) + " does not match latent dimension " +
                     std::to_string(model.latent_layout().total()));
  }
  const std::vector<Var<T>> chunks = split_latent(z_flat, model.latent_layout());
  const bool need_density = config.method == Method::ours || config.method == Method::map;

  Var<T> x;
  Var<T> reg;
  if (need_density) {
    auto r = model.latent_regularizer(tape, chunks);
    x = r.x;
    reg = r.regularizer;
  } else {
    x = model.inverse(tape, chunks).x;
    reg = sum_per_sample(square(z_flat));
  }
  Var<T> residual = sub(op.apply(x), tape.constant(y));

  Var<T> data;
  T weight = 0;
  switch (config.method) {
    case Method::ours:
      data = sum_per_sample(abs(residual));
      weight = static_cast<T>(config.alpha);
      break;
    case Method::csgm:
    case Method::glowip:
      data = sum_per_sample(square(residual));
      weight = static_cast<T>(config.gamma);
      break;
    case Method::map:
      data = scale(sum_per_sample(square(residual)), static_cast<T>(0.5 / (config.noise_sigma * config.noise_sigma)));
      weight = static_cast<T>(config.beta);
      break;
  }
  Var<T> total = weight == T(0) ? data : add(data, scale(reg, weight));
  return {x, data, reg, total};
}

template <typename T>
T objective_value(const FlowModel<T>& model, const MeasurementOperator& op, const Tensor<T>& z_flat,
                  const Tensor<T>& y, const SolveConfig& config) {
  Tape<T> tape;
  tape.set_track_parameters(false);
  return sum(objective(model, op, tape, tape.constant(z_flat), y, config).total).value().item();
}

template <typename T>
Tensor<T> objective_gradient(const FlowModel<T>& model, const MeasurementOperator& op, const Tensor<T>& z_flat,
                             const Tensor<T>& y, const SolveConfig& config) {
  Tape<T> tape;
  tape.set_track_parameters(false);
  Var<T> z = tape.variable(z_flat);
  Var<T> total = sum(objective(model, op, tape, z, y, config).total);
  tape.backward(total);
  return tape.grad(z);
}

template <typename T>
Tensor<T> initial_latent(std::size_t dims, std::size_t count, const SolveConfig& config, std::size_t first_index) {
  Tensor<T> z(Shape{count, dims}, T(0));
  if (config.init_std == 0) return z;
  for (std::size_t i = 0; i < count; ++i) {
    std::mt19937_64 rng(derive_seed(config.seed, first_index + i));
    std::normal_distribution<double> dist(0.0, config.init_std);
    for (std::size_t k = 0; k < dims; ++k) z[i * dims + k] = static_cast<T>(dist(rng));
  }
  return z;
}

namespace {

struct PerImage {
  std::vector<double> data;  // [iterations]
  std::vector<double> reg;
  std::vector<double> total;
};

template <typename T>
struct GroupResult {
  Tensor<T> z_hat;
  std::vector<PerImage> traces;
  std::vector<double> best_data, best_reg;
  std::vector<std::size_t> best_iter;
};

template <typename T>
GroupResult<T> solve_group(const FlowModel<T>& model, const MeasurementOperator& op, const Tensor<T>& y,
                           const SolveConfig& config, std::size_t first_index) {
  const std::size_t n = y.dim(0);
  const std::size_t dims = model.latent_layout().total();
  Tensor<T> z = initial_latent<T>(dims, n, config, first_index);
  Adam<T> adam({config.learning_rate, config.beta1, config.beta2, config.epsilon});

  GroupResult<T> out;
  out.z_hat = z;
  out.traces.resize(n);
  out.best_data.assign(n, 0);
  out.best_reg.assign(n, 0);
  out.best_iter.assign(n, 0);
  std::vector<double> best_total(n, std::numeric_limits<double>::infinity());

  // One extra evaluation scores the iterate produced by the last update.
  for (std::size_t it = 0; it <= config.iterations; ++it) {
    Tape<T> tape;
    tape.set_track_parameters(false);
    Var<T> zv = tape.variable(z);
    ObjectiveTerms<T> terms = objective(model, op, tape, zv, y, config);
    const Tensor<T>& data = terms.data.value();
    const Tensor<T>& reg = terms.reg.value();
    const Tensor<T>& total = terms.total.value();
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(static_cast<double>(total[i]))) {
        throw Error("solve: non-finite objective for image " + std::to_string(first_index + i) + " at iteration " +
                    std::to_string(it));
      }
      if (it < config.iterations) {
        out.traces[i].data.push_back(data[i]);
        out.traces[i].reg.push_back(reg[i]);
        out.traces[i].total.push_back(total[i]);
      }
      if (total[i] < best_total[i]) {
        best_total[i] = total[i];
        out.best_data[i] = data[i];
        out.best_reg[i] = reg[i];
        out.best_iter[i] = it;
        std::copy(z.ptr() + i * dims, z.ptr() + (i + 1) * dims, out.z_hat.ptr() + i * dims);
      }
    }
    if (it == config.iterations) break;
    tape.backward(sum(terms.total));
    const Tensor<T> g = tape.grad(zv);
    adam.step(z, g);
  }
  return out;
}

}  // namespace

template <typename T>
SolveResult<T> solve(const FlowModel<T>& model, const MeasurementOperator& op, const Tensor<T>& y,
                     const SolveConfig& config, std::size_t first_index) {
  config.validate();
  if (config.method == Method::map && !op.is_identity()) {
    throw Error("solve: the map objective is defined for denoising only");
  }
  const auto start = std::chrono::steady_clock::now();
  const Shape out_shape = op.output_shape();
  if (y.rank() != out_shape.size() + 1 || Shape(y.shape().begin() + 1, y.shape().end()) != out_shape) {
    throw ShapeError("solve: measurements of shape " + shape_string(y.shape()) + " do not match operator output " +
                     shape_string(out_shape) + " with a leading batch axis");
  }
  if (op.input_shape() != model.config().image_shape()) {
    throw ShapeError("solve: operator acts on " + shape_string(op.input_shape()) + ", model images are " +
                     shape_string(model.config().image_shape()));
  }
  const std::size_t n = y.dim(0);
  const std::size_t dims = model.latent_layout().total();

  std::vector<std::pair<std::size_t, std::size_t>> groups;
  for (std::size_t b = 0; b < n; b += config.batch_size) groups.emplace_back(b, std::min(n, b + config.batch_size));
  std::vector<GroupResult<T>> results(groups.size());
  std::vector<std::exception_ptr> errors(groups.size());

  auto run = [&](std::size_t g) {
    try {
      std::vector<std::size_t> rows(groups[g].second - groups[g].first);
      for (std::size_t r = 0; r < rows.size(); ++r) rows[r] = groups[g].first + r;
      results[g] = solve_group(model, op, take_rows(y, rows), config, first_index + groups[g].first);
    } catch (...) {
      errors[g] = std::current_exception();
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(config.threads, groups.size()));
  if (threads == 1) {
    for (std::size_t g = 0; g < groups.size(); ++g) run(g);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        for (std::size_t g = t; g < groups.size(); g += threads) run(g);
      });
    }
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  SolveResult<T> res;
  res.z_hat = Tensor<T>(Shape{n, dims});
  res.trace.assign(config.iterations, TracePoint{});
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const GroupResult<T>& gr = results[g];
    std::copy(gr.z_hat.ptr(), gr.z_hat.ptr() + gr.z_hat.size(), res.z_hat.ptr() + groups[g].first * dims);
    for (std::size_t i = 0; i < gr.traces.size(); ++i) {
      for (std::size_t it = 0; it < config.iterations; ++it) {
        res.trace[it].data_loss += gr.traces[i].data[it];
        res.trace[it].reg_loss += gr.traces[i].reg[it];
        res.trace[it].objective += gr.traces[i].total[it];
      }
      res.data_loss.push_back(gr.best_data[i]);
      res.reg_loss.push_back(gr.best_reg[i]);
      res.best_iteration.push_back(gr.best_iter[i]);
    }
  }
  for (TracePoint& p : res.trace) {
    p.data_loss /= static_cast<double>(n);
    p.reg_loss /= static_cast<double>(n);
    p.objective /= static_cast<double>(n);
  }

  const LatentLayout& layout = model.latent_layout();
  res.x_hat = clip_unit(model.inverse(unflatten(res.z_hat, layout)).first);
  res.x_init = clip_unit(model.inverse(unflatten(initial_latent<T>(dims, n, config, first_index), layout)).first);
  res.wall_time_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return res;
}

#define NFLOW_INSTANTIATE_SOLVER(T)                                                                             \
  template Tensor<T> clip_unit(Tensor<T>);                                                                      \
  template ObjectiveTerms<T> objective(const FlowModel<T>&, const MeasurementOperator&, Tape<T>&, Var<T>,       \
                                       const Tensor<T>&, const SolveConfig&);                                   \
  template T objective_value(const FlowModel<T>&, const MeasurementOperator&, const Tensor<T>&, const Tensor<T>&, \
                             const SolveConfig&);                                                               \
  template Tensor<T> objective_gradient(const FlowModel<T>&, const MeasurementOperator&, const Tensor<T>&,      \
                                        const Tensor<T>&, const SolveConfig&);                                  \
  template Tensor<T> initial_latent(std::size_t, std::size_t, const SolveConfig&, std::size_t);                 \
  template SolveResult<T> solve(const FlowModel<T>&, const MeasurementOperator&, const Tensor<T>&,              \
                                const SolveConfig&, std::size_t);

NFLOW_INSTANTIATE_SOLVER(float)
NFLOW_INSTANTIATE_SOLVER(double)

}  // namespace nflow
