#include "nflow/flow_model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace nflow {

std::string to_string(Permutation p) {
  return p == Permutation::invconv ? "invconv" : "coupling";
}

Permutation permutation_from_string(const std::string& s) {
  if (s == "coupling" || s == "coupling_swap") return Permutation::coupling_swap;
  if (s == "invconv") return Permutation::invconv;
  throw Error("unknown permutation variant '" + s + "' (expected coupling|invconv)");
}

FlowConfig FlowConfig::reference(std::size_t channels) {
  FlowConfig c;
  c.channels = channels;
  c.height = 32;
  c.width = 32;
  c.num_scales = 5;
  c.steps_per_scale = 2;
  c.double_steps_at = {3, 4};
  c.hidden_channels = 512;
  return c;
}

std::size_t FlowConfig::steps_at(std::size_t scale) const {
  const bool doubled = std::find(double_steps_at.begin(), double_steps_at.end(), scale) != double_steps_at.end();
  return doubled ? 2 * steps_per_scale : steps_per_scale;
}

std::size_t FlowConfig::total_steps() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < num_scales; ++i) n += steps_at(i);
  return n;
}

std::vector<std::size_t> small_scale_indices(const FlowConfig& config) {
  std::vector<std::size_t> out;
  std::size_t h = config.height;
  std::size_t w = config.width;
  for (std::size_t i = 0; i < config.num_scales; ++i) {
    if ((h > 1 || w > 1) && h % 2 == 0 && w % 2 == 0) {
      h /= 2;
      w /= 2;
    }
    if (h <= 2 && w <= 2) out.push_back(i);
  }
  return out;
}

std::size_t LatentLayout::total() const {
  std::size_t n = 0;
  for (const Shape& s : chunk_shapes) n += shape_volume(s);
  return n;
}

template <typename T>
Tensor<T> flatten(const LatentState<T>& z) {
  if (z.chunks.empty()) throw ShapeError("flatten: empty latent");
  const std::size_t n = z.batch();
  std::size_t total = 0;
  for (const Tensor<T>& c : z.chunks) {
    if (c.rank() == 0 || c.dim(0) != n) throw ShapeError("flatten: chunk batch sizes differ");
    total += c.size() / n;
  }
  Tensor<T> out(Shape{n, total});
  std::size_t offset = 0;
  for (const Tensor<T>& c : z.chunks) {
    const std::size_t width = c.size() / n;
    for (std::size_t s = 0; s < n; ++s) {
      std::copy(c.ptr() + s * width, c.ptr() + (s + 1) * width, out.ptr() + s * total + offset);
    }
    offset += width;
  }
  return out;
}

template <typename T>
LatentState<T> unflatten(const Tensor<T>& flat, const LatentLayout& layout) {
  const std::size_t total = layout.total();
  std::size_t n = 1;
  if (flat.rank() == 2) {
    n = flat.dim(0);
  } else if (flat.rank() != 1) {
    throw ShapeError("unflatten: expected [n] or [N, n], got " + shape_string(flat.shape()));
  }
  if (flat.size() != n * total) {
    throw ShapeError("unflatten: " + std::to_string(flat.size() / n) + " values per sample, layout needs " +
                     std::to_string(total));
  }
  LatentState<T> z;
  std::size_t offset = 0;
  for (const Shape& cs : layout.chunk_shapes) {
    Shape shape{n};
    shape.insert(shape.end(), cs.begin(), cs.end());
    Tensor<T> chunk(shape);
    const std::size_t width = shape_volume(cs);
    for (std::size_t s = 0; s < n; ++s) {
      const T* src = flat.ptr() + s * total + offset;
      std::copy(src, src + width, chunk.ptr() + s * width);
    }
    offset += width;
    z.chunks.push_back(std::move(chunk));
  }
  return z;
}

template <typename T>
Var<T> latent_log_prior(std::span<const Var<T>> chunks) {
  Var<T> total = gaussian_logpdf_per_sample(chunks[0], T(0), T(1));
  for (std::size_t i = 1; i < chunks.size(); ++i) {
    total = add(total, gaussian_logpdf_per_sample(chunks[i], T(0), T(1)));
  }
  return total;
}

template <typename T>
T bits_per_dim_from_log_prob(T log_prob, std::size_t dims) {
  const T n = static_cast<T>(dims);
  return (-log_prob / n + std::log(T(256))) / std::numbers::ln2_v<T>;
}

// ---------------------------------------------------------------------------

template <typename T>
FlowModel<T> FlowModel<T>::build(const FlowConfig& config, std::uint64_t seed) {
  if (config.channels == 0 || config.height == 0 || config.width == 0) {
    throw ShapeError("build: image shape must be positive");
  }
  if (config.num_scales == 0) throw ShapeError("build: at least one scale is required");
  if (config.hidden_channels == 0) throw ShapeError("build: hidden_channels must be positive");

  FlowModel m;
  m.config_ = config;
  std::mt19937_64 rng(seed);
  std::size_t c = config.channels;
  std::size_t h = config.height;
  std::size_t w = config.width;
  for (std::size_t i = 0; i < config.num_scales; ++i) {
    const std::string where = "build: scale " + std::to_string(i) + ": ";
    ScaleBlock blk;
    blk.squeeze = h > 1 || w > 1;
    if (blk.squeeze) {
      if (h % 2 || w % 2) {
        throw ShapeError(where + "spatial size " + std::to_string(h) + "x" + std::to_string(w) +
                         " cannot be squeezed");
      }
      c *= 4;
      h /= 2;
      w /= 2;
    }
    blk.shape = {c, h, w};
    const std::size_t kernel = (h >= 2 && w >= 2) ? 3 : 1;
    const std::size_t steps = config.steps_at(i);
    if (steps > 0 && c % 2) throw ShapeError(where + "odd channel count " + std::to_string(c) + " cannot be coupled");
    for (std::size_t j = 0; j < steps; ++j) {
      const std::string prefix = "s" + std::to_string(i) + ".k" + std::to_string(j);
      Step step;
      step.actnorm = ActNorm<T>(prefix + ".actnorm", c);
      bool swap = false;
      if (config.permutation == Permutation::invconv) {
        step.invconv = InvConv1x1<T>(prefix + ".invconv", c, rng);
      } else {
        swap = j % 2 == 1;
      }
      step.coupling = CouplingLayer<T>(prefix + ".coupling", c, config.hidden_channels, kernel, swap, rng);
      blk.steps.push_back(std::move(step));
    }
    blk.split = i + 1 < config.num_scales;
    if (blk.split) {
      if (c % 2) throw ShapeError(where + "odd channel count " + std::to_string(c) + " cannot be split");
      m.layout_.chunk_shapes.push_back({c / 2, h, w});
      c /= 2;
    }
    m.scales_.push_back(std::move(blk));
  }
  m.layout_.chunk_shapes.push_back({c, h, w});
  return m;
}

template <typename T>
std::size_t FlowModel<T>::num_flow_steps() const {
  std::size_t n = 0;
  for (const ScaleBlock& b : scales_) n += b.steps.size();
  return n;
}

template <typename T>
std::vector<Parameter<T>*> FlowModel<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (ScaleBlock& b : scales_)
    for (Step& s : b.steps) {
      for (Parameter<T>* p : s.actnorm.parameters()) out.push_back(p);
      if (s.invconv) {
        for (Parameter<T>* p : s.invconv->parameters()) out.push_back(p);
      }
      for (Parameter<T>* p : s.coupling.parameters()) out.push_back(p);
    }
  return out;
}

template <typename T>
std::vector<const Parameter<T>*> FlowModel<T>::parameters() const {
  auto mutable_params = const_cast<FlowModel*>(this)->parameters();
  return {mutable_params.begin(), mutable_params.end()};
}

template <typename T>
std::size_t FlowModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter<T>* p : parameters()) n += p->value.size();
  return n;
}

template <typename T>
Parameter<T>* FlowModel<T>::find_parameter(const std::string& name) {
  for (Parameter<T>* p : parameters()) {
    if (p->name == name) return p;
  }
  return nullptr;
}

template <typename T>
bool FlowModel<T>::actnorm_initialized() const {
  for (const ScaleBlock& b : scales_)
    for (const Step& s : b.steps) {
      if (!s.actnorm.initialized()) return false;
    }
  return true;
}

template <typename T>
void FlowModel<T>::set_actnorm_initialized(bool on) {
  for (ScaleBlock& b : scales_)
    for (Step& s : b.steps) s.actnorm.set_initialized(on);
}

template <typename T>
void FlowModel<T>::check_image(const Tensor<T>& x) const {
  const Shape expected = config_.image_shape();
  if (x.rank() != 4 || Shape(x.shape().begin() + 1, x.shape().end()) != expected) {
    throw ShapeError("flow: expected input [N," + shape_string(expected).substr(1) + ", got " +
                     shape_string(x.shape()));
  }
}

template <typename T>
void FlowModel<T>::check_latent(std::span<const Var<T>> chunks) const {
  if (chunks.size() != layout_.chunk_shapes.size()) {
    throw ShapeError("inverse: latent has " + std::to_string(chunks.size()) + " chunks, layout has " +
                     std::to_string(layout_.chunk_shapes.size()));
  }
  const std::size_t n = chunks[0].value().rank() ? chunks[0].value().dim(0) : 0;
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    const Shape& s = chunks[i].shape();
    if (s.size() != 4 || s[0] != n || Shape(s.begin() + 1, s.end()) != layout_.chunk_shapes[i]) {
      throw ShapeError("inverse: chunk " + std::to_string(i) + " has shape " + shape_string(s) +
                       ", layout expects [N," + shape_string(layout_.chunk_shapes[i]).substr(1));
    }
  }
}

template <typename T>
void FlowModel<T>::initialize_actnorm(const Tensor<T>& batch) {
  check_image(batch);
  Tape<T> tape;
  tape.set_track_parameters(false);
  Var<T> h = tape.constant(batch);
  for (ScaleBlock& b : scales_) {
    if (b.squeeze) h = squeeze2(h);
    for (Step& s : b.steps) {
      if (!s.actnorm.initialized()) s.actnorm.initialize(h.value());
      h = s.actnorm.forward(tape, h).out;
      if (s.invconv) h = s.invconv->forward(tape, h).out;
      h = s.coupling.forward(tape, h).out;
    }
    if (b.split) h = split_forward(h).first;
  }
}

template <typename T>
typename FlowModel<T>::ForwardVars FlowModel<T>::forward(Tape<T>& tape, Var<T> x) const {
  check_image(x.value());
  ForwardVars out;
  Var<T> h = x;
  Var<T> logdet = tape.constant(Tensor<T>(Shape{x.shape()[0]}));
  for (const ScaleBlock& b : scales_) {
    if (b.squeeze) h = squeeze2(h);
    for (const Step& s : b.steps) {
      LayerResult<T> r = s.actnorm.forward(tape, h);
      logdet = add(logdet, r.logdet);
      h = r.out;
      if (s.invconv) {
        r = s.invconv->forward(tape, h);
        logdet = add(logdet, r.logdet);
        h = r.out;
      }
      r = s.coupling.forward(tape, h);
      logdet = add(logdet, r.logdet);
      h = r.out;
    }
    if (b.split) {
      auto [keep, factored] = split_forward(h);
      out.chunks.push_back(factored);
      h = keep;
    }
  }
  out.chunks.push_back(h);
  out.logdet = logdet;
  return out;
}

template <typename T>
typename FlowModel<T>::InverseVars FlowModel<T>::inverse(Tape<T>& tape, std::span<const Var<T>> chunks) const {
  check_latent(chunks);
  Var<T> h = chunks.back();
  Var<T> logdet = tape.constant(Tensor<T>(Shape{h.shape()[0]}));
  for (std::size_t i = scales_.size(); i-- > 0;) {
    const ScaleBlock& b = scales_[i];
    if (b.split) h = split_merge(h, chunks[i]);
    for (std::size_t j = b.steps.size(); j-- > 0;) {
      const Step& s = b.steps[j];
      LayerResult<T> r = s.coupling.inverse(tape, h);
      logdet = add(logdet, r.logdet);
      h = r.out;
      if (s.invconv) {
        r = s.invconv->inverse(tape, h);
        logdet = add(logdet, r.logdet);
        h = r.out;
      }
      r = s.actnorm.inverse(tape, h);
      logdet = add(logdet, r.logdet);
      h = r.out;
    }
    if (b.squeeze) h = unsqueeze2(h);
  }
  return {h, logdet};
}

template <typename T>
Var<T> FlowModel<T>::log_prob(Tape<T>& tape, Var<T> x) const {
  ForwardVars f = forward(tape, x);
  return add(latent_log_prior<T>(f.chunks), f.logdet);
}

template <typename T>
typename FlowModel<T>::Regularized FlowModel<T>::latent_regularizer(Tape<T>& tape,
                                                                   std::span<const Var<T>> chunks) const {
  InverseVars inv = inverse(tape, chunks);
  return {inv.x, sub(inv.logdet, latent_log_prior<T>(chunks))};
}

namespace {

template <typename T>
Tensor<T> as_batch(const Tensor<T>& x) {
  if (x.rank() == 3) {
    Shape s{1};
    s.insert(s.end(), x.shape().begin(), x.shape().end());
    return x.reshaped(s);
  }
  return x;
}

template <typename T>
std::vector<Var<T>> constants(Tape<T>& tape, const LatentState<T>& z) {
  std::vector<Var<T>> out;
  for (const Tensor<T>& c : z.chunks) out.push_back(tape.constant(c));
  return out;
}

}  // namespace

template <typename T>
std::pair<LatentState<T>, Tensor<T>> FlowModel<T>::forward(const Tensor<T>& x) const {
  Tape<T> tape;
  tape.set_track_parameters(false);
  ForwardVars f = forward(tape, tape.constant(as_batch(x)));
  LatentState<T> z;
  for (const Var<T>& c : f.chunks) z.chunks.push_back(c.value());
  return {std::move(z), f.logdet.value()};
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> FlowModel<T>::inverse(const LatentState<T>& z) const {
  Tape<T> tape;
  tape.set_track_parameters(false);
  const std::vector<Var<T>> vars = constants(tape, z);
  InverseVars inv = inverse(tape, vars);
  return {inv.x.value(), inv.logdet.value()};
}

template <typename T>
Tensor<T> FlowModel<T>::log_prob(const Tensor<T>& x) const {
  Tape<T> tape;
  tape.set_track_parameters(false);
  return log_prob(tape, tape.constant(as_batch(x))).value();
}

template <typename T>
Tensor<T> FlowModel<T>::latent_regularizer(const LatentState<T>& z) const {
  Tape<T> tape;
  tape.set_track_parameters(false);
  const std::vector<Var<T>> vars = constants(tape, z);
  return latent_regularizer(tape, vars).regularizer.value();
}

template <typename T>
Tensor<T> FlowModel<T>::bits_per_dim(const Tensor<T>& x) const {
  Tensor<T> lp = log_prob(x);
  for (std::size_t i = 0; i < lp.size(); ++i) lp[i] = bits_per_dim_from_log_prob(lp[i], dimension());
  return lp;
}

template <typename T>
LatentState<T> FlowModel<T>::sample_latent(T sigma, std::size_t count, std::uint64_t seed) const {
  if (!(sigma >= T(0))) throw DomainError("sample: sigma must be >= 0");
  if (count == 0) throw DomainError("sample: count must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  LatentState<T> z;
  for (const Shape& cs : layout_.chunk_shapes) {
    Shape shape{count};
    shape.insert(shape.end(), cs.begin(), cs.end());
    Tensor<T> chunk(shape);
    if (sigma > T(0)) {
      for (std::size_t i = 0; i < chunk.size(); ++i) chunk[i] = sigma * static_cast<T>(dist(rng));
    }
    z.chunks.push_back(std::move(chunk));
  }
  return z;
}

template <typename T>
Tensor<T> FlowModel<T>::sample(T sigma, std::size_t count, std::uint64_t seed) const {
  return inverse(sample_latent(sigma, count, seed)).first;
}

template class FlowModel<float>;
template class FlowModel<double>;
template Tensor<float> flatten(const LatentState<float>&);
template Tensor<double> flatten(const LatentState<double>&);
template LatentState<float> unflatten(const Tensor<float>&, const LatentLayout&);
template LatentState<double> unflatten(const Tensor<double>&, const LatentLayout&);
template Var<float> latent_log_prior(std::span<const Var<float>>);
template Var<double> latent_log_prior(std::span<const Var<double>>);
template float bits_per_dim_from_log_prob(float, std::size_t);
template double bits_per_dim_from_log_prob(double, std::size_t);

}  // namespace nflow
