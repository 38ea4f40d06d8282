#include <benchmark/benchmark.h>

#include <random>

#include "nflow/flow_model.hpp"

using namespace nflow;

namespace {

Tensor<float> random_batch(const Shape& shape, std::uint64_t seed) {
  Tensor<float> x(shape);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = u(rng);
  return x;
}

FlowModel<float> make_model(Permutation perm, std::size_t hidden) {
  FlowConfig cfg = FlowConfig::reference(3);
  cfg.hidden_channels = hidden;
  cfg.permutation = perm;
  FlowModel<float> m = FlowModel<float>::build(cfg, 1);
  m.initialize_actnorm(random_batch({16, 3, 32, 32}, 2));
  return m;
}

void BM_Conv3x3(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const Tensor<float> x = random_batch({8, c, 16, 16}, 3);
  const Tensor<float> w = random_batch({c, c, 3, 3}, 4);
  const Tensor<float> b(Shape{c});
  for (auto _ : state) benchmark::DoNotOptimize(conv2d_forward(x, w, b, 1));
}
BENCHMARK(BM_Conv3x3)->Arg(8)->Arg(32)->Arg(64);

void BM_Inverse(benchmark::State& state) {
  const auto perm = state.range(0) ? Permutation::invconv : Permutation::coupling_swap;
  const FlowModel<float> m = make_model(perm, 16);
  const LatentState<float> z = m.sample_latent(1.0f, static_cast<std::size_t>(state.range(1)), 5);
  for (auto _ : state) benchmark::DoNotOptimize(m.inverse(z));
  state.SetLabel(to_string(perm));
}
BENCHMARK(BM_Inverse)->Args({0, 32})->Args({1, 32})->Unit(benchmark::kMillisecond);

void BM_LogProbGradient(benchmark::State& state) {
  FlowModel<float> m = make_model(Permutation::coupling_swap, 16);
  const Tensor<float> x = random_batch({8, 3, 32, 32}, 6);
  for (auto _ : state) {
    Tape<float> tape;
    Var<float> lp = sum(m.log_prob(tape, tape.constant(x)));
    tape.backward(lp);
  }
}
BENCHMARK(BM_LogProbGradient)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
