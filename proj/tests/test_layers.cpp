#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "nflow/layers.hpp"
#include "support.hpp"

using namespace nflow;
using nflow::testing::normal_tensor;
using nflow::testing::uniform_tensor;
using V = Var<double>;

namespace {

// log|det| of the finite-difference Jacobian of a per-sample layer map.
template <typename F>
double layer_brute_logdet(F f, const Tensor<double>& x) {
  const std::size_t n = x.size();
  Eigen::MatrixXd J(n, n);
  Tensor<double> probe = x;
  const double eps = 1e-6;
  for (std::size_t i = 0; i < n; ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const Tensor<double> up = f(probe);
    probe[i] = orig - eps;
    const Tensor<double> down = f(probe);
    probe[i] = orig;
    for (std::size_t r = 0; r < n; ++r) J(r, i) = (up[r] - down[r]) / (2 * eps);
  }
  return std::log(std::abs(J.determinant()));
}

CouplingLayer<double> scrambled_coupling(std::size_t channels, std::size_t kernel, bool swap, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  CouplingLayer<double> layer("c", channels, 6, kernel, swap, rng);
  std::normal_distribution<double> n(0.0, 0.3);
  for (Parameter<double>* p : layer.parameters())
    for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] += n(rng);
  return layer;
}

}  // namespace

TEST(ActNorm, InitializationGivesZeroMeanUnitVariance) {
  ActNorm<double> an("a", 3);
  EXPECT_FALSE(an.initialized());
  const auto x = uniform_tensor<double>({8, 3, 4, 4}, 1, -3.0, 5.0);
  an.initialize(x);
  EXPECT_TRUE(an.initialized());
  Tape<double> tape;
  const Tensor<double> y = an.forward(tape, tape.constant(x)).out.value();
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0, sq = 0;
    for (std::size_t n = 0; n < 8; ++n)
      for (std::size_t i = 0; i < 16; ++i) {
        const double v = y[(n * 3 + c) * 16 + i];
        mean += v;
        sq += v * v;
      }
    mean /= 128;
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(sq / 128 - mean * mean, 1.0, 1e-12);
  }
}

TEST(ActNorm, LogdetIsPlaneTimesSumOfLogScales) {
  ActNorm<double> an("a", 2);
  an.log_scale().value = Tensor<double>(Shape{2}, std::vector<double>{0.3, -1.1});
  an.bias().value = Tensor<double>(Shape{2}, std::vector<double>{0.5, 2.0});
  an.set_initialized(true);
  Tape<double> tape;
  const auto x = normal_tensor<double>({2, 2, 3, 5}, 2);
  const LayerResult<double> f = an.forward(tape, tape.constant(x));
  EXPECT_NEAR(f.logdet.value().item(), 15 * (0.3 - 1.1), 1e-12);
  const LayerResult<double> b = an.inverse(tape, f.out);
  EXPECT_NEAR(b.logdet.value().item(), -15 * (0.3 - 1.1), 1e-12);
  EXPECT_LE(max_abs_diff(b.out.value(), x), 1e-12);
}

TEST(ActNorm, RejectsUseBeforeInitAndDegenerateBatches) {
  ActNorm<double> an("a", 1);
  Tape<double> tape;
  EXPECT_THROW(an.forward(tape, tape.constant(Tensor<double>(Shape{1, 1, 2, 2}))), Error);
  EXPECT_THROW(an.initialize(Tensor<double>(Shape{4, 1, 2, 2}, 3.0)), DomainError);
  EXPECT_THROW(an.initialize(Tensor<double>(Shape{1, 1, 1, 1}, 3.0)), DomainError);
}

TEST(Coupling, ZeroInitStartsAtSigmoidTwo) {
  std::mt19937_64 rng(3);
  CouplingLayer<double> layer("c", 4, 8, 3, false, rng);
  Tape<double> tape;
  const auto x = normal_tensor<double>({2, 4, 3, 3}, 4);
  const LayerResult<double> r = layer.forward(tape, tape.constant(x));
  const double s2 = 1.0 / (1.0 + std::exp(-2.0));
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t i = 0; i < 18; ++i) EXPECT_EQ(r.out.value()[n * 36 + i], x[n * 36 + i]);
    for (std::size_t i = 18; i < 36; ++i) EXPECT_NEAR(r.out.value()[n * 36 + i], x[n * 36 + i] * s2, 1e-15);
    EXPECT_NEAR(r.logdet.value()[n], 18 * std::log(s2), 1e-12);
  }
}

TEST(Coupling, InverseUndoesForwardBothSwaps) {
  for (bool swap : {false, true}) {
    const CouplingLayer<double> layer = scrambled_coupling(4, 3, swap, 5);
    Tape<double> tape;
    const auto x = normal_tensor<double>({3, 4, 4, 4}, 6);
    const LayerResult<double> f = layer.forward(tape, tape.constant(x));
    const LayerResult<double> b = layer.inverse(tape, f.out);
    EXPECT_LE(max_abs_diff(b.out.value(), x), 1e-12);
    for (std::size_t n = 0; n < 3; ++n) EXPECT_NEAR(f.logdet.value()[n] + b.logdet.value()[n], 0.0, 1e-12);
  }
}

TEST(Coupling, SwapLeavesTheSecondHalfUnchanged) {
  const CouplingLayer<double> layer = scrambled_coupling(4, 3, true, 7);
  Tape<double> tape;
  const auto x = normal_tensor<double>({1, 4, 2, 2}, 8);
  const Tensor<double> y = layer.forward(tape, tape.constant(x)).out.value();
  for (std::size_t i = 8; i < 16; ++i) EXPECT_EQ(y[i], x[i]);
  bool changed = false;
  for (std::size_t i = 0; i < 8; ++i) changed |= y[i] != x[i];
  EXPECT_TRUE(changed);
}

TEST(Coupling, LogdetMatchesBruteForceJacobian) {
  for (std::size_t kernel : {1u, 3u}) {
    const CouplingLayer<double> layer = scrambled_coupling(4, kernel, kernel == 3, 9);
    const auto x = normal_tensor<double>({1, 4, 2, 2}, 10);
    auto f = [&](const Tensor<double>& p) {
      Tape<double> t;
      return layer.forward(t, t.constant(p)).out.value();
    };
    Tape<double> tape;
    const double analytic = layer.forward(tape, tape.constant(x)).logdet.value()[0];
    const double brute = layer_brute_logdet(f, x);
    EXPECT_LE(std::abs(analytic - brute) / std::abs(brute), 1e-6) << "kernel " << kernel;
  }
}

TEST(Coupling, RejectsOddChannels) {
  std::mt19937_64 rng(0);
  EXPECT_THROW(CouplingLayer<double>("c", 3, 4, 3, false, rng), ShapeError);
  EXPECT_THROW(CouplingLayer<double>("c", 4, 4, 5, false, rng), ShapeError);
}

TEST(InvConv, StartsOrthogonalAndInverts) {
  std::mt19937_64 rng(11);
  InvConv1x1<double> ic("i", 4, rng);
  EXPECT_NEAR(ic.abs_det(), 1.0, 1e-12);
  Tape<double> tape;
  const auto x = normal_tensor<double>({2, 4, 3, 3}, 12);
  const LayerResult<double> f = ic.forward(tape, tape.constant(x));
  const LayerResult<double> b = ic.inverse(tape, f.out);
  EXPECT_LE(max_abs_diff(b.out.value(), x), 1e-12);
  EXPECT_NEAR(f.logdet.value().item(), 0.0, 1e-12);
}

TEST(InvConv, LogdetIsPlaneTimesLogAbsDet) {
  std::mt19937_64 rng(13);
  InvConv1x1<double> ic("i", 2, rng);
  ic.weight().value = Tensor<double>(Shape{2, 2}, std::vector<double>{2.0, 0.5, 0.1, -1.5});
  Tape<double> tape;
  const auto x = normal_tensor<double>({1, 2, 2, 3}, 14);
  const double ld = ic.forward(tape, tape.constant(x)).logdet.value().item();
  EXPECT_NEAR(ld, 6 * std::log(std::abs(2.0 * -1.5 - 0.5 * 0.1)), 1e-12);
  auto f = [&](const Tensor<double>& p) {
    Tape<double> t;
    return ic.forward(t, t.constant(p)).out.value();
  };
  EXPECT_NEAR(layer_brute_logdet(f, x), ld, 1e-6);
}

TEST(InvConv, RejectsNearSingularWeights) {
  std::mt19937_64 rng(15);
  InvConv1x1<double> ic("i", 2, rng);
  ic.weight().value = Tensor<double>(Shape{2, 2}, std::vector<double>{1.0, 1.0, 1.0, 1.0});
  Tape<double> tape;
  EXPECT_THROW(ic.forward(tape, tape.constant(Tensor<double>(Shape{1, 2, 1, 1}))), DomainError);
}

TEST(Split, HalvesAndMergesInOrder) {
  Tape<double> tape;
  const auto x = normal_tensor<double>({2, 6, 2, 2}, 16);
  const auto [keep, z] = split_forward(tape.constant(x));
  EXPECT_EQ(keep.shape(), (Shape{2, 3, 2, 2}));
  EXPECT_EQ(z.value()[0], x[12]);
  EXPECT_EQ(split_merge(keep, z).value(), x);
  EXPECT_THROW(split_forward(tape.constant(Tensor<double>(Shape{1, 3, 1, 1}))), ShapeError);
}

TEST(Squeeze, LayerIsVolumePreserving) {
  Tape<double> tape;
  const auto x = normal_tensor<double>({1, 2, 4, 4}, 17);
  const Tensor<double> y = squeeze_forward(tape.constant(x)).value();
  EXPECT_EQ(y.shape(), (Shape{1, 8, 2, 2}));
  std::vector<double> a(x.data().begin(), x.data().end()), b(y.data().begin(), y.data().end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  EXPECT_EQ(a, b);
  EXPECT_EQ(squeeze_inverse(tape.constant(y)).value(), x);
}
