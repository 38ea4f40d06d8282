#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "nflow/measurement.hpp"
#include "nflow/metrics.hpp"
#include "nflow/solver.hpp"
#include "nflow/trainer.hpp"
#include "support.hpp"

using namespace nflow;
using nflow::testing::normal_tensor;
using nflow::testing::scrambled_model;
using nflow::testing::tiny_config;
using nflow::testing::uniform_tensor;

namespace {

double norm(const Tensor<double>& t) {
  double s = 0;
  for (std::size_t i = 0; i < t.size(); ++i) s += t[i] * t[i];
  return std::sqrt(s);
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// ||analytic - central difference|| / ||central difference||
double latent_gradient_error(const FlowModel<double>& model, const MeasurementOperator& op, const Tensor<double>& z,
                             const Tensor<double>& y, const SolveConfig& cfg, double eps = 1e-6) {
  const Tensor<double> g = objective_gradient(model, op, z, y, cfg);
  Tensor<double> fd(z.shape());
  Tensor<double> probe = z;
  for (std::size_t i = 0; i < z.size(); ++i) {
    probe[i] = z[i] + eps;
    const double up = objective_value(model, op, probe, y, cfg);
    probe[i] = z[i] - eps;
    const double down = objective_value(model, op, probe, y, cfg);
    probe[i] = z[i];
    fd[i] = (up - down) / (2 * eps);
  }
  Tensor<double> diff = g;
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] -= fd[i];
  return norm(diff) / std::max(norm(fd), 1e-12);
}

Tensor<double> latent_of(const FlowModel<double>& model, const Tensor<double>& x) {
  return flatten(model.forward(x).first);
}

const Shape kTiny{2, 4, 4};

}  // namespace

TEST(Measurement, ColorizeAveragesChannels) {
  Tensor<double> x(Shape{3, 2, 2});
  for (std::size_t i = 0; i < 4; ++i) {
    x[i] = 0.2;
    x[4 + i] = 0.5;
    x[8 + i] = 0.8;
  }
  const auto op = MeasurementOperator::colorize({3, 2, 2});
  const Tensor<double> y = op.apply(x);
  ASSERT_EQ(y.shape(), (Shape{1, 2, 2}));
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], 0.5, 1e-15);
  EXPECT_THROW(MeasurementOperator::colorize({1, 2, 2}), ShapeError);
}

TEST(Measurement, BlurOfConstantIsConstant) {
  const auto op = MeasurementOperator::blur3x3({3, 8, 8});
  const Tensor<double> y = op.apply(Tensor<double>(Shape{3, 8, 8}, 0.7));
  ASSERT_EQ(y.shape(), (Shape{3, 6, 6}));
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], 0.7, 1e-14);
  const auto reflect = MeasurementOperator::blur3x3({3, 8, 8}, BlurMode::reflect);
  const Tensor<double> yr = reflect.apply(Tensor<double>(Shape{2, 3, 8, 8}, 0.7));
  ASSERT_EQ(yr.shape(), (Shape{2, 3, 8, 8}));
  for (std::size_t i = 0; i < yr.size(); ++i) EXPECT_NEAR(yr[i], 0.7, 1e-14);
}

TEST(Measurement, InpaintZeroesCenterSquare) {
  const auto op = MeasurementOperator::inpaint_center({3, 32, 32});
  EXPECT_EQ(op.mask_side(), 16u);
  const Tensor<double> x = uniform_tensor<double>({3, 32, 32}, 1, 0.1, 1.0);
  const Tensor<double> y = op.apply(x);
  std::size_t zeros = 0;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t r = 0; r < 32; ++r)
      for (std::size_t q = 0; q < 32; ++q) {
        const std::size_t i = (c * 32 + r) * 32 + q;
        const bool inside = r >= 8 && r < 24 && q >= 8 && q < 24;
        EXPECT_EQ(op.masked(r, q), inside);
        if (inside) {
          EXPECT_EQ(y[i], 0.0);
          ++zeros;
        } else {
          EXPECT_EQ(y[i], x[i]);
        }
      }
  EXPECT_EQ(zeros, 3u * 16 * 16);
}

TEST(Measurement, LinearityAndAdjointIdentity) {
  const Shape img{3, 6, 6};
  const std::vector<MeasurementOperator> ops = {
      MeasurementOperator::denoise(img), MeasurementOperator::blur3x3(img),
      MeasurementOperator::blur3x3(img, BlurMode::reflect), MeasurementOperator::inpaint_center(img, 2),
      MeasurementOperator::colorize(img), MeasurementOperator::generic(img, normal_tensor<double>({5, 108}, 2))};
  for (const auto& op : ops) {
    const auto x1 = normal_tensor<double>({2, 3, 6, 6}, 3), x2 = normal_tensor<double>({2, 3, 6, 6}, 4);
    Tensor<double> comb = x1;
    for (std::size_t i = 0; i < comb.size(); ++i) comb[i] = 2.0 * x1[i] - 0.5 * x2[i];
    const auto a1 = op.apply(x1), a2 = op.apply(x2), ac = op.apply(comb);
    for (std::size_t i = 0; i < ac.size(); ++i) EXPECT_NEAR(ac[i], 2.0 * a1[i] - 0.5 * a2[i], 1e-12);
    const auto y = normal_tensor<double>(op.apply(x1).shape(), 5);
    EXPECT_NEAR(dot(op.apply(x1), y), dot(x1, op.adjoint(y)), 1e-10) << static_cast<int>(op.kind());
  }
}

TEST(Measurement, TapeApplyMatchesTensorApplyAndGradients) {
  const Shape img{2, 4, 4};
  for (const auto& op : {MeasurementOperator::blur3x3(img), MeasurementOperator::blur3x3(img, BlurMode::reflect),
                         MeasurementOperator::inpaint_center(img)}) {
    const auto x = normal_tensor<double>({2, 2, 4, 4}, 6);
    Tape<double> tape;
    EXPECT_EQ(op.apply(tape.constant(x)).value(), op.apply(x));
    const double err = nflow::testing::op_gradient_error(
        [&op](Tape<double>&, const std::vector<Var<double>>& in) { return op.apply(in[0]); }, {x});
    EXPECT_LT(err, 1e-6);
  }
}

TEST(Measurement, NoiseStatistics) {
  const Shape img{1, 100, 100};
  const auto op = MeasurementOperator::denoise(img, 0.1);
  const Tensor<double> x(Shape{10, 1, 100, 100}, 0.5);
  const Tensor<double> y = op.measure(x, 7);
  double mean = 0, var = 0;
  for (std::size_t i = 0; i < y.size(); ++i) mean += y[i] - 0.5;
  mean /= static_cast<double>(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) var += (y[i] - 0.5 - mean) * (y[i] - 0.5 - mean);
  var /= static_cast<double>(y.size() - 1);
  EXPECT_NEAR(mean, 0.0, 1e-3);
  EXPECT_NEAR(var, 0.01, 3e-4);
  EXPECT_EQ(y, op.measure(x, 7));
  EXPECT_NE(y, op.measure(x, 8));

  const auto total = MeasurementOperator::denoise(img, 0.1, NoiseMode::total_norm);
  EXPECT_NEAR(total.noise_std_per_entry(), 0.1 / 100.0, 1e-15);
}

TEST(Measurement, NoiselessOperatorsIgnoreTheSeed) {
  const auto x = uniform_tensor<double>({3, 8, 8}, 8, 0.0, 1.0);
  for (Task t : {Task::deblur, Task::inpaint, Task::colorize}) {
    const auto op = MeasurementOperator::for_task(t, {3, 8, 8});
    EXPECT_EQ(op.noise_std_per_entry(), 0.0);
    EXPECT_EQ(op.measure(x, 1), op.apply(x));
  }
  const auto inpaint = MeasurementOperator::inpaint_center({3, 8, 8});
  const auto y = inpaint.measure(x, 9);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t r = 0; r < 8; ++r)
      for (std::size_t q = 0; q < 8; ++q) {
        const std::size_t i = (c * 8 + r) * 8 + q;
        if (!inpaint.masked(r, q)) {
          EXPECT_EQ(y[i], x[i]);
        }
      }
}

TEST(Measurement, RejectsWrongShapes) {
  const auto op = MeasurementOperator::blur3x3({3, 8, 8});
  EXPECT_THROW(op.apply(Tensor<double>(Shape{3, 8, 9})), ShapeError);
  EXPECT_THROW(op.adjoint(Tensor<double>(Shape{3, 8, 8})), ShapeError);
  EXPECT_THROW(MeasurementOperator::blur3x3({3, 2, 8}), ShapeError);
  EXPECT_THROW(MeasurementOperator::generic({1, 2, 2}, Tensor<double>(Shape{3, 5})), ShapeError);
  EXPECT_THROW(MeasurementOperator::inpaint_center({1, 4, 4}, 5), ShapeError);
}

TEST(Objective, LatentGradientsMatchFiniteDifferences) {
  const auto model = scrambled_model<double>(tiny_config(), 10);
  const auto x = uniform_tensor<double>({2, 2, 4, 4}, 11, 0.05, 0.95);
  const auto op = MeasurementOperator::denoise(kTiny);
  const auto y = op.measure(x, 12);
  const auto z = normal_tensor<double>({2, 32}, 13, 0.3);
  for (Method m : {Method::ours, Method::csgm, Method::map}) {
    SolveConfig cfg = SolveConfig::defaults(m, Task::denoise);
    EXPECT_LT(latent_gradient_error(model, op, z, y, cfg), 1e-4) << to_string(m);
  }
  const auto blur = MeasurementOperator::blur3x3(kTiny);
  const auto yb = blur.apply(x);
  for (Method m : {Method::ours, Method::glowip}) {
    EXPECT_LT(latent_gradient_error(model, blur, z, yb, SolveConfig::defaults(m, Task::deblur)), 1e-4) << to_string(m);
  }
}

TEST(Objective, LatentGradientsInvconvVariant) {
  const auto model = scrambled_model<double>(tiny_config(Permutation::invconv), 14);
  const auto op = MeasurementOperator::inpaint_center(kTiny);
  const auto y = op.apply(uniform_tensor<double>({1, 2, 4, 4}, 15, 0.0, 1.0));
  const auto z = normal_tensor<double>({1, 32}, 16, 0.3);
  EXPECT_LT(latent_gradient_error(model, op, z, y, SolveConfig::defaults(Method::ours, Task::inpaint)), 1e-4);
}

TEST(Objective, ExactLatentGivesZeroDataLoss) {
  const auto model = scrambled_model<double>(tiny_config(), 17);
  const auto y = uniform_tensor<double>({3, 2, 4, 4}, 18, 0.0, 1.0);
  const auto op = MeasurementOperator::denoise(kTiny, 0.0);
  SolveConfig cfg = SolveConfig::defaults(Method::ours, Task::denoise);
  cfg.alpha = 0;
  Tape<double> tape;
  tape.set_track_parameters(false);
  const auto terms = objective(model, op, tape, tape.constant(latent_of(model, y)), y, cfg);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_LE(terms.data.value()[i], 1e-4);
  EXPECT_EQ(terms.total.value(), terms.data.value());
}

TEST(Objective, CsgmTerms) {
  const auto model = scrambled_model<double>(tiny_config(), 19);
  const auto y = uniform_tensor<double>({2, 2, 4, 4}, 20, 0.0, 1.0);
  const auto op = MeasurementOperator::denoise(kTiny);
  SolveConfig cfg = SolveConfig::defaults(Method::csgm, Task::denoise);
  cfg.gamma = 0;
  EXPECT_NEAR(objective_value(model, op, latent_of(model, y), y, cfg), 0.0, 1e-18 + 1e-10);
  const auto z = normal_tensor<double>({2, 32}, 21);
  cfg.gamma = 2.0;
  Tape<double> tape;
  tape.set_track_parameters(false);
  const auto terms = objective(model, op, tape, tape.constant(z), y, cfg);
  for (std::size_t i = 0; i < 2; ++i) {
    double zz = 0;
    for (std::size_t k = 0; k < 32; ++k) zz += z[i * 32 + k] * z[i * 32 + k];
    EXPECT_NEAR(terms.reg.value()[i], zz, 1e-12);
    EXPECT_NEAR(terms.total.value()[i], terms.data.value()[i] + 2.0 * zz, 1e-10);
  }
}

TEST(Objective, MapDefinition) {
  const auto model = scrambled_model<double>(tiny_config(), 22);
  const auto op = MeasurementOperator::denoise(kTiny);
  const auto y = op.measure(uniform_tensor<double>({2, 2, 4, 4}, 23, 0.0, 1.0), 24);
  const auto z = normal_tensor<double>({2, 32}, 25, 0.5);
  SolveConfig cfg = SolveConfig::defaults(Method::map, Task::denoise);
  cfg.beta = 0;
  Tape<double> tape;
  tape.set_track_parameters(false);
  const auto terms = objective(model, op, tape, tape.constant(z), y, cfg);
  const Tensor<double>& x = terms.x.value();
  const Tensor<double> lp = model.log_prob(x);
  for (std::size_t i = 0; i < 2; ++i) {
    double r2 = 0;
    for (std::size_t k = 0; k < 32; ++k) r2 += (x[i * 32 + k] - y[i * 32 + k]) * (x[i * 32 + k] - y[i * 32 + k]);
    EXPECT_NEAR(terms.total.value()[i], r2 / (2 * 0.1 * 0.1), 1e-9);
    EXPECT_NEAR(terms.reg.value()[i], -lp[i], 1e-8 * std::abs(lp[i]) + 1e-8);
  }
  const auto blur = MeasurementOperator::blur3x3(kTiny);
  EXPECT_THROW(objective_value(model, blur, z, blur.apply(terms.x.value()), cfg), Error);
}

TEST(Solve, DefaultsPerMethod) {
  EXPECT_EQ(SolveConfig::defaults(Method::glowip, Task::denoise).init_std, 0.0);
  EXPECT_EQ(SolveConfig::defaults(Method::csgm, Task::denoise).init_std, 1.0);
  EXPECT_EQ(SolveConfig::defaults(Method::ours, Task::denoise).init_std, 0.1);
  EXPECT_EQ(SolveConfig::defaults(Method::ours, Task::denoise).iterations, 1500u);
  EXPECT_EQ(SolveConfig::defaults(Method::ours, Task::denoise).learning_rate, 0.005);
  EXPECT_EQ(method_from_string("glowip"), Method::glowip);
  EXPECT_THROW(method_from_string("sgd"), Error);
  SolveConfig bad;
  bad.iterations = 0;
  EXPECT_THROW(bad.validate(), Error);
}

TEST(Solve, DeterministicAndThreadIndependent) {
  const auto model = scrambled_model<double>(tiny_config(), 26);
  const auto op = MeasurementOperator::denoise(kTiny);
  const auto y = op.measure(uniform_tensor<double>({4, 2, 4, 4}, 27, 0.0, 1.0), 28);
  SolveConfig cfg = SolveConfig::defaults(Method::ours, Task::denoise);
  cfg.iterations = 30;
  cfg.seed = 3;
  const auto a = solve(model, op, y, cfg);
  const auto b = solve(model, op, y, cfg);
  EXPECT_EQ(a.x_hat, b.x_hat);
  EXPECT_EQ(a.z_hat, b.z_hat);
  cfg.batch_size = 1;
  cfg.threads = 2;
  const auto c = solve(model, op, y, cfg);
  EXPECT_EQ(a.x_hat, c.x_hat);
  EXPECT_EQ(a.z_hat, c.z_hat);
  EXPECT_EQ(a.best_iteration, c.best_iteration);
  ASSERT_EQ(a.trace.size(), 30u);
  for (std::size_t i = 0; i < 30; ++i) EXPECT_NEAR(a.trace[i].objective, c.trace[i].objective, 1e-9);

  // splitting by first_index reproduces the same per-image results
  std::vector<std::size_t> rows{2, 3};
  cfg.threads = 1;
  const auto tail = solve(model, op, take_rows(y, rows), cfg, 2);
  for (std::size_t k = 0; k < 64; ++k) EXPECT_EQ(tail.x_hat[k], a.x_hat[64 + k]);
}

TEST(Solve, OutputsAndInitialization) {
  const auto model = scrambled_model<double>(tiny_config(), 29);
  const auto op = MeasurementOperator::blur3x3(kTiny);
  const auto y = op.apply(uniform_tensor<double>({2, 2, 4, 4}, 30, 0.0, 1.0));
  SolveConfig cfg = SolveConfig::defaults(Method::glowip, Task::deblur);
  cfg.iterations = 20;
  const auto r = solve(model, op, y, cfg);
  ASSERT_EQ(r.x_hat.shape(), (Shape{2, 2, 4, 4}));
  ASSERT_EQ(r.z_hat.shape(), (Shape{2, 32}));
  for (std::size_t i = 0; i < r.x_hat.size(); ++i) {
    EXPECT_GE(r.x_hat[i], 0.0);
    EXPECT_LE(r.x_hat[i], 1.0);
  }
  // z0 = 0 for glowip
  const auto zero = model.inverse(unflatten(Tensor<double>(Shape{2, 32}), model.latent_layout())).first;
  EXPECT_EQ(r.x_init, clip_unit(zero));
  EXPECT_EQ(r.trace.size(), 20u);
  ASSERT_EQ(r.data_loss.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_LE(r.best_iteration[i], 20u);

  const auto z0 = initial_latent<double>(32, 3, SolveConfig::defaults(Method::csgm, Task::deblur), 0);
  const auto z1 = initial_latent<double>(32, 1, SolveConfig::defaults(Method::csgm, Task::deblur), 2);
  for (std::size_t k = 0; k < 32; ++k) EXPECT_EQ(z0[64 + k], z1[k]);
}

TEST(Solve, ObjectiveDecreasesForEveryMethod) {
  const auto model = scrambled_model<double>(tiny_config(), 31);
  const auto op = MeasurementOperator::denoise(kTiny);
  const auto y = op.measure(uniform_tensor<double>({3, 2, 4, 4}, 32, 0.1, 0.9), 33);
  for (Method m : {Method::ours, Method::csgm, Method::glowip, Method::map}) {
    SolveConfig cfg = SolveConfig::defaults(m, Task::denoise);
    cfg.iterations = 100;
    const auto r = solve(model, op, y, cfg);
    EXPECT_LE(r.trace.back().objective, r.trace.front().objective) << to_string(m);
    EXPECT_LE(r.trace.back().data_loss, r.trace.front().data_loss) << to_string(m);
  }
}

TEST(Solve, LargeGammaShrinksLatent) {
  const auto model = scrambled_model<double>(tiny_config(), 34);
  const auto op = MeasurementOperator::denoise(kTiny);
  const auto y = op.measure(uniform_tensor<double>({2, 2, 4, 4}, 35, 0.0, 1.0), 36);
  SolveConfig cfg = SolveConfig::defaults(Method::csgm, Task::denoise);
  cfg.gamma = 1e6;
  cfg.iterations = 300;
  const auto z0 = initial_latent<double>(32, 2, cfg, 0);
  const auto r = solve(model, op, y, cfg);
  cfg.gamma = 0;
  const auto free = solve(model, op, y, cfg);
  // Adam moves each coordinate at most about lr per step, so 300 steps cannot reach 0
  EXPECT_LT(norm(r.z_hat), 0.5 * norm(z0));
  EXPECT_LT(norm(r.z_hat), norm(free.z_hat));
}

TEST(Solve, RejectsMismatchedMeasurements) {
  const auto model = scrambled_model<double>(tiny_config(), 37);
  const auto op = MeasurementOperator::blur3x3(kTiny);
  SolveConfig cfg;
  cfg.iterations = 2;
  EXPECT_THROW(solve(model, op, Tensor<double>(Shape{1, 2, 4, 4}), cfg), ShapeError);
}

TEST(Metrics, PsnrExamples) {
  const Tensor<double> zero(Shape{1, 4, 4}, 0.0);
  EXPECT_EQ(psnr(zero, zero), std::numeric_limits<double>::infinity());
  EXPECT_NEAR(psnr(zero, Tensor<double>(Shape{1, 4, 4}, 0.1)), 20.0, 1e-9);
  EXPECT_NEAR(psnr(zero, Tensor<double>(Shape{1, 4, 4}, 0.5)), 6.0206, 1e-4);
  EXPECT_THROW(psnr(zero, Tensor<double>(Shape{1, 4, 5})), ShapeError);
}

TEST(Metrics, SsimExamples) {
  const auto x = uniform_tensor<double>({3, 16, 16}, 38, 0.0, 1.0);
  EXPECT_NEAR(ssim(x, x), 1.0, 1e-12);
  const double c1 = 0.01 * 0.01;
  EXPECT_NEAR(ssim(Tensor<double>(Shape{12, 12}, 0.0), Tensor<double>(Shape{12, 12}, 1.0)), c1 / (1 + c1), 1e-12);
  const auto y = uniform_tensor<double>({3, 16, 16}, 39, 0.0, 1.0);
  const double s = ssim(x, y);
  EXPECT_NEAR(s, ssim(y, x), 1e-12);
  EXPECT_LT(s, 1.0);
  EXPECT_GE(s, -1.0);
  EXPECT_THROW(ssim(Tensor<double>(Shape{1, 8, 8}), Tensor<double>(Shape{1, 8, 8})), ShapeError);
}
