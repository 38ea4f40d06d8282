#include <gtest/gtest.h>

#include <cmath>

#include "nflow/autodiff.hpp"
#include "support.hpp"

using namespace nflow;
using nflow::testing::normal_tensor;
using nflow::testing::op_gradient_error;
using nflow::testing::uniform_tensor;
using nflow::testing::OpFn;
using V = Var<double>;
using Vs = std::vector<Var<double>>;

namespace {

Tensor<double> vec(std::initializer_list<double> v) { return Tensor<double>(Shape{v.size()}, std::vector<double>(v)); }

constexpr double kGradTol = 1e-6;

}  // namespace

TEST(Tensor, ShapeAndSizeAgree) {
  Tensor<float> t(Shape{2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_THROW(Tensor<float>(Shape{2, 0}), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{2}, std::vector<float>{1, 2, 3}), ShapeError);
}

TEST(Conv2d, IdentityKernelReturnsInput) {
  Tape<double> tape;
  const auto x = uniform_tensor<double>({1, 3, 5, 4}, 1);
  Tensor<double> w(Shape{3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) w[c * 3 + c] = 1.0;
  V y = conv2d(tape.constant(x), tape.constant(w), tape.constant(Tensor<double>(Shape{3})), 0);
  EXPECT_EQ(y.value(), x);
}

TEST(Conv2d, AllOnesKernelSumsNine) {
  Tape<double> tape;
  const Tensor<double> x(Shape{1, 1, 5, 5}, 1.0);
  const Tensor<double> w(Shape{1, 1, 3, 3}, 1.0);
  V y = conv2d(tape.constant(x), tape.constant(w), tape.constant(Tensor<double>(Shape{1})), 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  for (std::size_t i = 0; i < 9; ++i) EXPECT_DOUBLE_EQ(y.value()[i], 9.0);
}

TEST(Conv2d, UnbatchedInputKeepsRank) {
  Tape<double> tape;
  const Tensor<double> x(Shape{1, 5, 5}, 1.0);
  const Tensor<double> w(Shape{1, 1, 3, 3}, 1.0);
  V y = conv2d(tape.constant(x), tape.constant(w), tape.constant(Tensor<double>(Shape{1})), 1);
  EXPECT_EQ(y.shape(), (Shape{1, 5, 5}));
  EXPECT_DOUBLE_EQ(y.value()[0], 4.0);
  EXPECT_DOUBLE_EQ(y.value()[12], 9.0);
}

TEST(Conv2d, InputGradientMatchesFiniteDifferences) {
  const auto x = uniform_tensor<double>({1, 2, 4, 4}, 2);
  const auto w = uniform_tensor<double>({3, 2, 3, 3}, 3);
  const auto b = uniform_tensor<double>({3}, 4);
  for (std::size_t pad : {0u, 1u}) {
    auto op = [pad](Tape<double>&, const Vs& v) { return conv2d(v[0], v[1], v[2], pad); };
    EXPECT_LE(op_gradient_error(op, {x, w, b}), kGradTol) << "padding " << pad;
  }
  // plain sum of the output as the reference
  Tape<double> tape;
  V xv = tape.variable(x);
  tape.backward(sum(conv2d(xv, tape.constant(w), tape.constant(b), 0)));
  const Tensor<double> numeric = finite_diff_grad<double>(
      [&](const Tensor<double>& p) {
        Tape<double> t;
        return sum(conv2d(t.constant(p), t.constant(w), t.constant(b), 0)).value().item();
      },
      x, 1e-5);
  EXPECT_LE(relative_error(tape.grad(xv), numeric), 1e-6);
}

TEST(Conv2d, ShapeErrorsNameTheAxis) {
  Tape<double> tape;
  V x = tape.constant(Tensor<double>(Shape{1, 2, 4, 4}));
  V b = tape.constant(Tensor<double>(Shape{3}));
  try {
    conv2d(x, tape.constant(Tensor<double>(Shape{3, 5, 3, 3})), b, 1);
    FAIL() << "channel mismatch accepted";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("channel"), std::string::npos) << e.what();
  }
  try {
    conv2d(x, tape.constant(Tensor<double>(Shape{3, 2, 3, 3})), tape.constant(Tensor<double>(Shape{2})), 1);
    FAIL() << "bias mismatch accepted";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("bias"), std::string::npos) << e.what();
  }
  V small = tape.constant(Tensor<double>(Shape{1, 2, 2, 2}));
  EXPECT_THROW(conv2d(small, tape.constant(Tensor<double>(Shape{3, 2, 3, 3})), b, 0), ShapeError);
}

TEST(Conv2d, PointwiseKernelPreservesSpatialConstancy) {
  Tape<double> tape;
  Tensor<double> x(Shape{1, 3, 4, 5});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 20; ++i) x[c * 20 + i] = static_cast<double>(c) - 0.7;
  V y = conv2d(tape.constant(x), tape.constant(uniform_tensor<double>({4, 3, 1, 1}, 5)),
               tape.constant(uniform_tensor<double>({4}, 6)), 0);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 1; i < 20; ++i) EXPECT_EQ(y.value()[c * 20 + i], y.value()[c * 20]);
}

TEST(Elementwise, ClosedFormValues) {
  Tape<double> tape;
  EXPECT_DOUBLE_EQ(sigmoid(tape.constant(vec({0}))).value()[0], 0.5);
  EXPECT_NEAR(sigmoid(tape.constant(vec({2}))).value()[0], 0.8807970779778823, 1e-15);
  EXPECT_DOUBLE_EQ(sum(abs(tape.constant(vec({-1, 2, -3})))).value().item(), 6.0);
  EXPECT_NEAR(log_sigmoid(tape.constant(vec({-800}))).value()[0], -800.0, 1e-9);
  EXPECT_DOUBLE_EQ(exp(tape.constant(vec({0}))).value()[0], 1.0);
  EXPECT_DOUBLE_EQ(log(tape.constant(vec({1}))).value()[0], 0.0);
  EXPECT_DOUBLE_EQ(negate(tape.constant(vec({2}))).value()[0], -2.0);
  EXPECT_DOUBLE_EQ(scale(tape.constant(vec({2})), 3.0).value()[0], 6.0);
  EXPECT_DOUBLE_EQ(elementwise(tape.constant(vec({-4})), Elementwise::relu).value()[0], 0.0);
}

TEST(Elementwise, LogOfNonPositiveNamesFirstIndex) {
  Tape<double> tape;
  try {
    log(tape.constant(vec({1, 2, 0, -1})));
    FAIL() << "log(0) accepted";
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("index 2"), std::string::npos) << e.what();
  }
}

TEST(Elementwise, BinaryOpsRejectMismatchedShapes) {
  Tape<double> tape;
  EXPECT_THROW(add(tape.constant(vec({1, 2})), tape.constant(vec({1, 2, 3}))), ShapeError);
  V s = add(tape.constant(vec({1, 2})), tape.constant(Tensor<double>::scalar(1.5)));
  EXPECT_DOUBLE_EQ(s.value()[1], 3.5);
}

TEST(Gradients, EveryUnaryOpMatchesFiniteDifferences) {
  const auto x = uniform_tensor<double>({2, 3, 2, 2}, 10, -2.0, 2.0);
  const auto pos = uniform_tensor<double>({2, 3, 2, 2}, 11, 0.5, 2.0);
  const std::vector<std::pair<const char*, OpFn>> ops = {
      {"sigmoid", [](Tape<double>&, const Vs& v) { return sigmoid(v[0]); }},
      {"log_sigmoid", [](Tape<double>&, const Vs& v) { return log_sigmoid(v[0]); }},
      {"exp", [](Tape<double>&, const Vs& v) { return exp(v[0]); }},
      {"abs", [](Tape<double>&, const Vs& v) { return abs(v[0]); }},
      {"relu", [](Tape<double>&, const Vs& v) { return relu(v[0]); }},
      {"negate", [](Tape<double>&, const Vs& v) { return negate(v[0]); }},
      {"square", [](Tape<double>&, const Vs& v) { return square(v[0]); }},
      {"scale", [](Tape<double>&, const Vs& v) { return scale(v[0], -1.7); }},
      {"add_scalar", [](Tape<double>&, const Vs& v) { return add_scalar(v[0], 0.3); }},
      {"sum", [](Tape<double>&, const Vs& v) { return sum(v[0]); }},
      {"sum_per_sample", [](Tape<double>&, const Vs& v) { return sum_per_sample(v[0]); }},
      {"reshape", [](Tape<double>&, const Vs& v) { return reshape(v[0], Shape{6, 4}); }},
      {"slice_channels", [](Tape<double>&, const Vs& v) { return slice_channels(v[0], 1, 3); }},
      {"squeeze2", [](Tape<double>&, const Vs& v) { return squeeze2(v[0]); }},
      {"unsqueeze2", [](Tape<double>&, const Vs& v) { return unsqueeze2(reshape(v[0], Shape{2, 12, 1, 1})); }},
      {"gaussian_logpdf", [](Tape<double>&, const Vs& v) { return gaussian_logpdf(v[0], 0.2, 1.3); }},
      {"gaussian_logpdf_per_sample",
       [](Tape<double>&, const Vs& v) { return gaussian_logpdf_per_sample(v[0], -0.1, 0.8); }},
      {"slice_features",
       [](Tape<double>&, const Vs& v) { return slice_features(reshape(v[0], Shape{2, 12}), 4, Shape{2, 2, 2}); }},
  };
  for (const auto& [name, op] : ops) EXPECT_LE(op_gradient_error(op, {x}), kGradTol) << name;
  auto log_op = [](Tape<double>&, const Vs& v) { return log(v[0]); };
  EXPECT_LE(op_gradient_error(log_op, {pos}), kGradTol) << "log";
}

TEST(Gradients, EveryBinaryOpMatchesFiniteDifferences) {
  const auto a = uniform_tensor<double>({2, 3, 2, 2}, 12, -2.0, 2.0);
  const auto b = uniform_tensor<double>({2, 3, 2, 2}, 13, 0.5, 2.0);
  const auto one = uniform_tensor<double>({1}, 14, 0.5, 2.0);
  const auto per_channel = uniform_tensor<double>({3}, 15, 0.5, 2.0);
  const std::vector<std::pair<const char*, OpFn>> pairs = {
      {"add", [](Tape<double>&, const Vs& v) { return add(v[0], v[1]); }},
      {"sub", [](Tape<double>&, const Vs& v) { return sub(v[0], v[1]); }},
      {"mul", [](Tape<double>&, const Vs& v) { return mul(v[0], v[1]); }},
      {"div", [](Tape<double>&, const Vs& v) { return div(v[0], v[1]); }},
      {"concat_channels", [](Tape<double>&, const Vs& v) { return concat_channels(v[0], v[1]); }},
      {"flatten_samples", [](Tape<double>&, const Vs& v) { return flatten_samples<double>(v); }},
  };
  for (const auto& [name, op] : pairs) EXPECT_LE(op_gradient_error(op, {a, b}), kGradTol) << name;
  const std::vector<std::pair<const char*, OpFn>> broadcast = {
      {"add", [](Tape<double>&, const Vs& v) { return add(v[0], v[1]); }},
      {"sub", [](Tape<double>&, const Vs& v) { return sub(v[1], v[0]); }},
      {"mul", [](Tape<double>&, const Vs& v) { return mul(v[0], v[1]); }},
      {"div", [](Tape<double>&, const Vs& v) { return div(v[0], v[1]); }},
  };
  for (const auto& [name, op] : broadcast) EXPECT_LE(op_gradient_error(op, {a, one}), kGradTol) << name << " broadcast";
  const std::vector<std::pair<const char*, OpFn>> channel = {
      {"channel_scale", [](Tape<double>&, const Vs& v) { return channel_scale(v[0], v[1]); }},
      {"channel_shift", [](Tape<double>&, const Vs& v) { return channel_shift(v[0], v[1]); }},
  };
  for (const auto& [name, op] : channel) EXPECT_LE(op_gradient_error(op, {a, per_channel}), kGradTol) << name;
}

TEST(Gradients, MatrixOpsMatchFiniteDifferences) {
  const auto x = uniform_tensor<double>({2, 3, 2, 2}, 16);
  Tensor<double> m = uniform_tensor<double>({3, 3}, 17, -0.3, 0.3);
  for (std::size_t i = 0; i < 3; ++i) m[i * 3 + i] += 1.5;
  auto mm = [](Tape<double>&, const Vs& v) { return channel_matmul(v[0], v[1]); };
  EXPECT_LE(op_gradient_error(mm, {x, m}), kGradTol) << "channel_matmul";
  auto inv = [](Tape<double>&, const Vs& v) { return matrix_inverse(v[0]); };
  EXPECT_LE(op_gradient_error(inv, {m}), kGradTol) << "matrix_inverse";
  auto lad = [](Tape<double>&, const Vs& v) { return log_abs_det(v[0]); };
  EXPECT_LE(op_gradient_error(lad, {m}), kGradTol) << "log_abs_det";
}

TEST(Gradients, LinearMapUsesTheAdjoint) {
  const auto A = uniform_tensor<double>({3, 4}, 18);
  auto fwd = [A](const Tensor<double>& x) {
    Tensor<double> y(Shape{3});
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 4; ++c) y[r] += A[r * 4 + c] * x[c];
    return y;
  };
  auto adj = [A](const Tensor<double>& g) {
    Tensor<double> x(Shape{4});
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 4; ++c) x[c] += A[r * 4 + c] * g[r];
    return x;
  };
  auto op = [&](Tape<double>&, const Vs& v) { return linear_map<double>(v[0], fwd, adj); };
  EXPECT_LE(op_gradient_error(op, {uniform_tensor<double>({4}, 19)}), kGradTol);
}

TEST(Gradients, FanOutAccumulatesAdditively) {
  const auto x = uniform_tensor<double>({5}, 20);
  Tape<double> t1;
  V a = t1.variable(x);
  t1.backward(sum(mul(sigmoid(a), a)));
  const Tensor<double> g1 = t1.grad(a);
  Tape<double> t2;
  V b = t2.variable(x);
  V f = mul(sigmoid(b), b);
  t2.backward(sum(add(f, f)));
  const Tensor<double> g2 = t2.grad(b);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(g2[i], 2.0 * g1[i]);
}

TEST(GaussianLogpdf, StandardNormalValues) {
  Tape<double> tape;
  EXPECT_NEAR(gaussian_logpdf(tape.constant(vec({0})), 0.0, 1.0).value().item(), -0.9189385, 1e-7);
  EXPECT_NEAR(gaussian_logpdf(tape.constant(vec({0, 0})), 0.0, 1.0).value().item(), -1.8378771, 1e-7);
  EXPECT_NEAR(gaussian_logpdf(tape.constant(vec({1})), 0.0, 1.0).value().item(), -1.4189385, 1e-7);
  EXPECT_THROW(gaussian_logpdf(tape.constant(vec({0})), 0.0, 0.0), DomainError);
  EXPECT_THROW(gaussian_logpdf(tape.constant(vec({0})), 0.0, -1.0), DomainError);
}

TEST(Backward, ScalarExamples) {
  Tape<double> tape;
  V x = tape.variable(vec({3}));
  tape.backward(sum(square(x)));
  EXPECT_DOUBLE_EQ(tape.grad(x)[0], 6.0);

  Tape<double> t2;
  V y = t2.variable(vec({0}));
  t2.backward(sum(sigmoid(y)));
  EXPECT_DOUBLE_EQ(t2.grad(y)[0], 0.25);
}

TEST(Backward, RejectsNonScalarOutput) {
  Tape<double> tape;
  V x = tape.variable(vec({1, 2}));
  EXPECT_THROW(tape.backward(square(x)), Error);
}

TEST(Backward, UnreachedTargetsGetZeroGradient) {
  Tape<double> tape;
  V x = tape.variable(vec({1, 2}));
  V unused = tape.variable(vec({4, 5, 6}));
  const Vs targets{x, unused};
  const auto grads = tape.gradients(sum(square(x)), targets);
  ASSERT_EQ(grads.size(), 2u);
  EXPECT_EQ(grads[1], Tensor<double>(Shape{3}));
  EXPECT_DOUBLE_EQ(grads[0][1], 4.0);
}

TEST(Backward, ParameterGradientsAccumulateIntoParameter) {
  Parameter<double> p{"w", vec({2, -1}), {}};
  p.zero_grad();
  Tape<double> tape;
  tape.backward(sum(square(tape.parameter(p))));
  EXPECT_DOUBLE_EQ(p.grad[0], 4.0);
  EXPECT_DOUBLE_EQ(p.grad[1], -2.0);

  Parameter<double> q{"v", vec({1}), {}};
  q.zero_grad();
  Tape<double> frozen;
  frozen.set_track_parameters(false);
  frozen.backward(sum(square(frozen.parameter(q))));
  EXPECT_DOUBLE_EQ(q.grad[0], 0.0);
}

TEST(Backward, ReplayIsBitIdentical) {
  const auto x = normal_tensor<double>({1, 2, 4, 4}, 21);
  const auto w = normal_tensor<double>({2, 2, 3, 3}, 22);
  auto run = [&] {
    Tape<double> tape;
    V xv = tape.variable(x);
    V out = sum(sigmoid(conv2d(xv, tape.constant(w), tape.constant(Tensor<double>(Shape{2})), 1)));
    tape.backward(out);
    return std::make_pair(out.value(), tape.grad(xv));
  };
  EXPECT_EQ(run(), run());
}

TEST(FiniteDiff, ExactOnQuadraticsAndLinear) {
  const auto g = finite_diff_grad<double>([](const Tensor<double>& x) { return x[0] * x[0]; }, vec({3}), 1e-5);
  EXPECT_NEAR(g[0], 6.0, 1e-8);
  const auto ones = finite_diff_grad<double>(
      [](const Tensor<double>& x) {
        double s = 0;
        for (std::size_t i = 0; i < x.size(); ++i) s += x[i];
        return s;
      },
      uniform_tensor<double>({7}, 23), 1e-5);
  for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(ones[i], 1.0, 1e-9);
  EXPECT_THROW(finite_diff_grad<double>([](const Tensor<double>&) { return 0.0; }, vec({1}), 0.0), DomainError);
}

TEST(MatrixInverse, RejectsSingularMatrix) {
  Tape<double> tape;
  EXPECT_THROW(matrix_inverse(tape.constant(Tensor<double>(Shape{2, 2}, 1.0))), DomainError);
}

TEST(Squeeze, BlockOrderAndRoundTrip) {
  Tape<double> tape;
  Tensor<double> x(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  V s = squeeze2(tape.constant(x));
  ASSERT_EQ(s.shape(), (Shape{1, 4, 1, 1}));
  EXPECT_EQ(s.value(), Tensor<double>(Shape{1, 4, 1, 1}, std::vector<double>{1, 2, 3, 4}));
  const auto big = normal_tensor<double>({2, 3, 4, 6}, 24);
  EXPECT_EQ(unsqueeze2(squeeze2(tape.constant(big))).value(), big);
  EXPECT_THROW(squeeze2(tape.constant(Tensor<double>(Shape{1, 1, 3, 2}))), ShapeError);
}
