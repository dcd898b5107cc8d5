#include "opnet/adam.hpp"
#include "opnet/layers.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace opnet;

namespace {

Tensor<double> iota(Shape shape, bool grad = false) {
  const Index n = numel(shape);
  return Tensor<double>(std::move(shape), Buffer<double>::LinSpaced(n, 0, static_cast<double>(n - 1)), grad);
}

}  // namespace

TEST(Tensor, RejectsBadShapes) {
  EXPECT_THROW(Tensor<double>({2, 3}, Buffer<double>::Zero(5)), ShapeError);
  EXPECT_THROW(Tensor<double>::zeros({2, 0}), ShapeError);
  EXPECT_THROW(reshape(iota({2, 3}), {4, 2}), ShapeError);
  EXPECT_THROW(add(iota({2, 3}), iota({3, 2})), ShapeError);
  EXPECT_THROW(Tensor<double>::zeros({2}).item(), ShapeError);
}

TEST(Tensor, PermuteMatchesIndexArithmetic) {
  const auto x = iota({2, 3, 4});
  const auto y = permute(x, {2, 0, 1});
  ASSERT_EQ(y.shape(), (Shape{4, 2, 3}));
  for (Index a = 0; a < 2; ++a)
    for (Index b = 0; b < 3; ++b)
      for (Index c = 0; c < 4; ++c) EXPECT_EQ(y[(c * 2 + a) * 3 + b], x[(a * 3 + b) * 4 + c]);
}

TEST(Tensor, ConcatSliceSelectStack) {
  const auto a = iota({2, 2}), b = iota({2, 3});
  const auto c = concat<double>({a, b}, 1);
  ASSERT_EQ(c.shape(), (Shape{2, 5}));
  EXPECT_EQ(c[0], 0);
  EXPECT_EQ(c[2], 0);
  EXPECT_EQ(c[5], 2);
  EXPECT_EQ(c[9], 5);
  const auto s = slice(c, 1, 2, 3);
  EXPECT_EQ(s.shape(), (Shape{2, 3}));
  EXPECT_TRUE((s.data() == b.data()).all());
  const auto r = select(iota({3, 2}), 0, 2);
  EXPECT_EQ(r.shape(), (Shape{2}));
  EXPECT_EQ(r[0], 4);
  const auto st = stack<double>({a, a}, 0);
  EXPECT_EQ(st.shape(), (Shape{2, 2, 2}));
  EXPECT_THROW(slice(c, 1, 4, 2), ShapeError);
  EXPECT_THROW(concat<double>({a, iota({3, 2})}, 1), ShapeError);
}

TEST(Tensor, AdaptiveAvgPoolWindows) {
  // length 5 -> 3: windows [0,2), [1,4), [3,5)
  const auto x = reshape(iota({5}), {1, 5, 1});
  const auto y = adaptive_avgpool(x, 1, 3);
  EXPECT_DOUBLE_EQ(y[0], 0.5);
  EXPECT_DOUBLE_EQ(y[1], 2.0);
  EXPECT_DOUBLE_EQ(y[2], 3.5);
  // upsampling repeats
  const auto z = adaptive_avgpool(reshape(iota({2}), {1, 2, 1}), 1, 4);
  EXPECT_EQ(z[0], 0);
  EXPECT_EQ(z[1], 0);
  EXPECT_EQ(z[2], 1);
  EXPECT_EQ(z[3], 1);
}

TEST(Tensor, MseLossValue) {
  const Tensor<double> p({2, 2}, Buffer<double>::LinSpaced(4, 1, 4));
  const auto t = Tensor<double>::zeros({2, 2});
  EXPECT_DOUBLE_EQ(mse_loss(p, t).item(), (1 + 4 + 9 + 16) / 4.0);
}

TEST(Tensor, GradientsAccumulateOverReuse) {
  auto x = iota({3}, true);
  backward(sum(add(mul(x, x), x)));  // d/dx (x^2 + x) = 2x + 1
  for (Index i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * i + 1);
  backward(sum(x));
  for (Index i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * i + 2);
}

TEST(Tensor, NoGradGuardRecordsNothing) {
  auto x = iota({3}, true);
  Tensor<double> y;
  {
    NoGradGuard guard;
    y = mul(x, x);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(GradMode::enabled());
  EXPECT_TRUE(mul(x, x).requires_grad());
}

TEST(Tensor, BackwardNeedsScalar) { EXPECT_THROW(backward(iota({2}, true)), ShapeError); }

TEST(Tensor, LinearOnSequences) {
  std::mt19937_64 rng(1);
  Layer<double> fc(LinearSpec{3, 2}, rng);
  const auto x = iota({2, 4, 3});
  const auto y = fc.forward(x);
  ASSERT_EQ(y.shape(), (Shape{2, 4, 2}));
  const auto& w = fc.params().find("weight")->data();
  const auto& b = fc.params().find("bias")->data();
  for (Index r = 0; r < 8; ++r)
    for (Index o = 0; o < 2; ++o) {
      double e = b[o];
      for (Index i = 0; i < 3; ++i) e += w[o * 3 + i] * x[r * 3 + i];
      EXPECT_NEAR(y[r * 2 + o], e, 1e-12);
    }
}

TEST(Tensor, Conv3dMatchesDirectSum) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd;
  // depth-spanning, planar and general geometries
  const std::vector<std::tuple<Index, std::array<Index, 3>, std::array<Index, 3>>> cases{
      {4, {3, 3, 4}, {1, 1, 0}}, {1, {3, 2, 1}, {0, 1, 0}}, {3, {2, 2, 2}, {1, 0, 1}}};
  for (const auto& [d, k, p] : cases) {
    Layer<double> conv(Conv3dSpec{2, 3, k, p}, rng);
    Tensor<double> x({2, 2, 5, 4, d}, Buffer<double>::NullaryExpr(2 * 2 * 5 * 4 * d, [&] { return nd(rng); }));
    const auto y = conv.forward(x);
    const Index To = 5 + 2 * p[0] - k[0] + 1, Fo = 4 + 2 * p[1] - k[1] + 1, Do = d + 2 * p[2] - k[2] + 1;
    ASSERT_EQ(y.shape(), (Shape{2, 3, To, Fo, Do}));
    const auto& w = conv.params().find("weight")->data();
    const auto& bias = conv.params().find("bias")->data();
    auto xin = [&](Index b, Index c, Index t, Index f, Index e) {
      if (t < 0 || t >= 5 || f < 0 || f >= 4 || e < 0 || e >= d) return 0.0;
      return x[(((b * 2 + c) * 5 + t) * 4 + f) * d + e];
    };
    for (Index b = 0; b < 2; ++b)
      for (Index o = 0; o < 3; ++o)
        for (Index t = 0; t < To; ++t)
          for (Index f = 0; f < Fo; ++f)
            for (Index e = 0; e < Do; ++e) {
              double s = bias[o];
              for (Index c = 0; c < 2; ++c)
                for (Index a = 0; a < k[0]; ++a)
                  for (Index bb = 0; bb < k[1]; ++bb)
                    for (Index q = 0; q < k[2]; ++q)
                      s += w[(((o * 2 + c) * k[0] + a) * k[1] + bb) * k[2] + q] *
                           xin(b, c, t + a - p[0], f + bb - p[1], e + q - p[2]);
              EXPECT_NEAR(y[(((b * 3 + o) * To + t) * Fo + f) * Do + e], s, 1e-10);
            }
  }
}

TEST(Tensor, MaxPoolFloorsAndPicksMaximum) {
  const auto x = reshape(iota({1 * 1 * 5 * 4}), {1, 1, 5, 4});
  const auto y = maxpool2d(x, {2, 2});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_EQ(y[0], 5);
  EXPECT_EQ(y[3], 15);
}

TEST(Tensor, BatchNormTrainingAndEval) {
  std::mt19937_64 rng(3);
  Layer<double> bn(BatchNorm2dSpec{2}, rng);
  const auto x = iota({3, 2, 2, 2});
  const auto y = bn.forward(x);
  for (Index c = 0; c < 2; ++c) {
    double m = 0, v = 0;
    for (Index b = 0; b < 3; ++b)
      for (Index i = 0; i < 4; ++i) m += y[(b * 2 + c) * 4 + i];
    m /= 12;
    for (Index b = 0; b < 3; ++b)
      for (Index i = 0; i < 4; ++i) v += std::pow(y[(b * 2 + c) * 4 + i] - m, 2);
    EXPECT_NEAR(m, 0, 1e-12);
    EXPECT_NEAR(v / 12, 1, 1e-3);
  }
  // running stats moved towards the batch statistics by the momentum
  const auto& rm = bn.params().find("running_mean")->data();
  EXPECT_NEAR(rm[0], 0.1 * (0 + 1 + 2 + 3 + 8 + 9 + 10 + 11 + 16 + 17 + 18 + 19) / 12.0, 1e-12);
  bn.set_training(false);
  const auto z = bn.forward(x);
  const auto& rv = bn.params().find("running_var")->data();
  EXPECT_NEAR(z[0], (0 - rm[0]) / std::sqrt(rv[0] + 1e-5), 1e-12);
}

TEST(Adam, MatchesHandComputedSteps) {
  auto p = Tensor<double>({2}, Buffer<double>::LinSpaced(2, 1, -2), true);
  AdamState<double> st(0.1, 0.9, 0.999);
  std::vector<Tensor<double>> ps{p};
  double m[2] = {0, 0}, v[2] = {0, 0}, x[2] = {1, -2};
  for (int step = 1; step <= 3; ++step) {
    backward(sum(mul(p, p)));  // grad 2p
    adam_step(ps, st);
    for (int i = 0; i < 2; ++i) {
      const double g = 2 * x[i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1 - std::pow(0.9, step)), vh = v[i] / (1 - std::pow(0.999, step));
      x[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
      EXPECT_NEAR(p.data()[i], x[i], 1e-12);
      EXPECT_EQ(p.grad()[i], 0.0);
    }
  }
}

TEST(Adam, Beta1ZeroIsSignedStep) {
  auto p = Tensor<double>({1}, Buffer<double>::Constant(1, 3.0), true);
  AdamState<double> st(0.01, 0.0);
  std::vector<Tensor<double>> ps{p};
  backward(sum(mul(p, p)));
  adam_step(ps, st);
  EXPECT_NEAR(p.data()[0], 3.0 - 0.01, 1e-9);
}

TEST(Adam, RejectsMissingGradientAndBadHyperparameters) {
  auto p = Tensor<double>::zeros({2}, true);
  std::vector<Tensor<double>> ps{p};
  AdamState<double> st(0.1, 0.9);
  EXPECT_THROW(adam_step(ps, st), std::runtime_error);
  EXPECT_THROW(AdamState<double>(0.1, 1.0), std::invalid_argument);
  EXPECT_THROW(AdamState<double>(-1, 0.9), std::invalid_argument);
}

TEST(Layers, ValidateRejectsNonPositiveSizes) {
  std::mt19937_64 rng(0);
  EXPECT_THROW(Layer<double>(LinearSpec{0, 3}, rng), std::invalid_argument);
  EXPECT_THROW(Layer<double>(Conv3dSpec{1, 1, {0, 1, 1}, {0, 0, 0}}, rng), std::invalid_argument);
  EXPECT_THROW(Layer<double>(BatchNorm2dSpec{2, 0.1, 0.0}, rng), std::invalid_argument);
  Layer<double> gru(GruBidirectionalSpec{3, 4}, rng);
  EXPECT_THROW(gru.forward(Tensor<double>::zeros({2, 5, 2})), ShapeError);
  EXPECT_EQ(gru.forward(Tensor<double>::zeros({2, 5, 3})).shape(), (Shape{2, 5, 8}));
}
