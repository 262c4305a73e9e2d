#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "frsp/flops.hpp"
#include "frsp/ops.hpp"
#include "frsp/tensor.hpp"
#include "test_util.hpp"

using namespace frsp;
using frsp::testing::max_abs_diff;
using frsp::testing::naive_conv;
using frsp::testing::random_tensor;

TEST(Tensor, ShapeAndAccess) {
  Tensor t({2, 3, 4, 5}, 1.5f);
  EXPECT_EQ(t.size(), 120u);
  EXPECT_EQ(t.rank(), 4u);
  t.at(1, 2, 3, 4) = 7.0f;
  EXPECT_EQ(t[119], 7.0f);
  EXPECT_THROW(t.reshape({7, 7}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>(3)), ShapeError);
  EXPECT_THROW(t.dim(4), ShapeError);
}

TEST(Tensor, EraseAlong) {
  const Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const std::size_t drop[] = {1};
  const Tensor e = erase_along(t, 1, drop);
  EXPECT_EQ(e, Tensor::from({2, 2}, {1, 3, 4, 6}));
  const std::size_t dup[] = {0, 0};
  EXPECT_THROW(erase_along(t, 1, dup), ShapeError);
  const std::size_t out[] = {3};
  EXPECT_THROW(erase_along(t, 1, out), ShapeError);
}

TEST(Tensor, FiniteCheck) {
  Tensor t({4}, 1.0f);
  EXPECT_TRUE(t.all_finite());
  t[2] = std::nanf("");
  EXPECT_FALSE(t.all_finite());
  t[2] = -INFINITY;
  EXPECT_FALSE(t.all_finite());
  EXPECT_THROW(require_finite(t, "x"), NumericError);
  t[2] = 3e38f;
  EXPECT_TRUE(t.all_finite());
}

struct ConvCase {
  std::size_t n, cin, h, w, cout, k, stride, pad;
};

class ConvOracle : public ::testing::TestWithParam<ConvCase> {};

TEST_P(ConvOracle, ForwardMatchesDirectLoops) {
  const ConvCase c = GetParam();
  std::mt19937_64 rng(c.cin * 131 + c.k * 7 + c.stride);
  const Tensor x = random_tensor({c.n, c.cin, c.h, c.w}, rng);
  const Tensor w = random_tensor({c.cout, c.cin, c.k, c.k}, rng);
  const Tensor b = random_tensor({c.cout}, rng);
  const Tensor y = ops::conv2d_forward(x, w, &b, {c.stride, c.pad});
  const Tensor ref = naive_conv(x, w, &b, c.stride, c.pad);
  ASSERT_EQ(y.shape(), ref.shape());
  EXPECT_LT(max_abs_diff(y, ref), 1e-4);
}

// d<sum(G * conv(x))>/dx and /dW checked against central differences.
TEST_P(ConvOracle, BackwardMatchesFiniteDifferences) {
  const ConvCase c = GetParam();
  std::mt19937_64 rng(c.h * 17 + c.cout);
  Tensor x = random_tensor({c.n, c.cin, c.h, c.w}, rng);
  Tensor w = random_tensor({c.cout, c.cin, c.k, c.k}, rng);
  const Tensor y = naive_conv(x, w, nullptr, c.stride, c.pad);
  const Tensor g = random_tensor(y.shape(), rng);
  const ops::ConvGrads grads = ops::conv2d_backward(x, w, true, g, {c.stride, c.pad});
  auto objective = [&](const Tensor& xx, const Tensor& ww) {
    const Tensor yy = naive_conv(xx, ww, nullptr, c.stride, c.pad);
    double s = 0.0;
    for (std::size_t i = 0; i < yy.size(); ++i) s += double(yy[i]) * g[i];
    return s;
  };
  const float h = 1e-2f;
  std::uniform_int_distribution<std::size_t> px(0, x.size() - 1), pw(0, w.size() - 1);
  for (int t = 0; t < 12; ++t) {
    const std::size_t i = px(rng);
    const float keep = x[i];
    x[i] = keep + h;
    const double up = objective(x, w);
    x[i] = keep - h;
    const double down = objective(x, w);
    x[i] = keep;
    EXPECT_NEAR(grads.input[i], (up - down) / (2 * h), 2e-3);
  }
  for (int t = 0; t < 12; ++t) {
    const std::size_t i = pw(rng);
    const float keep = w[i];
    w[i] = keep + h;
    const double up = objective(x, w);
    w[i] = keep - h;
    const double down = objective(x, w);
    w[i] = keep;
    EXPECT_NEAR(grads.weight[i], (up - down) / (2 * h), 2e-3);
  }
  // Bias gradient is the per-channel sum of g.
  for (std::size_t o = 0; o < c.cout; ++o) {
    double s = 0.0;
    for (std::size_t b = 0; b < y.dim(0); ++b)
      for (std::size_t i = 0; i < y.dim(2) * y.dim(3); ++i)
        s += g[(b * c.cout + o) * y.dim(2) * y.dim(3) + i];
    EXPECT_NEAR(grads.bias[o], s, 1e-3);
  }
  const Tensor dx = ops::conv2d_backward_input(g, w, x.shape(), {c.stride, c.pad});
  EXPECT_LT(max_abs_diff(dx, grads.input), 1e-5);
}

INSTANTIATE_TEST_SUITE_P(
    Geometries, ConvOracle,
    ::testing::Values(ConvCase{2, 3, 8, 8, 4, 3, 1, 1}, ConvCase{3, 2, 7, 5, 3, 3, 1, 1},
                      ConvCase{2, 4, 8, 8, 5, 3, 2, 1}, ConvCase{2, 3, 6, 6, 4, 1, 1, 0},
                      ConvCase{2, 3, 6, 6, 4, 1, 2, 0}, ConvCase{1, 2, 9, 9, 2, 5, 1, 2},
                      ConvCase{2, 2, 5, 5, 3, 3, 1, 0}, ConvCase{70, 3, 4, 4, 2, 3, 1, 1}));

TEST(Ops, ConvBiasShapeRejected) {
  const Tensor x({1, 2, 4, 4}), w({3, 2, 3, 3}), b({2});
  EXPECT_THROW(ops::conv2d_forward(x, w, &b, {1, 1}), ShapeError);
  const Tensor bad({1, 3, 4, 4});
  EXPECT_THROW(ops::conv2d_forward(bad, w, nullptr, {1, 1}), ShapeError);
}

TEST(Ops, LinearForwardBackward) {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({4, 2, 3, 1}, rng);
  const Tensor w = random_tensor({5, 6}, rng);
  const Tensor b = random_tensor({5}, rng);
  const Tensor y = ops::linear_forward(x, w, &b);
  Tensor flat = x;
  flat.reshape({4, 6});
  Tensor ref = frsp::testing::naive_linear(flat, w);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t o = 0; o < 5; ++o) ref[i * 5 + o] += b[o];
  EXPECT_LT(max_abs_diff(y, ref), 1e-5);

  const Tensor g = random_tensor({4, 5}, rng);
  const ops::LinearGrads lg = ops::linear_backward(x, w, true, g);
  EXPECT_EQ(lg.input.shape(), x.shape());
  for (std::size_t o = 0; o < 5; ++o)
    for (std::size_t i = 0; i < 6; ++i) {
      double s = 0.0;
      for (std::size_t n = 0; n < 4; ++n) s += double(g[n * 5 + o]) * flat[n * 6 + i];
      EXPECT_NEAR(lg.weight[o * 6 + i], s, 1e-5);
    }
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t i = 0; i < 6; ++i) {
      double s = 0.0;
      for (std::size_t o = 0; o < 5; ++o) s += double(g[n * 5 + o]) * w[o * 6 + i];
      EXPECT_NEAR(lg.input[n * 6 + i], s, 1e-5);
    }
}

TEST(Ops, ReluAndMaxPool) {
  const Tensor x = Tensor::from({1, 1, 2, 4}, {1, -2, 3, 4, -5, 6, 0, -1});
  const Tensor r = ops::relu_forward(x);
  EXPECT_EQ(r, Tensor::from({1, 1, 2, 4}, {1, 0, 3, 4, 0, 6, 0, 0}));
  const Tensor g = Tensor::from({1, 1, 2, 4}, {1, 1, 1, 1, 1, 1, 1, 1});
  EXPECT_EQ(ops::relu_backward(r, g), Tensor::from({1, 1, 2, 4}, {1, 0, 1, 1, 0, 1, 0, 0}));

  const ops::PoolResult p = ops::maxpool2_forward(x);
  EXPECT_EQ(p.output, Tensor::from({1, 1, 1, 2}, {6, 4}));
  EXPECT_EQ(p.argmax, (std::vector<std::uint32_t>{5, 3}));
  const Tensor back = ops::maxpool2_backward(Tensor::from({1, 1, 1, 2}, {2, 3}), p.argmax,
                                             x.shape());
  EXPECT_EQ(back, Tensor::from({1, 1, 2, 4}, {0, 0, 0, 3, 0, 2, 0, 0}));
}

TEST(Ops, GlobalAvgPool) {
  const Tensor x = Tensor::from({1, 2, 1, 2}, {1, 3, -2, 6});
  EXPECT_EQ(ops::global_avgpool_forward(x), Tensor::from({1, 2, 1, 1}, {2, 2}));
  const Tensor g = ops::global_avgpool_backward(Tensor::from({1, 2, 1, 1}, {4, -2}), x.shape());
  EXPECT_EQ(g, Tensor::from({1, 2, 1, 2}, {2, 2, -1, -1}));
}

TEST(Ops, SoftmaxXent) {
  const Tensor logits = Tensor::from({2, 3}, {1, 2, 3, 0, 0, 0});
  const int labels[] = {2, 0};
  const ops::XentResult r = ops::softmax_xent(logits, labels);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  const double expect = (-(3.0 - std::log(z)) + std::log(3.0)) / 2.0;
  EXPECT_NEAR(r.loss, expect, 1e-6);
  EXPECT_NEAR(r.grad[2], (std::exp(3.0) / z - 1.0) / 2.0, 1e-6);
  EXPECT_NEAR(r.grad[3], (1.0 / 3.0 - 1.0) / 2.0, 1e-6);
  const int bad[] = {3, 0};
  EXPECT_THROW(ops::softmax_xent(logits, bad), std::out_of_range);
}

TEST(Ops, BatchNormTrainStatsAndGradient) {
  std::mt19937_64 rng(11);
  Tensor x = random_tensor({4, 3, 3, 3}, rng, -2.0f, 3.0f);
  const Tensor gamma = random_tensor({3}, rng, 0.5f, 1.5f);
  const Tensor beta = random_tensor({3}, rng);
  Tensor rm({3}), rv({3}, 1.0f);
  ops::BatchNormCache cache;
  const Tensor y = ops::batchnorm_forward_train(x, gamma, beta, rm, rv, &cache);
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0.0, sq = 0.0, ymean = 0.0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 9; ++i) {
        mean += x[(b * 3 + c) * 9 + i];
        ymean += y[(b * 3 + c) * 9 + i];
      }
    mean /= 36.0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 9; ++i) sq += std::pow(x[(b * 3 + c) * 9 + i] - mean, 2);
    EXPECT_NEAR(ymean / 36.0, beta[c], 1e-5);
    EXPECT_NEAR(rm[c], 0.1 * mean, 1e-5);
    EXPECT_NEAR(rv[c], 0.9 + 0.1 * sq / 35.0, 1e-5);
  }

  const Tensor g = random_tensor(y.shape(), rng);
  const ops::BatchNormGrads bg = ops::batchnorm_backward(g, gamma, cache);
  auto objective = [&](const Tensor& xx) {
    Tensor m({3}), v({3}, 1.0f);
    const Tensor yy = ops::batchnorm_forward_train(xx, gamma, beta, m, v, nullptr);
    double s = 0.0;
    for (std::size_t i = 0; i < yy.size(); ++i) s += double(yy[i]) * g[i];
    return s;
  };
  const float h = 1e-2f;
  for (std::size_t i = 0; i < x.size(); i += 7) {
    const float keep = x[i];
    x[i] = keep + h;
    const double up = objective(x);
    x[i] = keep - h;
    const double down = objective(x);
    x[i] = keep;
    EXPECT_NEAR(bg.input[i], (up - down) / (2 * h), 5e-3);
  }
}

TEST(Ops, BatchNormEvalUsesRunningStats) {
  const Tensor x = Tensor::from({1, 1, 1, 2}, {2, 4});
  const Tensor gamma = Tensor::from({1}, {2}), beta = Tensor::from({1}, {1});
  const Tensor rm = Tensor::from({1}, {1}), rv = Tensor::from({1}, {4});
  const Tensor y = ops::batchnorm_forward_eval(x, gamma, beta, rm, rv);
  const float s = 2.0f / std::sqrt(4.0f + ops::kBnEps);
  EXPECT_NEAR(y[0], (2 - 1) * s + 1, 1e-6);
  EXPECT_NEAR(y[1], (4 - 1) * s + 1, 1e-6);
}

TEST(Ops, FlopCounterConventions) {
  std::mt19937_64 rng(2);
  const Tensor x = random_tensor({2, 3, 8, 8}, rng);
  const Tensor w = random_tensor({4, 3, 3, 3}, rng);
  FlopScope conv;
  ops::conv2d_forward(x, w, nullptr, {1, 1});
  EXPECT_EQ(conv.elapsed(), 2u * 3 * 3 * 3 * 4 * 8 * 8);
  FlopScope relu;
  ops::relu_forward(x);
  EXPECT_EQ(relu.elapsed(), x.size());
  FlopScope lin;
  ops::linear_forward(x, random_tensor({5, 192}, rng), nullptr);
  EXPECT_EQ(lin.elapsed(), 2u * 192 * 5);
}
