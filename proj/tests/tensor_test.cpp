#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "infodrop/graph.hpp"
#include "infodrop/ops.hpp"
#include "infodrop/oracles.hpp"
#include "infodrop/rng.hpp"
#include "infodrop/tensor.hpp"
#include "test_util.hpp"

using namespace infodrop;
using testutil::random_tensor;
using testutil::random_tensor_away_from_zero;

namespace {

// Runs reverse-mode once, then checks every listed parameter against central
// finite differences of the re-runnable forward.
void expect_gradcheck(const std::function<Tensor()>& make_loss,
                      const std::vector<Tensor>& params, double tol,
                      double h = 1e-4) {
  Tensor loss = make_loss();
  backward(loss);
  std::vector<std::vector<double>> autodiff;
  autodiff.reserve(params.size());
  for (const Tensor& p : params) autodiff.push_back(p.grad());
  auto eval = [&make_loss] { return make_loss().value(); };
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double err = max_gradient_error(eval, params[i], autodiff[i], h);
    EXPECT_LE(err, tol) << "parameter " << i;
  }
}

// Scalarizes an op output against one fixed random weighting so that
// finite-difference re-runs evaluate the same function. A plain sum would
// miss layout errors and cancels to ~0 through batchnorm.
std::function<Tensor()> weighted(std::function<Tensor()> make_output,
                                 Rng& wrng) {
  Tensor probe = make_output();
  Tensor w = random_tensor(probe.shape(), wrng, -1.0, 1.0);
  return [make_output = std::move(make_output), w] {
    return sum_all(mul(make_output(), w));
  };
}

}  // namespace

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

TEST(Matmul, IdentityCase) {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor y = matmul(a, eye);
  EXPECT_EQ(y.data(), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, Annihilator) {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor zero = Tensor::zeros({2, 2});
  Tensor y = matmul(a, zero);
  EXPECT_EQ(y.data(), (std::vector<double>{0, 0, 0, 0}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4,2]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  Tensor a = random_tensor({5, 7}, rng, -2.0, 2.0, true);
  Tensor b = random_tensor({7, 3}, rng, -2.0, 2.0, true);
  expect_gradcheck([&] { return sum_all(matmul(a, b)); }, {a, b}, 1e-6);
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

TEST(Conv2d, IdentityKernel) {
  Rng rng(3);
  Tensor x = random_tensor({1, 1, 3, 3}, rng, 0.0, 1.0);
  Tensor k = Tensor::from_data({1, 1, 1, 1}, {1.0});
  Tensor y = conv2d(x, k, 1, Padding::kValid);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  EXPECT_EQ(y.data(), x.data());
}

TEST(Conv2d, SamePaddingStride2Shape) {
  Tensor x = Tensor::zeros({1, 1, 4, 4});
  Tensor k = Tensor::zeros({1, 1, 3, 3});
  Tensor y = conv2d(x, k, 2, Padding::kSame);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
}

TEST(Conv2d, KernelLargerThanPaddedInput) {
  Tensor x = Tensor::zeros({1, 1, 3, 3});
  Tensor k = Tensor::zeros({1, 1, 5, 5});
  EXPECT_THROW(conv2d(x, k, 1, Padding::kValid), DimensionError);
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  Rng rng(17);
  Tensor x = random_tensor({2, 3, 8, 8}, rng, -2.0, 2.0, true);
  Tensor k = random_tensor({4, 3, 3, 3}, rng, -1.0, 1.0, true);
  Rng wrng(5);
  Tensor w = random_tensor({2, 4, 8, 8}, wrng, -1.0, 1.0);
  expect_gradcheck(
      [&] { return sum_all(mul(conv2d(x, k, 1, Padding::kSame), w)); }, {x, k},
      1e-5);
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

TEST(Elementwise, ReluDefinition) {
  Tensor x = Tensor::from_data({2}, {-1.5, 2.0});
  Tensor y = relu(x);
  EXPECT_EQ(y.data(), (std::vector<double>{0.0, 2.0}));
}

TEST(Elementwise, SoftplusClosedForm) {
  Tensor y = softplus(Tensor::scalar(0.0));
  EXPECT_NEAR(y.value(), std::log(2.0), 1e-15);
}

TEST(Elementwise, SoftplusLargeArgumentStable) {
  // High-precision value of softplus(50) is 50 + exp(-50) + O(exp(-100));
  // the correction is ~1.9e-22, far below 1e-12.
  Tensor y = softplus(Tensor::scalar(50.0));
  EXPECT_NEAR(y.value(), 50.0, 1e-12);
  Tensor yn = softplus(Tensor::scalar(-745.0));
  EXPECT_TRUE(std::isfinite(yn.value()));
  EXPECT_GE(yn.value(), 0.0);
}

TEST(Elementwise, LogDomainError) {
  EXPECT_THROW(log_t(Tensor::from_data({2}, {1.0, -0.5})), DomainError);
  EXPECT_THROW(log_t(Tensor::from_data({1}, {0.0})), DomainError);
}

TEST(Elementwise, BinaryShapeMismatch) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 2});
  EXPECT_THROW(add(a, b), DimensionError);
  EXPECT_THROW(mul(a, b), DimensionError);
}

TEST(Elementwise, NonFiniteIsHardError) {
  EXPECT_THROW(exp_t(Tensor::scalar(1000.0)), NumericError);
}

// ---------------------------------------------------------------------------
// batchnorm
// ---------------------------------------------------------------------------

TEST(Batchnorm, ConstantChannelHitsVarianceFloor) {
  Tensor x = Tensor::full({4, 2}, 3.25);
  Tensor gamma = Tensor::from_data({2}, {1.5, 2.0});
  Tensor beta = Tensor::from_data({2}, {0.25, -1.0});
  std::vector<double> rm(2, 0.0), rv(2, 1.0);
  Tensor y = batchnorm(x, gamma, beta, rm, rv, true);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_DOUBLE_EQ(y.data()[i * 2 + 0], 0.25);
    EXPECT_DOUBLE_EQ(y.data()[i * 2 + 1], -1.0);
  }
}

TEST(Batchnorm, NormalizesToZeroMeanUnitVariance) {
  Rng rng(23);
  const std::size_t b = 64, c = 3;
  std::vector<double> data(b * c);
  for (double& v : data) v = 0.5 + 1.7 * rng.normal();
  Tensor x = Tensor::from_data({b, c}, data);
  Tensor gamma = Tensor::full({c}, 1.0);
  Tensor beta = Tensor::zeros({c});
  std::vector<double> rm(c, 0.0), rv(c, 1.0);
  Tensor y = batchnorm(x, gamma, beta, rm, rv, true);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean = 0.0;
    for (std::size_t i = 0; i < b; ++i) mean += y.data()[i * c + ch];
    mean /= b;
    double var = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      const double d = y.data()[i * c + ch] - mean;
      var += d * d;
    }
    var /= b;
    EXPECT_NEAR(mean, 0.0, 1e-6);
    EXPECT_NEAR(var, 1.0, 1e-6);
  }
}

TEST(Batchnorm, DegenerateBatchRejected) {
  Tensor x = Tensor::zeros({1, 4});
  Tensor gamma = Tensor::full({4}, 1.0);
  Tensor beta = Tensor::zeros({4});
  std::vector<double> rm(4, 0.0), rv(4, 1.0);
  EXPECT_THROW(batchnorm(x, gamma, beta, rm, rv, true), DomainError);
}

TEST(Batchnorm, UpdatesRunningStatistics) {
  Tensor x = Tensor::from_data({2, 1}, {1.0, 3.0});  // mean 2, biased var 1
  Tensor gamma = Tensor::full({1}, 1.0);
  Tensor beta = Tensor::zeros({1});
  std::vector<double> rm(1, 0.0), rv(1, 1.0);
  batchnorm(x, gamma, beta, rm, rv, true, 0.9);
  EXPECT_NEAR(rm[0], 0.2, 1e-12);
  EXPECT_NEAR(rv[0], 0.9 * 1.0 + 0.1 * 1.0, 1e-12);
}

TEST(Batchnorm, GradientMatchesFiniteDifferences) {
  Rng rng(31);
  Tensor x = random_tensor({6, 2, 3, 3}, rng, -2.0, 2.0, true);
  Tensor gamma = random_tensor({2}, rng, 0.5, 1.5, true);
  Tensor beta = random_tensor({2}, rng, -0.5, 0.5, true);
  Rng wrng(6);
  Tensor w = random_tensor({6, 2, 3, 3}, wrng, -1.0, 1.0);
  auto make_loss = [&] {
    std::vector<double> rm(2, 0.0), rv(2, 1.0);
    return sum_all(mul(batchnorm(x, gamma, beta, rm, rv, true), w));
  };
  expect_gradcheck(make_loss, {x, gamma, beta}, 1e-4);
}

// ---------------------------------------------------------------------------
// softmax cross-entropy
// ---------------------------------------------------------------------------

TEST(SoftmaxCrossEntropy, UniformLogits) {
  Tensor logits = Tensor::zeros({3, 10});
  Tensor loss = softmax_cross_entropy(logits, {0, 5, 9});
  EXPECT_NEAR(loss.value(), std::log(10.0), 1e-12);
}

TEST(SoftmaxCrossEntropy, SaturatedTrueClass) {
  Tensor logits = Tensor::zeros({1, 5});
  logits.data()[2] = 1000.0;
  Tensor loss = softmax_cross_entropy(logits, {2});
  EXPECT_NEAR(loss.value(), 0.0, 1e-12);
}

TEST(SoftmaxCrossEntropy, GradientIsSoftmaxMinusOnehot) {
  Rng rng(41);
  const std::size_t b = 4, k = 5;
  Tensor logits = random_tensor({b, k}, rng, -2.0, 2.0, true);
  const std::vector<int> labels{1, 0, 4, 2};
  Tensor loss = softmax_cross_entropy(logits, labels);
  backward(loss);
  // Independent softmax evaluation; the op's gradient must equal
  // (softmax - onehot) scaled by the 1/b of the mean reduction.
  for (std::size_t i = 0; i < b; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(logits.data()[i * k + j]);
    for (std::size_t j = 0; j < k; ++j) {
      double expected = std::exp(logits.data()[i * k + j]) / z;
      if (j == static_cast<std::size_t>(labels[i])) expected -= 1.0;
      expected /= static_cast<double>(b);
      EXPECT_NEAR(logits.grad()[i * k + j], expected, 1e-10);
    }
  }
}

TEST(SoftmaxCrossEntropy, LabelOutOfRange) {
  Tensor logits = Tensor::zeros({2, 3});
  EXPECT_THROW(softmax_cross_entropy(logits, {0, 3}), IndexError);
  EXPECT_THROW(softmax_cross_entropy(logits, {-1, 0}), IndexError);
}

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

TEST(SampleNormal, DeterministicGivenSeed) {
  Rng a(42), b(42);
  Tensor ta = sample_standard_normal({5, 7}, a);
  Tensor tb = sample_standard_normal({5, 7}, b);
  EXPECT_EQ(ta.data(), tb.data());
  EXPECT_FALSE(ta.requires_grad());
}

TEST(SampleNormal, LawOfLargeNumbers) {
  Rng rng(7);
  Tensor t = sample_standard_normal({1000000}, rng);
  double mean = 0.0;
  for (double v : t.data()) mean += v;
  mean /= t.numel();
  double var = 0.0;
  for (double v : t.data()) var += (v - mean) * (v - mean);
  var /= t.numel();
  EXPECT_NEAR(mean, 0.0, 0.01);
  EXPECT_NEAR(var, 1.0, 0.01);
}

TEST(SampleNormal, EmptyShape) {
  Rng rng(1);
  Tensor t = sample_standard_normal({0}, rng);
  EXPECT_EQ(t.numel(), 0u);
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

TEST(Backward, QuadraticGradient) {
  Tensor x = Tensor::from_data({3}, {1.0, -2.0, 0.5}, true);
  Tensor loss = sum_all(mul(x, x));
  backward(loss);
  EXPECT_NEAR(x.grad()[0], 2.0, 1e-15);
  EXPECT_NEAR(x.grad()[1], -4.0, 1e-15);
  EXPECT_NEAR(x.grad()[2], 1.0, 1e-15);
}

TEST(Backward, UnusedParameterGetsZeroGradient) {
  Graph g;
  Tensor used = g.add_parameter("used", Tensor::from_data({2}, {1.0, 2.0}));
  Tensor unused = g.add_parameter("unused", Tensor::zeros({3, 2}));
  Tensor loss = sum_all(mul(used, used));
  auto grads = g.backward_gradients(loss);
  EXPECT_EQ(grads.at("unused").shape(), (Shape{3, 2}));
  for (double v : grads.at("unused").data()) EXPECT_EQ(v, 0.0);
  EXPECT_NEAR(grads.at("used").data()[0], 2.0, 1e-15);
}

TEST(Backward, NonScalarLossRejected) {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tensor y = mul(x, x);
  EXPECT_THROW(backward(y), ContractError);
}

TEST(Backward, RepeatedBackwardYieldsIdenticalGradients) {
  Rng rng(9);
  Tensor x = random_tensor({4, 4}, rng, -2.0, 2.0, true);
  Tensor loss = sum_all(mul(softplus(x), x));
  backward(loss);
  const std::vector<double> first = x.grad();
  backward(loss);
  EXPECT_EQ(x.grad(), first);
}

TEST(Backward, ThreeLayerMlpMatchesFiniteDifferences) {
  Rng rng(51);
  Graph g;
  Tensor w1 = g.add_parameter("w1", random_tensor({5, 8}, rng, -0.7, 0.7));
  Tensor b1 = g.add_parameter("b1", random_tensor({8}, rng, -0.2, 0.2));
  Tensor w2 = g.add_parameter("w2", random_tensor({8, 6}, rng, -0.7, 0.7));
  Tensor b2 = g.add_parameter("b2", random_tensor({6}, rng, -0.2, 0.2));
  Tensor w3 = g.add_parameter("w3", random_tensor({6, 3}, rng, -0.7, 0.7));
  Tensor b3 = g.add_parameter("b3", random_tensor({3}, rng, -0.2, 0.2));
  Tensor x = random_tensor({4, 5}, rng, -1.0, 1.0);
  const std::vector<int> labels{0, 1, 2, 0};
  auto make_loss = [&] {
    Tensor h1 = softplus(bias_add_rows(matmul(x, w1), b1));
    Tensor h2 = softplus(bias_add_rows(matmul(h1, w2), b2));
    Tensor logits = bias_add_rows(matmul(h2, w3), b3);
    return softmax_cross_entropy(logits, labels);
  };
  expect_gradcheck(make_loss,
                   {w1, b1, w2, b2, w3, b3}, 1e-5);
}

TEST(Backward, ForwardIsDeterministic) {
  Rng rng(77);
  Tensor x = random_tensor({3, 4}, rng, -1.0, 1.0);
  Tensor w = random_tensor({4, 2}, rng, -1.0, 1.0);
  Tensor y1 = softplus(matmul(x, w));
  Tensor y2 = softplus(matmul(x, w));
  EXPECT_EQ(y1.data(), y2.data());
}

// ---------------------------------------------------------------------------
// finite-difference sweep across every differentiable op
// ---------------------------------------------------------------------------

TEST(GradientSweep, EveryOpAgreesWithFiniteDifferences) {
  Rng seed_rng(1234);
  for (int trial = 0; trial < 3; ++trial) {
    Rng rng(seed_rng.next_u64());
    Rng wrng(seed_rng.next_u64());

    {  // relu (inputs away from the kink)
      Tensor x = random_tensor_away_from_zero({3, 4}, rng, 0.05, 2.0, true);
      expect_gradcheck(weighted([&x] { return relu(x); }, wrng), {x}, 1e-5);
    }
    {  // softplus, sigmoid, exp
      Tensor x = random_tensor({3, 4}, rng, -2.0, 2.0, true);
      expect_gradcheck(weighted([&x] { return softplus(x); }, wrng), {x}, 1e-5);
      expect_gradcheck(weighted([&x] { return sigmoid(x); }, wrng), {x}, 1e-5);
      expect_gradcheck(weighted([&x] { return exp_t(x); }, wrng), {x}, 1e-5);
    }
    {  // log (positive domain)
      Tensor x = random_tensor({3, 4}, rng, 0.2, 2.0, true);
      expect_gradcheck(weighted([&x] { return log_t(x); }, wrng), {x}, 1e-5);
    }
    {  // scale, add_const
      Tensor x = random_tensor({5}, rng, -2.0, 2.0, true);
      expect_gradcheck(weighted([&x] { return scale(x, -1.7); }, wrng), {x}, 1e-5);
      expect_gradcheck(weighted([&x] { return add_const(x, 2.5); }, wrng), {x}, 1e-5);
    }
    {  // add, sub, mul
      Tensor a = random_tensor({4, 3}, rng, -2.0, 2.0, true);
      Tensor b = random_tensor({4, 3}, rng, -2.0, 2.0, true);
      expect_gradcheck(weighted([&] { return add(a, b); }, wrng), {a, b}, 1e-5);
      expect_gradcheck(weighted([&] { return sub(a, b); }, wrng), {a, b}, 1e-5);
      expect_gradcheck(weighted([&] { return mul(a, b); }, wrng), {a, b}, 1e-5);
    }
    {  // scalar-node broadcast ops
      Tensor x = random_tensor({3, 3}, rng, -2.0, 2.0, true);
      Tensor s = random_tensor({1}, rng, 0.3, 1.5, true);
      expect_gradcheck(weighted([&] { return add_scalar(x, s); }, wrng),
                       {x, s}, 1e-5);
      expect_gradcheck(weighted([&] { return mul_scalar(x, s); }, wrng),
                       {x, s}, 1e-5);
    }
    {  // reshape, sum_all, global_avg_pool
      Tensor x = random_tensor({2, 2, 3, 3}, rng, -2.0, 2.0, true);
      expect_gradcheck(weighted([&x] { return reshape(x, {2, 18}); }, wrng),
                       {x}, 1e-5);
      expect_gradcheck([&x] { return sum_all(x); }, {x}, 1e-5);
      expect_gradcheck(weighted([&x] { return global_avg_pool(x); }, wrng),
                       {x}, 1e-5);
    }
    {  // bias variants
      Tensor x = random_tensor({4, 3}, rng, -2.0, 2.0, true);
      Tensor b = random_tensor({3}, rng, -1.0, 1.0, true);
      expect_gradcheck(weighted([&] { return bias_add_rows(x, b); }, wrng),
                       {x, b}, 1e-5);
      Tensor xc = random_tensor({2, 3, 2, 2}, rng, -2.0, 2.0, true);
      Tensor bc = random_tensor({3}, rng, -1.0, 1.0, true);
      expect_gradcheck(weighted([&] { return bias_add_channels(xc, bc); }, wrng),
                       {xc, bc}, 1e-5);
    }
    {  // matmul
      Tensor a = random_tensor({3, 4}, rng, -2.0, 2.0, true);
      Tensor b = random_tensor({4, 2}, rng, -2.0, 2.0, true);
      expect_gradcheck(weighted([&] { return matmul(a, b); }, wrng), {a, b}, 1e-5);
    }
    {  // conv2d with stride 2 and same padding
      Tensor x = random_tensor({2, 2, 5, 5}, rng, -2.0, 2.0, true);
      Tensor k = random_tensor({3, 2, 3, 3}, rng, -1.0, 1.0, true);
      expect_gradcheck(
          weighted([&] { return conv2d(x, k, 2, Padding::kSame); }, wrng),
          {x, k}, 1e-5);
    }
    {  // softmax cross-entropy w.r.t. logits
      Tensor logits = random_tensor({4, 5}, rng, -2.0, 2.0, true);
      const std::vector<int> labels{1, 0, 4, 2};
      expect_gradcheck([&] { return softmax_cross_entropy(logits, labels); },
                       {logits}, 1e-5);
    }
  }
}
