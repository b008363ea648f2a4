#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "rest/nn.hpp"

using namespace rest::nn;

namespace {

Mat<double> random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Scalar loss sum(w . f(x)) so every output receives a distinct weight.
double check_network(Network<double>& net, const Mat<double>& x, std::uint64_t seed, bool dropout) {
  const Mat<double> w = random_matrix(net.output_shape().size(), x.cols(), seed);
  auto run = [&](Network<double>::Tape* tape) {
    rest::Rng rng(99);
    ForwardMode mode{dropout, &rng};
    return net.forward(x, mode, tape);
  };
  Network<double>::Tape tape;
  net.zero_grad();
  const Mat<double> y = run(&tape);
  net.backward(w, tape);
  return oracle::gradient_check(net, [&] { return run(nullptr).cwiseProduct(w).sum(); });
}

}  // namespace

TEST(GradientCheck, DenseTanhStack) {
  Network<double> net({5, 1, 1}, {LayerSpec::dense(6), LayerSpec::tanh(), LayerSpec::dense(3)}, 1);
  EXPECT_LT(check_network(net, random_matrix(5, 4, 2), 3, false), 1e-6);
}

TEST(GradientCheck, ConvPoolReluStack) {
  Network<double> net({2, 8, 8},
                      {LayerSpec::conv(3, 3), LayerSpec::relu(), LayerSpec::pool(), LayerSpec::dense(4)}, 4);
  EXPECT_LT(check_network(net, random_matrix(2 * 64, 3, 5), 6, false), 1e-5);
}

TEST(GradientCheck, DropoutWithFixedMask) {
  Network<double> net({6, 1, 1}, {LayerSpec::dense(8), LayerSpec::relu(), LayerSpec::dropout(0.5), LayerSpec::dense(2)},
                      7);
  EXPECT_LT(check_network(net, random_matrix(6, 5, 8), 9, true), 1e-6);
}

TEST(GradientCheck, InputGradient) {
  Network<double> net({1, 6, 6}, {LayerSpec::conv(2, 3), LayerSpec::tanh(), LayerSpec::dense(2)}, 10);
  Mat<double> x = random_matrix(36, 2, 11);
  const Mat<double> w = random_matrix(2, 2, 12);
  Network<double>::Tape tape;
  net.forward(x, {}, &tape);
  const Mat<double> gx = net.backward(w, tape);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double saved = x.data()[i];
    x.data()[i] = saved + h;
    const double up = net.forward(x).cwiseProduct(w).sum();
    x.data()[i] = saved - h;
    const double down = net.forward(x).cwiseProduct(w).sum();
    x.data()[i] = saved;
    EXPECT_NEAR(gx.data()[i], (up - down) / (2 * h), 1e-7);
  }
}

TEST(GradientCheck, SoftmaxCrossEntropy) {
  Mat<double> logits = random_matrix(4, 3, 13);
  const std::vector<int> labels{0, 3, 1};
  Mat<double> grad;
  softmax_cross_entropy(logits, labels, &grad);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    const double saved = logits.data()[i];
    logits.data()[i] = saved + h;
    const double up = softmax_cross_entropy<double>(logits, labels, nullptr);
    logits.data()[i] = saved - h;
    const double down = softmax_cross_entropy<double>(logits, labels, nullptr);
    logits.data()[i] = saved;
    EXPECT_NEAR(grad.data()[i], (up - down) / (2 * h), 1e-8);
  }
}

TEST(Layers, ConvMatchesDirectLoop) {
  Network<double> net({2, 5, 4}, {LayerSpec::conv(3, 3)}, 21);
  const Mat<double> x = random_matrix(2 * 20, 2, 22);
  const Mat<double> y = net.forward(x);
  const auto params = net.params();
  const Mat<double>& w = params[0]->value;  // out x (cin * k * k)
  const Mat<double>& b = params[1]->value;
  ASSERT_EQ(y.rows(), 3 * 3 * 2);
  for (int n = 0; n < 2; ++n)
    for (int o = 0; o < 3; ++o)
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 2; ++c) {
          double s = b(o, 0);
          for (int ci = 0; ci < 2; ++ci)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx)
                s += w(o, (ci * 3 + ky) * 3 + kx) * x((ci * 5 + r + ky) * 4 + c + kx, n);
          EXPECT_NEAR(y((o * 3 + r) * 2 + c, n), s, 1e-12);
        }
}

TEST(Layers, MaxPoolTakesBlockMaximum) {
  Network<double> net({1, 4, 4}, {LayerSpec::pool()}, 0);
  Mat<double> x(16, 1);
  for (int i = 0; i < 16; ++i) x(i, 0) = (i * 7) % 16;
  const Mat<double> y = net.forward(x);
  ASSERT_EQ(y.rows(), 4);
  EXPECT_EQ(y(0, 0), std::max({x(0, 0), x(1, 0), x(4, 0), x(5, 0)}));
  EXPECT_EQ(y(3, 0), std::max({x(10, 0), x(11, 0), x(14, 0), x(15, 0)}));
}

TEST(Layers, DropoutInactiveIsIdentity) {
  Network<double> net({4, 1, 1}, {LayerSpec::dropout(0.5)}, 0);
  const Mat<double> x = random_matrix(4, 3, 1);
  EXPECT_EQ(net.forward(x), x);
}

TEST(Layers, DropoutKeepsExpectation) {
  Network<double> net({1000, 1, 1}, {LayerSpec::dropout(0.5)}, 0);
  const Mat<double> x = Mat<double>::Ones(1000, 1);
  rest::Rng rng(3);
  const Mat<double> y = net.forward(x, {true, &rng});
  int zeros = 0;
  for (int i = 0; i < 1000; ++i) {
    EXPECT_TRUE(y(i, 0) == 0.0 || y(i, 0) == 2.0);
    zeros += y(i, 0) == 0.0;
  }
  EXPECT_NEAR(zeros, 500, 3 * std::sqrt(250.0));
}

TEST(Network, ShapeMismatchThrows) {
  Network<float> net({1, 4, 4}, {LayerSpec::dense(2)}, 0);
  EXPECT_THROW(net.forward(Mat<float>::Zero(15, 1)), std::invalid_argument);
}

TEST(Network, KernelLargerThanInputThrows) {
  EXPECT_THROW(Network<float>({1, 2, 2}, {LayerSpec::conv(1, 3)}, 0), std::invalid_argument);
}

TEST(Network, CastPreservesOutputs) {
  Network<float> net({1, 6, 6}, {LayerSpec::conv(2, 3), LayerSpec::relu(), LayerSpec::dense(3)}, 5);
  const Network<double> d = net.cast<double>();
  const Mat<double> x = random_matrix(36, 2, 6);
  const Mat<double> yf = net.forward(x.cast<float>()).cast<double>();
  EXPECT_LT((d.forward(x) - yf).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(Network, SeedDeterminesInitialization) {
  const std::vector<LayerSpec> s{LayerSpec::dense(3)};
  Network<float> a({4, 1, 1}, s, 1), b({4, 1, 1}, s, 1), c({4, 1, 1}, s, 2);
  EXPECT_EQ(a.params()[0]->value, b.params()[0]->value);
  EXPECT_NE(a.params()[0]->value, c.params()[0]->value);
}

TEST(Network, ZeroInitScaleGivesZeroWeights) {
  Network<float> net({4, 1, 1}, {LayerSpec::dense(3, 0.0)}, 1);
  EXPECT_EQ(net.params()[0]->value.cwiseAbs().maxCoeff(), 0.0f);
}

TEST(Optim, AdamFirstStepMovesByLearningRate) {
  Param<double> p{"w", Mat<double>::Constant(2, 1, 1.0), Mat<double>::Zero(2, 1)};
  p.grad << 3.0, -0.5;
  Adam<double> adam(0.01);
  adam.step({&p});
  EXPECT_NEAR(p.value(0, 0), 0.99, 1e-9);
  EXPECT_NEAR(p.value(1, 0), 1.01, 1e-9);
}

TEST(Optim, ClipGradNormRescales) {
  Param<double> a{"a", Mat<double>::Zero(1, 1), Mat<double>::Constant(1, 1, 3.0)};
  Param<double> b{"b", Mat<double>::Zero(1, 1), Mat<double>::Constant(1, 1, 4.0)};
  EXPECT_DOUBLE_EQ(clip_grad_norm<double>({&a, &b}, 1.0), 5.0);
  EXPECT_NEAR(a.grad(0, 0), 0.6, 1e-12);
  EXPECT_NEAR(b.grad(0, 0), 0.8, 1e-12);
  EXPECT_NEAR(clip_grad_norm<double>({&a, &b}, 10.0), 1.0, 1e-12);
  EXPECT_NEAR(a.grad(0, 0), 0.6, 1e-12);
}

TEST(Optim, SoftmaxColumnsSumToOne) {
  const Mat<double> z = random_matrix(5, 4, 3) * 30.0;
  const Eigen::MatrixXd p = softmax(z);
  for (Eigen::Index j = 0; j < 4; ++j) EXPECT_NEAR(p.col(j).sum(), 1.0, 1e-12);
}
