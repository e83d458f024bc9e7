#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "i3net/autodiff/grad_check.hpp"
#include "i3net/autodiff/ops.hpp"

namespace ad = i3net::ad;
using ad::Tensor;

namespace {

Tensor random_tensor(ad::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

// Projects an arbitrary tensor to a scalar with fixed random weights so every
// output element carries a distinct upstream gradient.
Tensor weighted_sum(const Tensor& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ad::sum(ad::mul(y, random_tensor(y.shape(), rng)));
}

}  // namespace

TEST(CoreOps, SoftmaxTemperatureSymmetric) {
  auto p = ad::softmax(Tensor::from({2}, {0.0, 0.0}), 2.0);
  EXPECT_DOUBLE_EQ(p.data()[0], 0.5);
  EXPECT_DOUBLE_EQ(p.data()[1], 0.5);
}

TEST(CoreOps, ScalarConvolution) {
  auto y = ad::conv2d(Tensor::from({1, 1, 1, 1}, {3.0}), Tensor::from({1, 1, 1, 1}, {2.0}));
  EXPECT_EQ(y.shape(), (ad::Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.data()[0], 6.0);
}

TEST(CoreOps, MatmulByHand) {
  auto y = ad::matmul(Tensor::from({2, 2}, {1, 2, 3, 4}), Tensor::from({2, 1}, {1, 1}));
  EXPECT_EQ(y.shape(), (ad::Shape{2, 1}));
  EXPECT_DOUBLE_EQ(y.data()[0], 3.0);
  EXPECT_DOUBLE_EQ(y.data()[1], 7.0);
}

TEST(CoreOps, ConvolutionAgainstDirectSum) {
  std::mt19937_64 rng(7);
  auto x = random_tensor({2, 3, 5, 6}, rng);
  auto w = random_tensor({4, 3, 3, 3}, rng);
  auto b = random_tensor({4}, rng);
  auto y = ad::conv2d(x, w, b, {.stride = 2, .padding = 1});
  ASSERT_EQ(y.shape(), (ad::Shape{2, 4, 3, 3}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t co = 0; co < 4; ++co)
      for (std::size_t oy = 0; oy < 3; ++oy)
        for (std::size_t ox = 0; ox < 3; ++ox) {
          double acc = b.data()[co];
          for (std::size_t ci = 0; ci < 3; ++ci)
            for (std::size_t ky = 0; ky < 3; ++ky)
              for (std::size_t kx = 0; kx < 3; ++kx) {
                long iy = static_cast<long>(oy * 2 + ky) - 1, ix = static_cast<long>(ox * 2 + kx) - 1;
                if (iy < 0 || iy >= 5 || ix < 0 || ix >= 6) continue;
                acc += w.at({co, ci, ky, kx}) * x.at({n, ci, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)});
              }
          EXPECT_NEAR(y.at({n, co, oy, ox}), acc, 1e-12);
        }
}

TEST(CoreOps, BroadcastAdd) {
  auto y = ad::add(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}), Tensor::from({3}, {10, 20, 30}));
  EXPECT_EQ(y.shape(), (ad::Shape{2, 3}));
  std::vector<double> expected{11, 22, 33, 14, 25, 36};
  for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(y.data()[i], expected[i]);
}

TEST(CoreOps, MaxPoolAndLayout) {
  auto x = Tensor::from({1, 1, 2, 4}, {1, 5, 2, 0, 3, 4, 8, 1});
  auto y = ad::max_pool2d(x, 2, 2);
  EXPECT_DOUBLE_EQ(y.data()[0], 5);
  EXPECT_DOUBLE_EQ(y.data()[1], 8);
  auto t = ad::permute(Tensor::from({2, 3}, {0, 1, 2, 3, 4, 5}), {1, 0});
  EXPECT_EQ(t.shape(), (ad::Shape{3, 2}));
  EXPECT_DOUBLE_EQ(t.at({2, 1}), 5);
  auto c = ad::concat({Tensor::from({1, 2}, {1, 2}), Tensor::from({1, 1}, {3})}, 1);
  EXPECT_DOUBLE_EQ(c.at({0, 2}), 3);
  auto s = ad::slice(Tensor::from({2, 3}, {0, 1, 2, 3, 4, 5}), 1, 1, 3);
  EXPECT_DOUBLE_EQ(s.at({1, 0}), 4);
}

TEST(CoreOps, ShapeMismatchRejected) {
  EXPECT_THROW(ad::add(Tensor::zeros({2, 3}), Tensor::zeros({2, 2})), ad::ShapeError);
  EXPECT_THROW(ad::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ad::ShapeError);
  EXPECT_THROW(ad::conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3})), ad::ShapeError);
  EXPECT_THROW(ad::reshape(Tensor::zeros({2, 3}), {4}), ad::ShapeError);
  EXPECT_THROW(Tensor::from({2}, {1.0}), ad::ShapeError);
}

TEST(CoreOps, NonScalarBackwardRejected) {
  auto x = Tensor::zeros({3}, true);
  EXPECT_THROW(ad::square(x).backward(), ad::ShapeError);
}

TEST(GradientReversal, ForwardIdentityBackwardFlip) {
  auto x = Tensor::scalar(3.0, true);
  auto y = ad::gradient_reversal(x, 1.0);
  EXPECT_DOUBLE_EQ(y.item(), 3.0);
  y.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], -1.0);

  auto x2 = Tensor::scalar(3.0, true);
  ad::scale(ad::gradient_reversal(x2, 0.5), 2.0).backward();
  EXPECT_DOUBLE_EQ(x2.grad()[0], -1.0);
}

TEST(GradientReversal, ZeroBetaBlocksGradient) {
  std::mt19937_64 rng(3);
  auto x = random_tensor({4, 3}, rng);
  x.set_requires_grad(true);
  auto loss = ad::sum(ad::square(ad::gradient_reversal(ad::scale(x, 2.0), 0.0)));
  loss.backward();
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(GradientReversal, NegativeBetaRejected) {
  EXPECT_THROW(ad::gradient_reversal(Tensor::scalar(1.0), -1.0), std::invalid_argument);
}

TEST(GradCheck, SquareAtThree) {
  auto x = Tensor::scalar(3.0);
  auto r = ad::grad_check([](const std::vector<Tensor>& in) { return ad::square(in[0]); }, {x}, 1e-5);
  EXPECT_DOUBLE_EQ(r.analytic, 6.0);
  EXPECT_LT(r.max_relative_error, 1e-6);
}

TEST(GradCheck, ConstantFunction) {
  auto r = ad::grad_check([](const std::vector<Tensor>&) { return Tensor::scalar(4.0); }, {Tensor::scalar(1.0)}, 1e-5);
  EXPECT_EQ(r.analytic, 0.0);
  EXPECT_EQ(r.max_relative_error, 0.0);
}

TEST(GradCheck, SoftmaxCrossEntropyUniform) {
  auto logits = Tensor::from({1, 2}, {0.0, 0.0});
  auto ce = [](const std::vector<Tensor>& in) { return ad::neg(ad::sum(ad::pick(ad::log_softmax(in[0]), {0}))); };
  auto r = ad::grad_check(ce, {logits}, 1e-5);
  EXPECT_LT(r.max_relative_error, 1e-6);
  EXPECT_NEAR(logits.grad()[0], -0.5, 1e-15);
  EXPECT_NEAR(logits.grad()[1], 0.5, 1e-15);
}

TEST(GradCheck, RejectsNonScalarLossAndBadEps) {
  EXPECT_THROW(ad::grad_check([](const std::vector<Tensor>& in) { return ad::square(in[0]); }, {Tensor::zeros({2})}),
               ad::ShapeError);
  EXPECT_THROW(ad::grad_check([](const Tensor& x) { return ad::sum(x); }, Tensor::zeros({2}), 1e-2),
               std::invalid_argument);
}

// Every op against central differences on random inputs in [-1, 1].
struct OpCase {
  const char* name;
  std::vector<ad::Shape> shapes;
  std::function<Tensor(const std::vector<Tensor>&)> fn;
  double lo = -1.0;
  double hi = 1.0;
};

class OpGradient : public ::testing::TestWithParam<int> {};

std::vector<OpCase> op_cases() {
  return {
      {"add_broadcast", {{3, 4}, {4}}, [](auto& in) { return weighted_sum(ad::add(in[0], in[1]), 1); }},
      {"sub_broadcast", {{2, 1, 3}, {4, 1}}, [](auto& in) { return weighted_sum(ad::sub(in[0], in[1]), 2); }},
      {"mul", {{3, 4}, {3, 4}}, [](auto& in) { return weighted_sum(ad::mul(in[0], in[1]), 3); }},
      {"div", {{3, 4}, {3, 4}}, [](auto& in) { return weighted_sum(ad::div(in[0], in[1]), 4); }, 0.5, 1.5},
      {"matmul", {{3, 4}, {4, 2}}, [](auto& in) { return weighted_sum(ad::matmul(in[0], in[1]), 5); }},
      {"conv2d", {{2, 2, 5, 5}, {3, 2, 3, 3}, {3}},
       [](auto& in) { return weighted_sum(ad::conv2d(in[0], in[1], in[2], {.stride = 2, .padding = 1}), 6); }},
      {"conv2d_1x1", {{1, 3, 4, 4}, {2, 3, 1, 1}}, [](auto& in) { return weighted_sum(ad::conv2d(in[0], in[1]), 7); }},
      {"max_pool", {{1, 2, 4, 4}}, [](auto& in) { return weighted_sum(ad::max_pool2d(in[0], 2, 2), 8); }},
      {"relu", {{3, 5}}, [](auto& in) { return weighted_sum(ad::relu(in[0]), 9); }},
      {"sigmoid", {{3, 5}}, [](auto& in) { return weighted_sum(ad::sigmoid(in[0]), 10); }},
      {"softplus", {{3, 5}}, [](auto& in) { return weighted_sum(ad::softplus(in[0]), 11); }},
      {"softmax_T2", {{3, 4}}, [](auto& in) { return weighted_sum(ad::softmax(in[0], 2.0), 12); }},
      {"log_softmax", {{3, 4}}, [](auto& in) { return weighted_sum(ad::log_softmax(in[0], 0.7), 13); }},
      {"log", {{6}}, [](auto& in) { return weighted_sum(ad::log(in[0]), 14); }, 0.2, 1.0},
      {"exp", {{6}}, [](auto& in) { return weighted_sum(ad::exp(in[0]), 15); }},
      {"sqrt", {{6}}, [](auto& in) { return weighted_sum(ad::sqrt(in[0]), 16); }, 0.2, 1.0},
      {"square", {{6}}, [](auto& in) { return weighted_sum(ad::square(in[0]), 17); }},
      {"l2_norm", {{2, 3}}, [](auto& in) { return ad::l2_norm(in[0]); }},
      {"sum_axis", {{2, 3, 4}}, [](auto& in) { return weighted_sum(ad::sum(in[0], 1), 18); }},
      {"mean_axis", {{2, 3, 4}}, [](auto& in) { return weighted_sum(ad::mean(in[0], 2), 19); }},
      {"mean", {{2, 3}}, [](auto& in) { return ad::mean(ad::square(in[0])); }},
      {"reshape_permute", {{2, 3, 4}}, [](auto& in) { return weighted_sum(ad::permute(ad::reshape(in[0], {6, 4}), {1, 0}), 20); }},
      {"slice_concat", {{2, 5}, {2, 2}},
       [](auto& in) { return weighted_sum(ad::concat({ad::slice(in[0], 1, 1, 4), in[1]}, 1), 21); }},
      {"pick", {{4, 3}}, [](auto& in) { return weighted_sum(ad::pick(in[0], {2, 0, 1, 1}), 22); }},
      {"smooth_l1", {{8}}, [](auto& in) { return weighted_sum(ad::smooth_l1(ad::scale(in[0], 0.9)), 23); }},
      {"clamp", {{8}}, [](auto& in) { return weighted_sum(ad::clamp(in[0], -2.0, 2.0), 24); }},
  };
}

TEST(OpGradients, AllOpsMatchFiniteDifferences) {
  for (const auto& c : op_cases()) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      std::mt19937_64 rng(seed * 31 + 1);
      std::vector<Tensor> inputs;
      for (const auto& s : c.shapes) inputs.push_back(random_tensor(s, rng, c.lo, c.hi));
      auto r = ad::grad_check(c.fn, inputs, 1e-5);
      EXPECT_LT(r.max_relative_error, 1e-4) << c.name << " seed " << seed << " analytic " << r.analytic
                                            << " numeric " << r.numeric;
    }
  }
}

TEST(Properties, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(11);
  for (double t : {0.1, 0.5, 1.0, 2.0, 10.0}) {
    auto p = ad::softmax(random_tensor({7, 5}, rng, -20, 20), t);
    for (std::size_t r = 0; r < 7; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 5; ++c) s += p.at({r, c});
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Properties, Deterministic) {
  auto run = [] {
    std::mt19937_64 rng(99);
    auto x = random_tensor({2, 3, 6, 6}, rng);
    auto w = random_tensor({4, 3, 3, 3}, rng);
    w.set_requires_grad(true);
    auto y = ad::conv2d(x, w, {.stride = 1, .padding = 1});
    auto loss = ad::sum(ad::softmax(ad::reshape(y, {8, 36}), 2.0) * ad::reshape(y, {8, 36}));
    loss.backward();
    std::vector<double> out(w.grad().begin(), w.grad().end());
    out.push_back(loss.item());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Properties, NoGradGuardSkipsRecording) {
  auto x = Tensor::scalar(2.0, true);
  ad::NoGradGuard guard;
  auto y = ad::square(x);
  EXPECT_FALSE(y.requires_grad());
}
