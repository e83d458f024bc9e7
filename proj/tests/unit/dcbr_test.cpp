#include <gtest/gtest.h>

#include <cmath>

#include "i3net/autodiff/grad_check.hpp"
#include "i3net/autodiff/ops.hpp"
#include "i3net/data/rng.hpp"
#include "i3net/dcbr/dcbr.hpp"

using namespace i3net;
using namespace i3net::dcbr;

namespace {

ad::Tensor vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return ad::Tensor::from({n}, std::move(v));
}

ad::Tensor random_images(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n * 3 * 64 * 64);
  for (double& x : v) x = rng.uniform();
  return ad::Tensor::from({n, 3, 64, 64}, v);
}

}  // namespace

TEST(MlcLoss, ReferenceValues) {
  EXPECT_NEAR(mlc_loss(vec({1}), vec({0.5})).item(), 0.693147, 1e-6);
  EXPECT_NEAR(mlc_loss(vec({1, 0}), vec({0.5, 0.5})).item(), 1.386294, 1e-6);
  // exact one-hot prediction is clamped: loss is 3 * -log(1 - 1e-7)
  const double l = mlc_loss(vec({0, 1, 0}), vec({0, 1, 0})).item();
  EXPECT_LT(l, 1e-6);
  EXPECT_NEAR(l, -3 * std::log1p(-1e-7), 1e-15);
}

TEST(MlcLoss, MatchesHandComputedBinaryCrossEntropy) {
  Rng rng(3);
  for (int c = 0; c < 60; ++c) {
    const std::size_t n = rng.uniform_int(1, 4), k = rng.uniform_int(1, 5);
    std::vector<double> y(n * k), p(n * k);
    double expected = 0;
    for (std::size_t i = 0; i < n * k; ++i) {
      y[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
      p[i] = rng.uniform(0.01, 0.99);
      expected -= y[i] == 1.0 ? std::log(p[i]) : std::log(1 - p[i]);
    }
    expected /= static_cast<double>(n);
    EXPECT_NEAR(mlc_loss(ad::Tensor::from({n, k}, y), ad::Tensor::from({n, k}, p)).item(), expected, 1e-9);
  }
}

TEST(MlcLoss, RejectsLengthMismatch) {
  EXPECT_THROW(mlc_loss(vec({1, 0}), vec({0.5})), ad::ShapeError);
}

TEST(MlcLoss, GradientMatchesFiniteDifferences) {
  Rng rng(8);
  for (int s = 0; s < 20; ++s) {
    std::vector<double> y(6), p(6);
    for (std::size_t i = 0; i < 6; ++i) {
      y[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
      p[i] = rng.uniform(0.05, 0.95);
    }
    const auto yt = ad::Tensor::from({2, 3}, y);
    EXPECT_LT(ad::grad_check([&](const ad::Tensor& x) { return mlc_loss(yt, x); }, ad::Tensor::from({2, 3}, p)), 1e-4);
  }
}

TEST(PresenceLabels, MarksClassesWithAnyObject) {
  std::vector<data::Annotation> a = {{2, 0.5, 0.5, 0.1, 0.1}, {2, 0.2, 0.2, 0.1, 0.1}, {0, 0.7, 0.7, 0.1, 0.1}};
  EXPECT_EQ(presence_labels(a, 3), (std::vector<double>{1, 0, 1}));
  EXPECT_EQ(presence_labels({}, 3), (std::vector<double>{0, 0, 0}));
  EXPECT_THROW(presence_labels(a, 2), std::out_of_range);
}

TEST(Weights, W1ReferenceValues) {
  EXPECT_NEAR(compute_w1(std::vector<double>{0.9, 0.6, 0.2}, 0.5), 1.75, 1e-12);
  EXPECT_EQ(compute_w1(std::vector<double>{0.1, 0.2, 0.3}, 0.5), 1.0);
  EXPECT_NEAR(compute_w1(std::vector<double>{0.55}, 0.5), 1.55, 1e-12);
  EXPECT_THROW(compute_w1(std::vector<double>{0.5}, 0.0), std::invalid_argument);
  EXPECT_THROW(compute_w1(std::vector<double>{0.5}, 1.0), std::invalid_argument);
}

TEST(Weights, W1BoundedAndMatchesOracle) {
  Rng rng(4);
  for (int c = 0; c < 500; ++c) {
    std::vector<double> y(rng.uniform_int(1, 6));
    for (double& v : y) v = rng.uniform();
    const double tau = rng.uniform(0.05, 0.95);
    std::vector<double> confident;
    for (double v : y)
      if (v > tau) confident.push_back(v);
    double oracle = 1.0;
    if (!confident.empty()) {
      double s = 0;
      for (double v : confident) s += v;
      oracle += s / static_cast<double>(confident.size());
    }
    const double w1 = compute_w1(y, tau);
    EXPECT_NEAR(w1, oracle, 1e-12);
    EXPECT_GE(w1, 1.0);
    EXPECT_LE(w1, 2.0);
  }
}

TEST(Weights, W2ReferenceValuesAndProperties) {
  TargetSplit all{{}, {5, 0, 0}, 5};
  EXPECT_EQ(compute_w2(all, 0), 1.0);
  TargetSplit half{{}, {50, 50}, 100};
  EXPECT_NEAR(compute_w2(half, 1), 1.648721, 1e-6);
  TargetSplit tenth{{}, {10, 90}, 100};
  EXPECT_NEAR(compute_w2(tenth, 0), 2.459603, 1e-6);
  EXPECT_THROW(compute_w2(TargetSplit{{}, {0, 0}, 0}, 0), std::invalid_argument);
  EXPECT_THROW(compute_w2(all, 1), std::invalid_argument);

  double prev = std::exp(1.0) + 1;
  for (std::size_t k = 1; k <= 100; ++k) {
    const double w2 = compute_w2(TargetSplit{{}, {k, 100 - k}, 100}, 0);
    EXPECT_GE(w2, 1.0);
    EXPECT_LT(w2, std::exp(1.0));
    EXPECT_LT(w2, prev);
    EXPECT_NEAR(w2, std::exp(1.0 - static_cast<double>(k) / 100.0), 1e-12);
    prev = w2;
  }
}

TEST(Weights, CombineReferenceValues) {
  EXPECT_EQ(combine_weights(1.75, 2.459603, 1.0), 1.75);
  EXPECT_EQ(combine_weights(1.75, 2.459603, 0.0), 2.459603);
  EXPECT_NEAR(combine_weights(1.75, std::exp(0.9), 0.5), 2.104802, 1e-6);
  EXPECT_THROW(combine_weights(1, 1, -0.1), std::invalid_argument);
  EXPECT_THROW(combine_weights(1, 1, 1.1), std::invalid_argument);
  Rng rng(5);
  for (int c = 0; c < 60; ++c) {
    const double a = rng.uniform(1, 2), b = rng.uniform(1, 2.7), t = rng.uniform();
    EXPECT_NEAR(combine_weights(a, b, t), a * t + b * (1 - t), 1e-12);
  }
}

TEST(TargetSplit, ArgmaxWithLowestIndexTieBreak) {
  auto s = make_target_split({{0.9, 0.1, 0.1}, {0.5, 0.5, 0.1}, {0.1, 0.2, 0.7}}, 3);
  EXPECT_EQ(s.assignment, (std::vector<std::size_t>{0, 0, 2}));
  EXPECT_EQ(s.counts, (std::vector<std::size_t>{2, 0, 1}));
  EXPECT_EQ(s.total, 3u);
}

TEST(TargetSplit, CountsSumToTotal) {
  std::vector<std::vector<double>> all2(100, {0.1, 0.2, 0.9});
  auto s = make_target_split(all2, 3);
  EXPECT_EQ(s.counts, (std::vector<std::size_t>{0, 0, 100}));
  Rng rng(6);
  std::vector<std::vector<double>> r(257, std::vector<double>(4));
  for (auto& row : r)
    for (double& v : row) v = rng.uniform();
  auto t = make_target_split(r, 4);
  std::size_t sum = 0;
  for (auto c : t.counts) sum += c;
  EXPECT_EQ(sum, t.total);
}

TEST(MultiLabelClassifier, OutputsInOpenUnitInterval) {
  MultiLabelClassifier mlc({}, 1);
  auto y = mlc.predict(random_images(3, 1));
  EXPECT_EQ(y.shape(), (ad::Shape{3, 3}));
  for (double v : y.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(MultiLabelClassifier, FrozenParametersCarryNoGradient) {
  MultiLabelClassifier mlc({}, 1);
  mlc.set_frozen(true);
  auto x = random_images(2, 2);
  x.set_requires_grad(true);
  auto loss = mlc_loss(ad::Tensor::from({2, 3}, {1, 0, 1, 0, 1, 0}), mlc.predict(x));
  loss.backward();
  for (const auto& [name, t] : mlc.params().items()) EXPECT_FALSE(t.has_grad()) << name;
  EXPECT_TRUE(x.has_grad());
}

TEST(MultiLabelClassifier, RefreshSplitOverDataset) {
  data::SceneSpec spec;
  spec.domain = data::Domain::kTarget;
  auto set = data::generate_dataset(spec, 10);
  MultiLabelClassifier mlc({}, 1);
  auto split = refresh_target_split(mlc, set, 4);
  EXPECT_EQ(split.total, 10u);
  EXPECT_EQ(split.assignment.size(), 10u);
  auto preds = predict_all(mlc, set, 3);
  EXPECT_EQ(make_target_split(preds, 3).assignment, split.assignment);
}

TEST(AdversarialLoss, ReferenceValues) {
  // D = 0.5 everywhere means zero logits
  EXPECT_NEAR(dcbr_adv_loss(vec({0}), vec({0}), std::vector<double>{1}).item(), 1.386294, 1e-6);
  auto s = vec({0.3, -1.2}), t = vec({0.7, 2.0, -0.4});
  const double source_only = (std::log1p(std::exp(-0.3)) + std::log1p(std::exp(1.2))) / 2;
  EXPECT_NEAR(dcbr_adv_loss(s, t, std::vector<double>{0, 0, 0}).item(), source_only, 1e-12);
  EXPECT_THROW(dcbr_adv_loss(ad::Tensor::zeros({0}), t, std::vector<double>{1, 1, 1}), std::invalid_argument);
  EXPECT_THROW(dcbr_adv_loss(s, t, std::vector<double>{1, 1}), ad::ShapeError);
}

TEST(AdversarialLoss, UnitWeightsAreBitEqualToUnweighted) {
  Rng rng(7);
  for (int c = 0; c < 200; ++c) {
    std::vector<double> s(rng.uniform_int(1, 8)), t(rng.uniform_int(1, 8));
    for (double& v : s) v = 4 * rng.normal();
    for (double& v : t) v = 4 * rng.normal();
    const std::vector<double> ones(t.size(), 1.0);
    EXPECT_EQ(dcbr_adv_loss(vec(s), vec(t), ones).item(), adversarial_loss(vec(s), vec(t)).item());
  }
}

TEST(AdversarialLoss, WeightedMatchesOracle) {
  Rng rng(9);
  for (int c = 0; c < 60; ++c) {
    std::vector<double> s(rng.uniform_int(1, 5)), t(rng.uniform_int(1, 5)), w(t.size());
    double expected = 0;
    for (double& v : s) {
      v = rng.normal();
      expected -= std::log(1 / (1 + std::exp(-v))) / static_cast<double>(s.size());
    }
    for (std::size_t i = 0; i < t.size(); ++i) {
      t[i] = rng.normal();
      w[i] = rng.uniform(1, 2.7);
      expected -= w[i] * std::log(1 - 1 / (1 + std::exp(-t[i]))) / static_cast<double>(t.size());
    }
    EXPECT_NEAR(dcbr_adv_loss(vec(s), vec(t), w).item(), expected, 1e-9);
  }
}

TEST(AdversarialLoss, ReversalFlipsBackboneGradient) {
  det::DetectionModel model({.seed = 2});
  ImageDiscriminator disc(64, 3);
  const auto xs = random_images(2, 10), xt = random_images(2, 11);
  const std::vector<double> w = {1.3, 2.1};
  auto grads = [&](bool reverse) {
    model.params().zero_grad();
    disc.params().zero_grad();
    auto gs = model.forward(xs).g2, gt = model.forward(xt).g2;
    if (reverse) {
      gs = ad::gradient_reversal(gs, 1.0);
      gt = ad::gradient_reversal(gt, 1.0);
    }
    dcbr_adv_loss(disc.logits(gs), disc.logits(gt), w).backward();
    std::vector<double> backbone, head;
    for (const auto& [name, t] : model.params().items())
      if (name.starts_with("backbone.") && t.has_grad()) backbone.insert(backbone.end(), t.grad().begin(), t.grad().end());
    for (const auto& [name, t] : disc.params().items()) head.insert(head.end(), t.grad().begin(), t.grad().end());
    return std::pair{backbone, head};
  };
  const auto [plain_b, plain_d] = grads(false);
  const auto [rev_b, rev_d] = grads(true);
  ASSERT_EQ(plain_b.size(), rev_b.size());
  ASSERT_FALSE(plain_b.empty());
  double norm = 0;
  for (std::size_t i = 0; i < plain_b.size(); ++i) {
    EXPECT_EQ(rev_b[i], -plain_b[i]);
    norm += plain_b[i] * plain_b[i];
  }
  EXPECT_GT(norm, 0.0);
  // the discriminator itself is not behind the reversal
  EXPECT_EQ(plain_d, rev_d);
}

TEST(AdversarialLoss, GradientMatchesFiniteDifferences) {
  Rng rng(12);
  for (int c = 0; c < 20; ++c) {
    std::vector<double> s(3), t(4), w(4);
    for (double& v : s) v = rng.normal();
    for (double& v : t) v = rng.normal();
    for (double& v : w) v = rng.uniform(1, 2.7);
    auto r = ad::grad_check([&](const std::vector<ad::Tensor>& in) { return dcbr_adv_loss(in[0], in[1], w); },
                            {vec(s), vec(t)});
    EXPECT_LT(r.max_relative_error, 1e-4);
  }
}
