#include "i3net/train/gradient_suite.hpp"

#include <chrono>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "i3net/autodiff/grad_check.hpp"
#include "i3net/autodiff/ops.hpp"
#include "i3net/copm/copm.hpp"
#include "i3net/dcbr/dcbr.hpp"
#include "i3net/rjca/rjca.hpp"
#include "i3net/train/trainer.hpp"

namespace i3net::train {

namespace {

using Inputs = std::vector<ad::Tensor>;

ad::Tensor random_normal(ad::Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<double> v(ad::numel(shape));
  for (double& x : v) x = scale * rng.normal();
  return ad::Tensor::from(std::move(shape), std::move(v), true);
}

std::vector<double> random_uniform(std::size_t n, Rng& rng, double lo, double hi) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

void append_params(Inputs& inputs, nn::ParameterSet& params) {
  for (auto& [name, t] : params.items()) inputs.push_back(t);
}

// Random entries for roughly two thirds of the bank.
void fill_bank(rjca::PrototypeBank& bank, Rng& rng, double scale) {
  for (auto side : {rjca::Side::kSource, rjca::Side::kTarget}) {
    for (std::size_t l = 0; l < bank.layer_count(); ++l) {
      for (std::size_t k = 0; k < bank.class_count(); ++k) {
        if (rng.uniform() < 1.0 / 3) continue;
        std::vector<double> v(bank.channels(l));
        for (double& x : v) x = scale * rng.normal();
        bank.set(side, l, k, std::move(v));
      }
    }
  }
}

rjca::PixelLabels random_labels(std::size_t n, std::size_t k, Rng& rng) {
  rjca::PixelLabels labels(n);
  for (int& y : labels) y = static_cast<int>(rng.uniform_int(-1, static_cast<std::int64_t>(k) - 1));
  return labels;
}

ad::GradCheckResult check_mlc(Rng& rng) {
  const std::size_t n = 3, k = 3;
  std::vector<double> y(n * k);
  for (double& v : y) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
  const auto labels = ad::Tensor::from({n, k}, y);
  auto loss = [&](const Inputs& in) { return dcbr::mlc_loss(labels, ad::sigmoid(in[0])); };
  return ad::grad_check(loss, {random_normal({n, k}, rng, 2.0)});
}

double min_abs(const ad::Tensor& t) {
  double m = std::numeric_limits<double>::infinity();
  for (double v : t.data()) m = std::min(m, std::abs(v));
  return m;
}

// Inputs whose hidden ReLU pre-activations fall this close to zero are redrawn:
// central differences straddling the kink are not a gradient test.
constexpr double kKinkMargin = 1e-3;

ad::GradCheckResult check_dcbr(Rng& rng) {
  dcbr::ImageDiscriminator dg(4, rng());
  const auto weights = random_uniform(3, rng, 1.0, std::exp(1.0));
  const auto& hw = dg.params().get("hidden.weight");
  const auto& hb = dg.params().get("hidden.bias");
  auto near_kink = [&](const ad::Tensor& x) {
    ad::NoGradGuard guard;
    return min_abs(ad::add(ad::matmul(nn::global_avg_pool(x), hw), hb)) < kKinkMargin;
  };
  Inputs inputs{random_normal({2, 4, 3, 3}, rng), random_normal({3, 4, 3, 3}, rng)};
  while (near_kink(inputs[0])) inputs[0] = random_normal({2, 4, 3, 3}, rng);
  while (near_kink(inputs[1])) inputs[1] = random_normal({3, 4, 3, 3}, rng);
  append_params(inputs, dg.params());
  auto loss = [&](const Inputs& in) { return dcbr::dcbr_adv_loss(dg.logits(in[0]), dg.logits(in[1]), weights); };
  return ad::grad_check(loss, inputs);
}

ad::GradCheckResult check_pattern(Rng& rng) {
  const std::size_t c = 4, classes = 4, grid = 3;
  const auto proj = copm::make_random_projections(8, c, classes, rng());
  auto probabilities = [](const ad::Tensor& logits) {
    // softmax over the channel axis of N x (K+1) x H x W
    return ad::permute(ad::softmax(ad::permute(logits, {0, 2, 3, 1})), {0, 3, 1, 2});
  };
  auto loss = [&](const Inputs& in) {
    const auto ms = copm::attention_map(copm::fuse_maps(in[0], probabilities(in[2]), proj));
    const auto mt = copm::attention_map(copm::fuse_maps(in[1], probabilities(in[3]), proj));
    return copm::batch_pattern_match_loss(ms, mt);
  };
  return ad::grad_check(loss, {random_normal({2, c, grid, grid}, rng), random_normal({2, c, grid, grid}, rng),
                               random_normal({2, classes, grid, grid}, rng), random_normal({2, classes, grid, grid}, rng)});
}

ad::GradCheckResult check_pixel_adv(Rng& rng) {
  copm::PixelDiscriminator dl(4, rng());
  const auto& hw = dl.params().get("hidden.weight");
  const auto& hb = dl.params().get("hidden.bias");
  auto near_kink = [&](const ad::Tensor& x) {
    ad::NoGradGuard guard;
    return min_abs(ad::conv2d(x, hw, hb)) < kKinkMargin;
  };
  Inputs inputs{random_normal({2, 4, 3, 3}, rng), random_normal({2, 4, 3, 3}, rng)};
  for (auto& x : inputs) {
    while (near_kink(x)) x = random_normal({2, 4, 3, 3}, rng);
  }
  append_params(inputs, dl.params());
  auto loss = [&](const Inputs& in) { return copm::pixel_adv_loss(dl.logits(in[0]), dl.logits(in[1])); };
  return ad::grad_check(loss, inputs);
}

// Local prototypes from labeled features, composed with a partly filled bank.
struct PrototypeFixture {
  static constexpr std::size_t kClasses = 3;
  static constexpr std::size_t kImages = 2;
  static constexpr std::size_t kGrid = 2;

  PrototypeFixture(std::size_t channels, Rng& rng) : bank({channels, channels}, kClasses, 0.7) {
    fill_bank(bank, rng, 1.0);
    for (std::size_t l = 0; l < 2; ++l) {
      for (auto side : {rjca::Side::kSource, rjca::Side::kTarget}) {
        (void)side;
        labels.push_back(random_labels(kImages * kGrid * kGrid, kClasses, rng));
        features.push_back(random_normal({kImages, channels, kGrid, kGrid}, rng));
      }
    }
  }

  // in: features ordered (layer 0 source, layer 0 target, layer 1 source, ...)
  std::vector<rjca::ClassVectors> globals(const Inputs& in, rjca::Side side) const {
    std::vector<rjca::ClassVectors> out;
    for (std::size_t l = 0; l < 2; ++l) {
      const std::size_t slot = 2 * l + static_cast<std::size_t>(side);
      out.push_back(rjca::compose_globals(bank, side, l, rjca::local_prototypes(in[slot], labels[slot], kClasses)));
    }
    return out;
  }

  rjca::PrototypeBank bank;
  std::vector<rjca::PixelLabels> labels;
  Inputs features;
};

ad::GradCheckResult check_jca(Rng& rng) {
  PrototypeFixture fx(4, rng);
  auto loss = [&](const Inputs& in) {
    return rjca::jca_loss(fx.globals(in, rjca::Side::kSource), fx.globals(in, rjca::Side::kTarget), 1.0);
  };
  return ad::grad_check(loss, fx.features);
}

ad::GradCheckResult check_pr(Rng& rng) {
  det::DetectorConfig dc;
  dc.image_size = 16;
  dc.seed = rng();
  det::DetectionModel model(dc);
  // larger head weights than the default init so that the tempered predictions differ
  for (auto& [name, t] : model.params().items()) {
    if (!name.starts_with("head.")) continue;
    for (double& w : t.mutable_data()) w = 0.2 * rng.normal();
  }
  PrototypeFixture fx(model.layer_channels(), rng);
  const rjca::HeadFn head = [&model](std::size_t l, const ad::Tensor& f) { return model.head_logits(l, f); };
  // target features of both layers, then the two class-head biases
  Inputs inputs{fx.features[1], fx.features[3], model.params().get("head.lA.cls.bias"),
                model.params().get("head.lB.cls.bias")};
  auto loss = [&](const Inputs& in) {
    Inputs features = fx.features;
    features[1] = in[0];
    features[3] = in[1];
    return rjca::pr_loss(fx.globals(features, rjca::Side::kTarget), head, 2.0, 3);
  };
  return ad::grad_check(loss, inputs);
}

data::Annotation random_box(Rng& rng, std::size_t classes) {
  data::Annotation a;
  a.class_id = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(classes) - 1));
  a.w = rng.uniform(0.2, 0.6);
  a.h = rng.uniform(0.2, 0.6);
  a.cx = rng.uniform(a.w / 2, 1 - a.w / 2);
  a.cy = rng.uniform(a.h / 2, 1 - a.h / 2);
  return a;
}

ad::GradCheckResult check_total(Rng& rng) {
  Config config;
  config.image_size = 16;
  config.fused_dim = 8;
  config.seed = rng();
  TrainingState state(config);
  fill_bank(state.bank, rng, 0.5);

  auto& mp = state.model.params();
  for (auto& [name, t] : mp.items()) {
    if (!name.starts_with("head.")) continue;
    for (double& w : t.mutable_data()) w = 0.1 * rng.normal();
  }

  StepBatch batch;
  const std::size_t n = 2, s = config.image_size;
  batch.source_images = ad::Tensor::from({n, 3, s, s}, random_uniform(n * 3 * s * s, rng, 0.0, 1.0));
  batch.target_images = ad::Tensor::from({n, 3, s, s}, random_uniform(n * 3 * s * s, rng, 0.0, 1.0));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<data::Annotation> gt;
    const auto objects = rng.uniform_int(1, 2);
    for (std::int64_t j = 0; j < objects; ++j) gt.push_back(random_box(rng, config.class_count));
    batch.source_targets.push_back(det::match_anchors(state.model.anchors(), gt));
  }
  batch.target_weights = random_uniform(n, rng, 1.0, std::exp(1.0));

  // parameters downstream of every gradient reversal point
  Inputs inputs;
  for (const char* name : {"head.lA.cls.bias", "head.lA.box.bias", "head.lB.cls.bias", "head.lB.box.bias"}) {
    inputs.push_back(mp.get(name));
  }
  inputs.push_back(state.image_discriminator.params().get("out.weight"));
  inputs.push_back(state.image_discriminator.params().get("out.bias"));
  inputs.push_back(state.pixel_discriminator.params().get("out.bias"));
  auto loss = [&](const Inputs&) { return step_objective(state, config, batch).objective; };
  return ad::grad_check(loss, inputs);
}

using CheckFn = ad::GradCheckResult (*)(Rng&);

CheckFn lookup(const std::string& name) {
  if (name == "mlc") return check_mlc;
  if (name == "dcbr") return check_dcbr;
  if (name == "pattern") return check_pattern;
  if (name == "pixel_adv") return check_pixel_adv;
  if (name == "jca") return check_jca;
  if (name == "pr") return check_pr;
  if (name == "total") return check_total;
  throw std::invalid_argument("unknown gradient check '" + name + "'");
}

}  // namespace

const std::vector<std::string>& gradient_check_names() {
  static const std::vector<std::string> names{"mlc", "dcbr", "pattern", "pixel_adv", "jca", "pr", "total"};
  return names;
}

GradientCheckSummary run_gradient_check(const std::string& name, std::size_t seeds, std::uint64_t first_seed) {
  const auto fn = lookup(name);
  const auto start = std::chrono::steady_clock::now();
  GradientCheckSummary summary;
  summary.name = name;
  summary.seeds = seeds;
  for (std::uint64_t seed = first_seed; seed < first_seed + seeds; ++seed) {
    Rng rng(seed);
    const auto r = fn(rng);
    if (r.max_relative_error >= summary.max_relative_error) {
      summary.max_relative_error = r.max_relative_error;
      summary.worst_seed = seed;
    }
  }
  summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return summary;
}

}  // namespace i3net::train
