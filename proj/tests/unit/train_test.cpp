#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "i3net/autodiff/ops.hpp"
#include "i3net/data/dataset.hpp"
#include "i3net/data/rng.hpp"
#include "i3net/train/config.hpp"
#include "i3net/train/optimizer.hpp"
#include "i3net/train/trainer.hpp"
#include "json.hpp"

using namespace i3net;
using namespace i3net::train;

namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("i3net_train_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_file(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<nlohmann::json> read_metrics(const fs::path& file) {
  std::vector<nlohmann::json> lines;
  std::ifstream in(file);
  for (std::string line; std::getline(in, line);) lines.push_back(nlohmann::json::parse(line));
  return lines;
}

data::Dataset make_set(data::Domain domain, std::size_t count, std::uint64_t seed) {
  data::SceneSpec spec;
  spec.domain = domain;
  spec.seed = seed;
  if (domain == data::Domain::kTarget) spec.class_frequencies = {0.6, 0.3, 0.1};
  return data::generate_dataset(spec, count);
}

// Two short epochs on a dozen images per domain.
Config small_config() {
  Config c;
  c.epochs = 2;
  c.source_batch = 4;
  c.target_batch = 4;
  c.mlc_epochs = 1;
  c.learning_rate = 1e-2;
  c.seed = 7;
  return c;
}

const TrainInputs& small_inputs() {
  static const TrainInputs inputs{make_set(data::Domain::kSource, 12, 11), make_set(data::Domain::kTarget, 12, 12)};
  return inputs;
}

LossBreakdown breakdown(double det, double dcbr, double la, double adv, double jca, double pr) {
  LossBreakdown b;
  b.l_det = det;
  b.l_dcbr = dcbr;
  b.l_la = la;
  b.l_adv = adv;
  b.l_jca = jca;
  b.l_pr = pr;
  return b;
}

}  // namespace

// ---- configuration

TEST(Config, DefaultsAndValidation) {
  Config c;
  EXPECT_EQ(c.tau, 0.5);
  EXPECT_EQ(c.theta, 0.5);
  EXPECT_EQ(c.rho, 0.7);
  EXPECT_EQ(c.gamma, 0.1);
  EXPECT_EQ(c.temperature, 2.0);
  EXPECT_EQ(c.lambda1, 0.05);
  EXPECT_EQ(c.lambda2, 1.0);
  EXPECT_EQ(c.fused_dim, 64u);
  EXPECT_EQ(c.learning_rate, 1e-3);
  EXPECT_EQ(c.momentum, 0.9);
  EXPECT_EQ(c.weight_decay, 5e-4);
  EXPECT_TRUE(c.dcbr && c.copm && c.rjca);
  EXPECT_NO_THROW(c.validate());
  c.epochs = 10;
  EXPECT_EQ(c.decay_epoch(), 6u);
  c.lr_decay_epoch = 3;
  EXPECT_EQ(c.decay_epoch(), 3u);

  auto bad = [](auto mutate) {
    Config c;
    mutate(c);
    return c;
  };
  EXPECT_THROW(bad([](Config& c) { c.tau = 1.0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](Config& c) { c.theta = 1.5; }).validate(), ConfigError);
  EXPECT_THROW(bad([](Config& c) { c.learning_rate = 0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](Config& c) { c.rho = 1.0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](Config& c) { c.lambda1 = -1; }).validate(), ConfigError);
  EXPECT_THROW(bad([](Config& c) { c.image_size = 40; }).validate(), ConfigError);
}

TEST(Config, ParsesKeyValueLinesWithComments) {
  const auto c = parse_config(
      "# experiment\n"
      "tau = 0.4\n"
      "  epochs=12   # trailing comment\n"
      "\n"
      "copm = off\n"
      "source_dir = data/src\n"
      "target_dir = /abs/tgt\n",
      "/base");
  EXPECT_EQ(c.tau, 0.4);
  EXPECT_EQ(c.epochs, 12u);
  EXPECT_FALSE(c.copm);
  EXPECT_TRUE(c.dcbr);
  EXPECT_EQ(c.source_dir, fs::path("/base/data/src"));
  EXPECT_EQ(c.target_dir, fs::path("/abs/tgt"));
}

TEST(Config, RejectsMalformedInputWithLineNumbers) {
  auto message = [](const std::string& text) {
    try {
      parse_config(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_NE(message("tau = 0.5\nbogus = 1\n").find("line 2: unknown key 'bogus'"), std::string::npos);
  EXPECT_NE(message("tau = 0.5\ntau = 0.6\n").find("line 2: duplicate key 'tau'"), std::string::npos);
  EXPECT_NE(message("epochs = ten\n").find("line 1: epochs"), std::string::npos);
  EXPECT_NE(message("tau\n").find("line 1"), std::string::npos);
  EXPECT_NE(message("tau =\n").find("missing value"), std::string::npos);
  EXPECT_NE(message("dcbr = maybe\n").find("line 1: dcbr"), std::string::npos);
  EXPECT_NE(message("theta = 2\n").find("theta"), std::string::npos);
}

TEST(Config, DisableComponents) {
  Config c;
  disable_components(c, "dcbr, rjca");
  EXPECT_FALSE(c.dcbr);
  EXPECT_TRUE(c.copm);
  EXPECT_FALSE(c.rjca);
  disable_components(c, "");
  EXPECT_TRUE(c.copm);
  EXPECT_THROW(disable_components(c, "dcbr,bogus"), ConfigError);
}

// ---- objective bookkeeping

TEST(TotalLoss, ReferenceValues) {
  // det = 1, dcbr = 2, copm = 3, rjca = 4 with the default weights
  EXPECT_NEAR(total_loss(breakdown(1, 2, 3, 0, 4, 0), 0.05, 1.0, 0.1), 8.1, 1e-12);
  EXPECT_EQ(total_loss(breakdown(1.5, 2, 3, 4, 5, 6), 0, 0, 0.1), 1.5);
  EXPECT_EQ(total_loss(breakdown(0, 0, 0, 0, 0, 0), 0.05, 1.0, 0.1), 0.0);
}

TEST(TotalLoss, MatchesOracleOnRandomComponents) {
  Rng rng(21);
  for (int c = 0; c < 60; ++c) {
    const auto b = breakdown(rng.uniform(0, 5), rng.uniform(0, 5), rng.uniform(0, 5), rng.uniform(0, 5),
                             rng.uniform(0, 5), rng.uniform(0, 5));
    const double l1 = rng.uniform(0, 1), l2 = rng.uniform(0, 2), g = rng.uniform(0, 1);
    const double oracle = b.l_det + l1 * b.l_dcbr + l2 * b.l_la + l2 * b.l_adv + l2 * b.l_jca + l2 * g * b.l_pr;
    EXPECT_NEAR(total_loss(b, l1, l2, g), oracle, 1e-9);
  }
}

TEST(TotalLoss, NanComponentIsNamed) {
  auto b = breakdown(1, 1, 1, 1, 1, 1);
  b.l_jca = std::numeric_limits<double>::quiet_NaN();
  try {
    total_loss(b, 0.05, 1, 0.1);
    FAIL() << "expected an error";
  } catch (const std::domain_error& e) {
    EXPECT_NE(std::string(e.what()).find("l_jca"), std::string::npos);
  }
}

TEST(Metrics, OneObjectPerLineWithFixedFieldOrder) {
  auto b = breakdown(1, 2, 3, 4, 5, 6);
  b.step = 3;
  b.total = 9.5;
  const auto line = metrics_line(b);
  EXPECT_EQ(line.find('\n'), std::string::npos);
  const auto j = nlohmann::ordered_json::parse(line);
  std::vector<std::string> keys;
  for (const auto& [k, v] : j.items()) keys.push_back(k);
  EXPECT_EQ(keys, (std::vector<std::string>{"step", "epoch", "l_det", "l_mlc", "l_dcbr", "l_la", "l_adv", "l_jca",
                                            "l_pr", "total"}));
  EXPECT_EQ(j["total"].get<double>(), 9.5);
  EXPECT_TRUE(nlohmann::json::parse(metrics_line(b, 1.25)).contains("wall_s"));
}

// ---- optimizer

TEST(Sgd, MomentumAndWeightDecayUpdate) {
  nn::ParameterSet params;
  auto w = params.add("w", ad::Tensor::from({2}, {1.0, -2.0}, true));
  auto unused = params.add("unused", ad::Tensor::from({1}, {3.0}, true));
  Sgd opt({&params}, 0.9, 0.1);
  const double lr = 0.5;

  auto step = [&] {
    opt.zero_grad();
    ad::sum(ad::square(w)).backward();  // gradient 2w
    opt.step(lr);
  };
  step();
  // v1 = 2w + 0.1w = 2.1w ; w1 = w - 0.5 v1
  const std::vector<double> v1{2.1, -4.2}, w1{1 - 0.5 * 2.1, -2 + 0.5 * 4.2};
  EXPECT_DOUBLE_EQ(w.data()[0], w1[0]);
  EXPECT_DOUBLE_EQ(w.data()[1], w1[1]);
  step();
  for (int i = 0; i < 2; ++i) {
    const double v2 = 0.9 * v1[i] + 2.1 * w1[i];
    EXPECT_DOUBLE_EQ(w.data()[i], w1[i] - 0.5 * v2);
  }
  EXPECT_EQ(unused.data()[0], 3.0);  // never received a gradient
}

// ---- classifier pretraining

TEST(PretrainMlc, RejectsEmptySource) {
  EXPECT_THROW(pretrain_mlc(small_config(), data::Dataset{}), std::invalid_argument);
}

TEST(PretrainMlc, ReducesLossDeterministicallyAndFreezes) {
  auto config = small_config();
  config.mlc_epochs = 4;
  const auto& source = small_inputs().source;
  const auto a = pretrain_mlc(config, source);
  const auto b = pretrain_mlc(config, source);
  EXPECT_LT(a.final_loss, a.initial_loss);
  EXPECT_TRUE(a.classifier->frozen());
  EXPECT_EQ(a.classifier->params().snapshot(), b.classifier->params().snapshot());

  const auto dir = scratch_dir("mlc");
  save_classifier(dir / "mlc.ckpt", *a.classifier);
  const auto loaded = load_classifier(dir / "mlc.ckpt", config);
  EXPECT_EQ(loaded->params().snapshot(), a.classifier->params().snapshot());
}

// ---- training loop

TEST(Train, IdenticalRunsProduceIdenticalFiles) {
  const auto config = small_config();
  TrainOptions options;
  options.record_wall_clock = false;
  const auto dir = scratch_dir("determinism");
  const auto a = train::train(config, small_inputs(), dir / "a", options);
  const auto b = train::train(config, small_inputs(), dir / "b", options);
  EXPECT_EQ(read_file(a.metrics_file), read_file(b.metrics_file));
  EXPECT_EQ(read_file(a.final_checkpoint), read_file(b.final_checkpoint));
  EXPECT_EQ(read_file(dir / "a" / "epoch_000.ckpt"), read_file(dir / "b" / "epoch_000.ckpt"));
  EXPECT_EQ(read_metrics(a.metrics_file).size(), 6u);  // 2 epochs x 12 / 4
}

TEST(Train, MetricsTotalsRecombineAndWallClockIsRecorded) {
  const auto config = small_config();
  const auto result = train::train(config, small_inputs(), scratch_dir("identity"));
  const auto lines = read_metrics(result.metrics_file);
  ASSERT_EQ(lines.size(), result.history.size());
  for (const auto& j : lines) {
    EXPECT_TRUE(j.contains("wall_s"));
    const auto b = breakdown(j["l_det"], j["l_dcbr"], j["l_la"], j["l_adv"], j["l_jca"], j["l_pr"]);
    EXPECT_NEAR(j["total"].get<double>(), total_loss(b, config.lambda1, config.lambda2, config.gamma), 1e-9);
    EXPECT_GT(j["l_mlc"].get<double>(), 0.0);
    EXPECT_GT(j["l_la"].get<double>(), 0.0);
  }
}

TEST(Train, DisabledComponentsReportZeroColumns) {
  struct Case {
    const char* disable;
    std::vector<const char*> zero;
  };
  const std::vector<Case> cases{{"dcbr", {"l_dcbr", "l_mlc"}},
                                {"copm", {"l_la", "l_adv"}},
                                {"rjca", {"l_jca", "l_pr"}},
                                {"dcbr,copm,rjca", {"l_dcbr", "l_mlc", "l_la", "l_adv", "l_jca", "l_pr"}}};
  for (const auto& c : cases) {
    auto config = small_config();
    config.epochs = 1;
    disable_components(config, c.disable);
    const auto result = train::train(config, small_inputs(), scratch_dir("ablation"));
    for (const auto& j : read_metrics(result.metrics_file)) {
      for (const char* column : c.zero) EXPECT_EQ(j[column].get<double>(), 0.0) << c.disable << " " << column;
    }
  }
}

TEST(Train, FrozenClassifierIsUntouchedByAdaptation) {
  auto config = small_config();
  config.epochs = 1;
  const auto mlc = pretrain_mlc(config, small_inputs().source);
  const auto before = mlc.classifier->params().snapshot();
  TrainOptions options;
  options.classifier = mlc.classifier.get();
  train::train(config, small_inputs(), scratch_dir("frozen"), options);
  EXPECT_EQ(mlc.classifier->params().snapshot(), before);
}

TEST(Train, RejectsMissingInputs) {
  auto config = small_config();
  EXPECT_THROW(train::train(config, TrainInputs{}, scratch_dir("missing")), std::invalid_argument);
  EXPECT_THROW(train::train(config, TrainInputs{small_inputs().source, {}}, scratch_dir("missing")), std::invalid_argument);
  config.source_dir = "/nonexistent/i3net/source";
  EXPECT_THROW(load_inputs(config), ConfigError);
}

TEST(Train, NanLossAbortsWithBreakdown) {
  auto config = small_config();
  disable_components(config, "dcbr,copm,rjca");
  config.learning_rate = 1e30;
  try {
    train::train(config, small_inputs(), scratch_dir("nan"));
    FAIL() << "expected training to abort";
  } catch (const std::runtime_error& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("NaN"), std::string::npos);
    EXPECT_NE(what.find("\"l_det\""), std::string::npos);
  }
}

// ---- evaluation and checkpoints

TEST(Evaluate, CheckpointRoundTripIsBitIdentical) {
  const auto result = train::train(small_config(), small_inputs(), scratch_dir("roundtrip"));
  const auto& test = small_inputs().target;
  const auto in_memory = evaluate(result.state->model, test);
  const auto from_file = evaluate(result.final_checkpoint, test);
  EXPECT_EQ(in_memory.map.mean_ap, from_file.map.mean_ap);
  EXPECT_EQ(in_memory.map.average_precision, from_file.map.average_precision);
  EXPECT_EQ(in_memory.text, from_file.text);
  EXPECT_EQ(evaluate(result.final_checkpoint, test).text, from_file.text);

  const auto loaded = load_detector(result.final_checkpoint);
  EXPECT_EQ(loaded.model->params().snapshot(), result.state->model.params().snapshot());
  EXPECT_EQ(loaded.epoch, 1u);
  const auto& r1 = det::find_array(loaded.arrays, "copm.r1");
  EXPECT_EQ(r1.values, std::vector<double>(result.state->projections.r1.data().begin(),
                                           result.state->projections.r1.data().end()));
}

TEST(Evaluate, RejectsOtherFormatVersions) {
  const auto dir = scratch_dir("version");
  TrainingState state(small_config());
  save_training_checkpoint(dir / "v.ckpt", state, nullptr, 0);
  auto bytes = read_file(dir / "v.ckpt");
  bytes[4] = 2;  // version word follows the 4-byte magic
  std::ofstream(dir / "v.ckpt", std::ios::binary) << bytes;
  try {
    evaluate(dir / "v.ckpt", small_inputs().target);
    FAIL() << "expected a version error";
  } catch (const det::CheckpointError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("version 2"), std::string::npos);
    EXPECT_NE(what.find("expected 1"), std::string::npos);
  }
}

TEST(Evaluate, UntrainedModelIsNearChance) {
  const auto test = make_set(data::Domain::kTarget, 40, 99);
  TrainingState state(small_config());
  const auto report = evaluate(state.model, test);
  EXPECT_LT(report.map.mean_ap, 0.05);
  EXPECT_EQ(report.images, 40u);
  EXPECT_NE(report.text.find("mAP@0.5"), std::string::npos);
}

TEST(Attention, ExportedMapMatchesLowTapGrid) {
  const auto dir = scratch_dir("attention");
  TrainingState state(small_config());
  save_training_checkpoint(dir / "a.ckpt", state, nullptr, 0);
  const auto map = attention_for_image(dir / "a.ckpt", small_inputs().target.scenes[0].image);
  ASSERT_EQ(map.shape(), (ad::Shape{16, 16}));
  for (double v : map.data()) EXPECT_GE(v, 0.0);
}
