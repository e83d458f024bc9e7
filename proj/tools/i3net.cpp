// Command-line front end: dataset synthesis, classifier pretraining, training,
// evaluation, gradient checks and attention-map export.

#include <spdlog/spdlog.h>

#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "i3net/copm/copm.hpp"
#include "i3net/data/dataset.hpp"
#include "i3net/train/config.hpp"
#include "i3net/train/gradient_suite.hpp"
#include "i3net/train/trainer.hpp"

namespace {

using namespace i3net;

constexpr double kGradTolerance = 1e-4;

std::vector<double> parse_frequencies(const std::string& text) {
  std::vector<double> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(std::stod(item));
  return out;
}

int run_synth(const std::string& out, const std::string& domain, std::size_t count, std::uint64_t seed,
              const std::string& freq, std::size_t size) {
  data::SceneSpec spec;
  spec.domain = data::parse_domain(domain);
  spec.seed = seed;
  spec.image_size = size;
  if (!freq.empty()) {
    spec.class_frequencies = parse_frequencies(freq);
    spec.class_count = spec.class_frequencies.size();
  }
  spec.validate();
  const auto set = data::write_dataset(out, spec, count);
  std::cout << "wrote " << set.size() << " " << domain << " images to " << out << "\n";
  return 0;
}

int run_pretrain(const std::string& config_file) {
  const auto config = train::load_config(config_file);
  if (config.mlc_checkpoint.empty()) throw train::ConfigError("pretrain-mlc needs mlc_checkpoint in the config");
  if (config.source_dir.empty() || !std::filesystem::is_directory(config.source_dir)) {
    throw train::ConfigError("source_dir " + config.source_dir.string() + " does not exist");
  }
  const auto source = data::read_dataset(config.source_dir);
  const auto result = train::pretrain_mlc(config, source);
  train::save_classifier(config.mlc_checkpoint, *result.classifier);
  std::cout << "mlc loss " << result.initial_loss << " -> " << result.final_loss << "\n"
            << "saved " << config.mlc_checkpoint.string() << "\n";
  return 0;
}

int run_train(const std::string& config_file, const std::string& out, const std::string& disable) {
  auto config = train::load_config(config_file);
  train::disable_components(config, disable);
  const auto inputs = train::load_inputs(config);
  const auto result = train::train(config, inputs, out);
  std::cout << "metrics " << result.metrics_file.string() << "\ncheckpoint " << result.final_checkpoint.string()
            << "\n";
  if (!config.test_dir.empty()) {
    const auto report = train::evaluate(result.final_checkpoint, data::read_dataset(config.test_dir));
    std::ofstream(std::filesystem::path(out) / "report.txt", std::ios::binary) << report.text;
    std::cout << report.text;
  }
  return 0;
}

int run_eval(const std::string& checkpoint, const std::string& dir) {
  std::cout << train::evaluate(checkpoint, data::read_dataset(dir)).text;
  return 0;
}

int run_gradcheck(const std::string& op, std::size_t seeds) {
  std::vector<std::string> names = op.empty() ? train::gradient_check_names() : std::vector<std::string>{op};
  bool ok = true;
  for (const auto& name : names) {
    const auto s = train::run_gradient_check(name, seeds);
    const bool pass = s.max_relative_error < kGradTolerance;
    ok = ok && pass;
    std::cout << (pass ? "PASS " : "FAIL ") << s.name << " seeds=" << s.seeds << " max_rel_err=" << s.max_relative_error
              << " worst_seed=" << s.worst_seed << " time=" << s.seconds << "s\n";
  }
  return ok ? 0 : 1;
}

int run_export(const std::string& checkpoint, const std::string& image, const std::string& out) {
  const auto map = train::attention_for_image(checkpoint, data::read_ppm(image));
  copm::write_pgm(out, map);
  std::cout << "wrote " << map.dim(0) << "x" << map.dim(1) << " attention map to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Domain-adaptive one-stage detection on synthetic shapes"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Log progress");

  std::string out, domain = "source", freq, config_file, disable, checkpoint, data_dir, op, image;
  std::size_t count = 100, size = 64, seeds = 100;
  std::uint64_t seed = 0;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset directory");
  synth->add_option("--out", out, "Output directory")->required();
  synth->add_option("--domain", domain, "source or target")->check(CLI::IsMember({"source", "target"}));
  synth->add_option("--count", count, "Number of images");
  synth->add_option("--seed", seed, "Generator seed");
  synth->add_option("--freq", freq, "Comma-separated class frequencies, e.g. 0.6,0.3,0.1");
  synth->add_option("--size", size, "Image side in pixels");

  auto* pretrain = app.add_subcommand("pretrain-mlc", "Pretrain the multi-label classifier on the source set");
  pretrain->add_option("--config", config_file, "Config file")->required()->check(CLI::ExistingFile);

  auto* train_cmd = app.add_subcommand("train", "Train the detector");
  train_cmd->add_option("--config", config_file, "Config file")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", out, "Run directory")->required();
  train_cmd->add_option("--disable", disable, "Components to switch off: dcbr,copm,rjca");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference checks of the training losses");
  grad->add_option("--op", op, "One of mlc, dcbr, pattern, pixel_adv, jca, pr, total");
  grad->add_option("--seeds", seeds, "Random instances per loss");

  auto* attention = app.add_subcommand("export-attention", "Write the fused attention map of one image");
  attention->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  attention->add_option("--image", image, "PPM image")->required()->check(CLI::ExistingFile);
  attention->add_option("--out", out, "Output PGM file")->required();

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(verbose ? spdlog::level::info : spdlog::level::warn);

  try {
    if (*synth) return run_synth(out, domain, count, seed, freq, size);
    if (*pretrain) return run_pretrain(config_file);
    if (*train_cmd) return run_train(config_file, out, disable);
    if (*eval) return run_eval(checkpoint, data_dir);
    if (*grad) {
      // degenerate random instances are expected here; keep the report readable
      if (!verbose) spdlog::set_level(spdlog::level::err);
      return run_gradcheck(op, seeds);
    }
    if (*attention) return run_export(checkpoint, image, out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
