#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

namespace i3net::train {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Config {
  // loss weights and adaptation hyperparameters
  double tau = 0.5;
  double theta = 0.5;
  double rho = 0.7;
  double gamma = 0.1;
  double temperature = 2.0;
  double lambda1 = 0.05;
  double lambda2 = 1.0;
  std::size_t fused_dim = 64;
  double margin = 1.0;
  double grl_beta = 1.0;

  // optimization
  double learning_rate = 1e-3;
  int lr_decay_epoch = -1;  // -1: 60% of epochs
  double lr_decay_factor = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t epochs = 10;
  std::size_t source_batch = 8;
  std::size_t target_batch = 8;
  std::uint64_t seed = 1;

  // multi-label classifier pretraining
  std::size_t mlc_epochs = 5;
  double mlc_learning_rate = 1e-2;

  // model
  std::size_t class_count = 3;
  std::size_t image_size = 64;

  // data
  std::filesystem::path source_dir;
  std::filesystem::path target_dir;
  std::filesystem::path test_dir;
  std::filesystem::path mlc_checkpoint;

  // ablation switches
  bool dcbr = true;
  bool copm = true;
  bool rjca = true;

  // Epoch index from which the decayed rate applies.
  std::size_t decay_epoch() const;

  // Throws ConfigError naming the first out-of-range field.
  void validate() const;
};

// `key = value` lines, '#' starts a comment. Unknown keys, duplicate keys and
// malformed values are rejected with the line number. Relative paths resolve
// against `base_dir`.
Config parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
Config load_config(const std::filesystem::path& file);

// Applies a comma-separated list such as "dcbr,rjca" of components to turn off.
void disable_components(Config& config, const std::string& list);

}  // namespace i3net::train
