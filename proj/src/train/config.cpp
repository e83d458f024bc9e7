#include "i3net/train/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace i3net::train {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError("cannot parse '" + v + "'");
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  throw ConfigError("expected true/false, got '" + v + "'");
}

using Setter = std::function<void(Config&, const std::string&, const std::filesystem::path&)>;

template <typename T>
Setter number(T Config::*field) {
  return [field](Config& c, const std::string& v, const std::filesystem::path&) {
    c.*field = parse_number<T>(v);
  };
}

Setter path(std::filesystem::path Config::*field) {
  return [field](Config& c, const std::string& v, const std::filesystem::path& base) {
    std::filesystem::path p(v);
    c.*field = p.is_relative() && !base.empty() ? base / p : p;
  };
}

Setter flag(bool Config::*field) {
  return [field](Config& c, const std::string& v, const std::filesystem::path&) { c.*field = parse_bool(v); };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"tau", number(&Config::tau)},
      {"theta", number(&Config::theta)},
      {"rho", number(&Config::rho)},
      {"gamma", number(&Config::gamma)},
      {"temperature", number(&Config::temperature)},
      {"lambda1", number(&Config::lambda1)},
      {"lambda2", number(&Config::lambda2)},
      {"fused_dim", number(&Config::fused_dim)},
      {"margin", number(&Config::margin)},
      {"grl_beta", number(&Config::grl_beta)},
      {"learning_rate", number(&Config::learning_rate)},
      {"lr_decay_epoch", number(&Config::lr_decay_epoch)},
      {"lr_decay_factor", number(&Config::lr_decay_factor)},
      {"momentum", number(&Config::momentum)},
      {"weight_decay", number(&Config::weight_decay)},
      {"epochs", number(&Config::epochs)},
      {"source_batch", number(&Config::source_batch)},
      {"target_batch", number(&Config::target_batch)},
      {"seed", number(&Config::seed)},
      {"mlc_epochs", number(&Config::mlc_epochs)},
      {"mlc_learning_rate", number(&Config::mlc_learning_rate)},
      {"class_count", number(&Config::class_count)},
      {"image_size", number(&Config::image_size)},
      {"source_dir", path(&Config::source_dir)},
      {"target_dir", path(&Config::target_dir)},
      {"test_dir", path(&Config::test_dir)},
      {"mlc_checkpoint", path(&Config::mlc_checkpoint)},
      {"dcbr", flag(&Config::dcbr)},
      {"copm", flag(&Config::copm)},
      {"rjca", flag(&Config::rjca)},
  };
  return table;
}

}  // namespace

std::size_t Config::decay_epoch() const {
  if (lr_decay_epoch >= 0) return static_cast<std::size_t>(lr_decay_epoch);
  return static_cast<std::size_t>(std::floor(0.6 * static_cast<double>(epochs)));
}

void Config::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("invalid config: ") + what);
  };
  require(tau > 0 && tau < 1, "tau must lie in (0, 1)");
  require(theta >= 0 && theta <= 1, "theta must lie in [0, 1]");
  require(rho >= 0 && rho < 1, "rho must lie in [0, 1)");
  require(gamma >= 0, "gamma must be nonnegative");
  require(temperature > 0, "temperature must be positive");
  require(lambda1 >= 0 && lambda2 >= 0, "lambda1 and lambda2 must be nonnegative");
  require(fused_dim > 0, "fused_dim must be positive");
  require(margin > 0, "margin must be positive");
  require(grl_beta >= 0, "grl_beta must be nonnegative");
  require(learning_rate > 0 && mlc_learning_rate > 0, "learning rates must be positive");
  require(lr_decay_factor > 0 && lr_decay_factor <= 1, "lr_decay_factor must lie in (0, 1]");
  require(lr_decay_epoch >= -1, "lr_decay_epoch must be -1 (auto) or an epoch index");
  require(momentum >= 0 && momentum < 1, "momentum must lie in [0, 1)");
  require(weight_decay >= 0, "weight_decay must be nonnegative");
  require(epochs > 0, "epochs must be positive");
  require(source_batch > 0 && target_batch > 0, "batch sizes must be positive");
  require(class_count > 0, "class_count must be positive");
  require(image_size > 0 && image_size % 16 == 0, "image_size must be a positive multiple of 16");
}

Config parse_config(const std::string& text, const std::filesystem::path& base_dir) {
  Config c;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string raw;
  for (std::size_t line_no = 1; std::getline(in, raw); ++line_no) {
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const auto where = "line " + std::to_string(line_no) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    const auto it = setters().find(key);
    if (it == setters().end()) throw ConfigError(where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    if (value.empty()) throw ConfigError(where + "missing value for '" + key + "'");
    try {
      it->second(c, value, base_dir);
    } catch (const ConfigError& e) {
      throw ConfigError(where + key + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

Config load_config(const std::filesystem::path& file) {
  std::ifstream f(file);
  if (!f) throw ConfigError("cannot read config " + file.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), file.parent_path());
}

void disable_components(Config& config, const std::string& list) {
  std::istringstream in(list);
  std::string name;
  while (std::getline(in, name, ',')) {
    name = trim(name);
    if (name == "dcbr") {
      config.dcbr = false;
    } else if (name == "copm") {
      config.copm = false;
    } else if (name == "rjca") {
      config.rjca = false;
    } else if (!name.empty()) {
      throw ConfigError("unknown component '" + name + "' (expected dcbr, copm or rjca)");
    }
  }
}

}  // namespace i3net::train
