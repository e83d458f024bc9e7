#include "i3net/rjca/rjca.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <numeric>
#include <stdexcept>

#include "i3net/autodiff/ops.hpp"

namespace i3net::rjca {

namespace {

bool is_power_of_ten(std::uint64_t n) {
  while (n % 10 == 0 && n > 1) n /= 10;
  return n == 1;
}

}  // namespace

PrototypeBank::PrototypeBank(std::vector<std::size_t> layer_channels, std::size_t class_count, double rho)
    : channels_(std::move(layer_channels)), class_count_(class_count), rho_(rho) {
  if (!(rho >= 0 && rho < 1)) throw std::invalid_argument("PrototypeBank: rho must lie in [0, 1)");
  const std::size_t entries = 2 * channels_.size() * class_count_;
  values_.resize(entries);
  initialized_.assign(entries, false);
}

std::size_t PrototypeBank::index(Side side, std::size_t layer, std::size_t k) const {
  if (layer >= channels_.size() || k >= class_count_) {
    throw std::out_of_range("PrototypeBank: no entry for layer " + std::to_string(layer) + ", class " + std::to_string(k));
  }
  return (static_cast<std::size_t>(side) * channels_.size() + layer) * class_count_ + k;
}

bool PrototypeBank::initialized(Side side, std::size_t layer, std::size_t k) const {
  return initialized_[index(side, layer, k)];
}

const std::vector<double>& PrototypeBank::value(Side side, std::size_t layer, std::size_t k) const {
  const std::size_t i = index(side, layer, k);
  if (!initialized_[i]) throw std::logic_error("PrototypeBank: reading an uninitialized prototype");
  return values_[i];
}

void PrototypeBank::set(Side side, std::size_t layer, std::size_t k, std::vector<double> value) {
  const std::size_t i = index(side, layer, k);
  if (value.size() != channels_[layer]) {
    throw ad::ShapeError("PrototypeBank: layer " + std::to_string(layer) + " expects " +
                         std::to_string(channels_[layer]) + " channels, got " + std::to_string(value.size()));
  }
  values_[i] = std::move(value);
  initialized_[i] = true;
}

PixelLabels source_pixel_labels(const det::AnchorGrid& anchors, std::size_t layer,
                                const std::vector<det::AnchorTargets>& targets) {
  const std::size_t cells = anchors.grids.at(layer) * anchors.grids.at(layer);
  const std::size_t a = anchors.anchors_per_cell, first = anchors.offsets.at(layer);
  PixelLabels labels(targets.size() * cells, -1);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    for (std::size_t m = 0; m < cells; ++m) {
      for (std::size_t j = 0; j < a; ++j) {
        const int l = targets[i].labels.at(first + m * a + j);
        if (l > 0) {
          labels[i * cells + m] = l - 1;
          break;
        }
      }
    }
  }
  return labels;
}

PixelLabels target_pixel_labels(const det::HeadOutput& head, std::size_t anchors_per_cell, double threshold) {
  ad::NoGradGuard guard;
  const std::size_t n = head.logits.dim(0), anchors = head.logits.dim(1), classes = head.logits.dim(2);
  const std::size_t cells = anchors / anchors_per_cell;
  const auto p = ad::softmax(head.logits);
  const auto v = p.data();
  PixelLabels labels(n * cells, -1);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t m = 0; m < cells; ++m) {
      for (std::size_t j = 0; j < anchors_per_cell; ++j) {
        const double* row = v.data() + (i * anchors + m * anchors_per_cell + j) * classes;
        const auto best = static_cast<std::size_t>(std::max_element(row, row + classes) - row);
        if (best > 0 && row[best] > threshold) {
          labels[i * cells + m] = static_cast<int>(best) - 1;
          break;
        }
      }
    }
  }
  return labels;
}

ClassVectors local_prototypes(const ad::Tensor& features, const PixelLabels& labels, std::size_t class_count) {
  if (features.rank() != 4) throw ad::ShapeError("local_prototypes: expected N x C x H x W features");
  const std::size_t n = features.dim(0), c = features.dim(1), hw = features.dim(2) * features.dim(3);
  if (labels.size() != n * hw) {
    throw ad::ShapeError("local_prototypes: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n * hw) + " positions");
  }
  std::vector<std::size_t> counts(class_count, 0);
  for (int l : labels) {
    if (l >= static_cast<int>(class_count)) throw std::out_of_range("local_prototypes: label out of range");
    if (l >= 0) ++counts[static_cast<std::size_t>(l)];
  }
  ClassVectors out(class_count);
  if (std::all_of(counts.begin(), counts.end(), [](std::size_t x) { return x == 0; })) return out;

  // class-averaging matrix K x M applied to the M x C feature rows
  std::vector<double> select(class_count * labels.size(), 0.0);
  for (std::size_t m = 0; m < labels.size(); ++m) {
    if (labels[m] < 0) continue;
    const auto k = static_cast<std::size_t>(labels[m]);
    select[k * labels.size() + m] = 1.0 / static_cast<double>(counts[k]);
  }
  auto rows = ad::reshape(ad::permute(features, {0, 2, 3, 1}), {n * hw, c});
  auto means = ad::matmul(ad::Tensor::from({class_count, labels.size()}, std::move(select)), rows);
  for (std::size_t k = 0; k < class_count; ++k) {
    if (counts[k] > 0) out[k] = ad::reshape(ad::slice(means, 0, k, k + 1), {c});
  }
  return out;
}

ad::Tensor ema_update(const ad::Tensor& global, const ad::Tensor& local, double rho) {
  if (!(rho >= 0 && rho < 1)) throw std::invalid_argument("ema_update: rho must lie in [0, 1)");
  return ad::add(ad::scale(global, rho), ad::scale(local, 1.0 - rho));
}

ClassVectors compose_globals(const PrototypeBank& bank, Side side, std::size_t layer, const ClassVectors& locals) {
  ClassVectors out(bank.class_count());
  for (std::size_t k = 0; k < bank.class_count(); ++k) {
    const bool have_local = k < locals.size() && locals[k].has_value();
    if (bank.initialized(side, layer, k)) {
      const auto& v = bank.value(side, layer, k);
      auto stored = ad::Tensor::from({v.size()}, v);
      out[k] = have_local ? ema_update(stored, *locals[k], bank.rho()) : stored;
    } else if (have_local) {
      out[k] = *locals[k];
    }
  }
  return out;
}

void commit_globals(PrototypeBank& bank, Side side, std::size_t layer, const ClassVectors& globals) {
  for (std::size_t k = 0; k < globals.size(); ++k) {
    if (globals[k]) bank.set(side, layer, k, {globals[k]->data().begin(), globals[k]->data().end()});
  }
}

void source_global_prototypes(PrototypeBank& bank, const det::DetectionModel& model, const data::Dataset& source,
                              std::size_t batch_size) {
  ad::NoGradGuard guard;
  const std::size_t layers = bank.layer_count(), k_count = bank.class_count();
  std::vector<std::vector<double>> sums(layers * k_count);
  std::vector<std::size_t> counts(layers * k_count, 0);
  for (std::size_t l = 0; l < layers; ++l)
    for (std::size_t k = 0; k < k_count; ++k) sums[l * k_count + k].assign(bank.channels(l), 0.0);

  for (std::size_t start = 0; start < source.size(); start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, source.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    std::vector<det::AnchorTargets> targets;
    for (std::size_t i : idx) targets.push_back(det::match_anchors(model.anchors(), source.scenes[i].annotations));
    const auto fwd = model.forward(data::stack_images(source, idx));
    for (std::size_t l = 0; l < layers; ++l) {
      const auto& feat = fwd.layers[l];
      const std::size_t c = feat.dim(1), hw = feat.dim(2) * feat.dim(3);
      const auto labels = source_pixel_labels(model.anchors(), l, targets);
      const auto v = feat.data();
      for (std::size_t p = 0; p < labels.size(); ++p) {
        if (labels[p] < 0) continue;
        const std::size_t i = p / hw, m = p % hw, k = static_cast<std::size_t>(labels[p]);
        auto& s = sums[l * k_count + k];
        for (std::size_t ch = 0; ch < c; ++ch) s[ch] += v[(i * c + ch) * hw + m];
        ++counts[l * k_count + k];
      }
    }
  }
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t k = 0; k < k_count; ++k) {
      const std::size_t n = counts[l * k_count + k];
      if (n == 0) continue;
      auto mean = sums[l * k_count + k];
      for (double& x : mean) x /= static_cast<double>(n);
      bank.set(Side::kSource, l, k, std::move(mean));
    }
  }
}

ad::Tensor jca_loss(const std::vector<ClassVectors>& source_globals, const std::vector<ClassVectors>& target_globals,
                    double margin) {
  if (source_globals.size() != target_globals.size()) throw std::invalid_argument("jca_loss: layer count mismatch");
  std::optional<ad::Tensor> total;
  auto accumulate = [&](const ad::Tensor& term) { total = total ? ad::add(*total, term) : term; };
  bool any_layer = false;
  for (std::size_t l = 0; l < source_globals.size(); ++l) {
    const auto& s = source_globals[l];
    const auto& t = target_globals[l];
    const std::size_t k_count = std::min(s.size(), t.size());
    std::size_t paired = 0;
    for (std::size_t k = 0; k < k_count; ++k) paired += s[k] && t[k];
    if (paired < 2) continue;
    any_layer = true;
    for (std::size_t k = 0; k < k_count; ++k) {
      if (s[k] && t[k]) accumulate(ad::sum(ad::square(ad::sub(*s[k], *t[k]))));
    }
    for (std::size_t m = 0; m < k_count; ++m) {
      for (std::size_t n = 0; n < k_count; ++n) {
        if (m == n || !s[m] || !t[n]) continue;
        auto gap = ad::relu(ad::add_scalar(ad::neg(ad::l2_norm(ad::sub(*s[m], *t[n]))), margin));
        accumulate(ad::square(gap));
      }
    }
  }
  if (!any_layer) {
    // logged at the 1st, 10th, 100th, ... occurrence; it recurs every step early in training
    static std::atomic<std::uint64_t> occurrences{0};
    const auto n = ++occurrences;
    if (is_power_of_ten(n)) {
      spdlog::warn("jca_loss: fewer than two classes initialized in both domains, contributing 0 (occurrence {})", n);
    }
    return ad::Tensor::scalar(0.0);
  }
  return *total;
}

ad::Tensor symmetric_kl(const ad::Tensor& log_pa, const ad::Tensor& log_pb) {
  if (log_pa.shape() != log_pb.shape()) throw ad::ShapeError("symmetric_kl: distributions differ in shape");
  // KL(a||b) + KL(b||a) = sum (p_a - p_b)(log p_a - log p_b)
  auto d = ad::mul(ad::sub(ad::exp(log_pa), ad::exp(log_pb)), ad::sub(log_pa, log_pb));
  return ad::scale(ad::sum(d), 0.5);
}

ad::Tensor pr_loss(const std::vector<ClassVectors>& target_globals, const HeadFn& head, double temperature,
                   std::size_t class_count) {
  if (!(temperature > 0)) throw std::invalid_argument("pr_loss: temperature must be positive");
  if (class_count == 0) throw std::invalid_argument("pr_loss: class_count must be positive");
  std::optional<ad::Tensor> total;
  for (std::size_t a = 0; a < target_globals.size(); ++a) {
    for (std::size_t b = a + 1; b < target_globals.size(); ++b) {
      for (std::size_t k = 0; k < class_count; ++k) {
        if (k >= target_globals[a].size() || k >= target_globals[b].size()) continue;
        if (!target_globals[a][k] || !target_globals[b][k]) continue;
        auto la = ad::log_softmax(head(a, *target_globals[a][k]), temperature);
        auto lb = ad::log_softmax(head(b, *target_globals[b][k]), temperature);
        auto term = symmetric_kl(la, lb);
        total = total ? ad::add(*total, term) : term;
      }
    }
  }
  if (!total) return ad::Tensor::scalar(0.0);
  return ad::scale(*total, 1.0 / static_cast<double>(class_count));
}

ad::Tensor rjca_loss(const ad::Tensor& l_jca, const ad::Tensor& l_pr, double gamma) {
  return ad::add(l_jca, ad::scale(l_pr, gamma));
}

}  // namespace i3net::rjca
