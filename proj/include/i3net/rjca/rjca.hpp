#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "i3net/autodiff/tensor.hpp"
#include "i3net/data/dataset.hpp"
#include "i3net/detector/loss.hpp"
#include "i3net/detector/model.hpp"

namespace i3net::rjca {

enum class Side { kSource = 0, kTarget = 1 };

inline constexpr double kPseudoLabelThreshold = 0.5;

// Global class prototypes per (domain, layer, class). Values are plain data:
// they never carry gradient between steps.
class PrototypeBank {
 public:
  PrototypeBank(std::vector<std::size_t> layer_channels, std::size_t class_count, double rho);

  bool initialized(Side side, std::size_t layer, std::size_t k) const;
  const std::vector<double>& value(Side side, std::size_t layer, std::size_t k) const;
  void set(Side side, std::size_t layer, std::size_t k, std::vector<double> value);

  std::size_t layer_count() const { return channels_.size(); }
  std::size_t channels(std::size_t layer) const { return channels_.at(layer); }
  std::size_t class_count() const { return class_count_; }
  double rho() const { return rho_; }

 private:
  std::size_t index(Side side, std::size_t layer, std::size_t k) const;

  std::vector<std::size_t> channels_;
  std::size_t class_count_;
  double rho_;
  std::vector<std::vector<double>> values_;
  std::vector<bool> initialized_;
};

// Class per spatial position (-1 = unlabeled), positions ordered image-major
// then y * W + x.
using PixelLabels = std::vector<int>;

// Source labeling of one layer from anchor targets: a cell takes the class of
// its first positive anchor.
PixelLabels source_pixel_labels(const det::AnchorGrid& anchors, std::size_t layer,
                                const std::vector<det::AnchorTargets>& targets);

// Target pseudo-labels: the cell's foreground argmax class when its
// probability exceeds `threshold`. With several anchors per cell the first
// qualifying anchor wins.
PixelLabels target_pixel_labels(const det::HeadOutput& head, std::size_t anchors_per_cell,
                                double threshold = kPseudoLabelThreshold);

// Per-class means of labeled positions of `features` (N x C x H x W), as
// differentiable C-vectors. Classes without labeled positions are empty.
using ClassVectors = std::vector<std::optional<ad::Tensor>>;
ClassVectors local_prototypes(const ad::Tensor& features, const PixelLabels& labels, std::size_t class_count);

// rho * global + (1 - rho) * local.
ad::Tensor ema_update(const ad::Tensor& global, const ad::Tensor& local, double rho);

// Globals after this step's update, still connected to the local prototypes:
// EMA where both exist, the local itself on first sight, the stored constant
// otherwise.
ClassVectors compose_globals(const PrototypeBank& bank, Side side, std::size_t layer, const ClassVectors& locals);

// Stores the detached values of `globals` in the bank.
void commit_globals(PrototypeBank& bank, Side side, std::size_t layer, const ClassVectors& globals);

// Full-set source prototypes with the current model (no gradient). Classes
// without positive positions stay uninitialized.
void source_global_prototypes(PrototypeBank& bank, const det::DetectionModel& model, const data::Dataset& source,
                              std::size_t batch_size = 32);

// Sum over layers of squared distances of same-class source/target globals
// plus squared hinges max(0, margin - |s_m - t_n|)^2 over m != n. Returns 0
// with a warning when no layer has two classes initialized in both domains.
ad::Tensor jca_loss(const std::vector<ClassVectors>& source_globals, const std::vector<ClassVectors>& target_globals,
                    double margin = 1.0);

// 0.5 * (KL(a||b) + KL(b||a)) for two log-probability vectors.
ad::Tensor symmetric_kl(const ad::Tensor& log_pa, const ad::Tensor& log_pb);

// Classification head of a layer applied to a single feature vector.
using HeadFn = std::function<ad::Tensor(std::size_t layer, const ad::Tensor& feature)>;

// Sum over unordered layer pairs and classes initialized in both layers of the
// symmetric KL between head predictions at temperature T, divided by K.
ad::Tensor pr_loss(const std::vector<ClassVectors>& target_globals, const HeadFn& head, double temperature,
                   std::size_t class_count);

ad::Tensor rjca_loss(const ad::Tensor& l_jca, const ad::Tensor& l_pr, double gamma);

}  // namespace i3net::rjca
