#include "i3net/dcbr/dcbr.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "i3net/autodiff/ops.hpp"

namespace i3net::dcbr {

MultiLabelClassifier::MultiLabelClassifier(const det::DetectorConfig& config, std::uint64_t seed)
    : extractor_(config), class_count_(config.class_count) {
  // only the g1 path of the extractor is used
  for (const auto& [name, t] : extractor_.params().items()) {
    if (name.starts_with("backbone.block1.") || name.starts_with("backbone.block2.") ||
        name.starts_with("backbone.block3.")) {
      params_.add("extractor." + name, t);
    }
  }
  Rng rng(seed);
  fc_ = nn::make_linear(params_, "fc", extractor_.layer_channels(), class_count_, rng, 0.01);
}

ad::Tensor MultiLabelClassifier::predict_from_g1(const ad::Tensor& g1) const {
  return ad::sigmoid(nn::linear(nn::global_avg_pool(g1), fc_));
}

ad::Tensor MultiLabelClassifier::predict(const ad::Tensor& images) const {
  return predict_from_g1(extractor_.forward_g1(images));
}

void MultiLabelClassifier::set_frozen(bool frozen) {
  frozen_ = frozen;
  params_.set_trainable(!frozen);
}

std::vector<double> presence_labels(const std::vector<data::Annotation>& annotations, std::size_t class_count) {
  std::vector<double> y(class_count, 0.0);
  for (const auto& a : annotations) {
    if (a.class_id < 0 || static_cast<std::size_t>(a.class_id) >= class_count) {
      throw std::out_of_range("presence_labels: class " + std::to_string(a.class_id) + " out of range");
    }
    y[static_cast<std::size_t>(a.class_id)] = 1.0;
  }
  return y;
}

ad::Tensor mlc_loss(const ad::Tensor& y, const ad::Tensor& y_hat) {
  if (y.shape() != y_hat.shape() || y.rank() < 1 || y.rank() > 2) {
    throw ad::ShapeError("mlc_loss: labels " + ad::shape_str(y.shape()) + " and predictions " +
                         ad::shape_str(y_hat.shape()) + " must share a K or N x K shape");
  }
  auto p = ad::clamp(y_hat, kProbabilityClamp, 1.0 - kProbabilityClamp);
  auto one_minus_y = ad::add_scalar(ad::neg(y), 1.0);
  auto one_minus_p = ad::add_scalar(ad::neg(p), 1.0);
  auto bce = ad::neg(ad::add(ad::mul(y, ad::log(p)), ad::mul(one_minus_y, ad::log(one_minus_p))));
  const double rows = y.rank() == 2 ? static_cast<double>(y.dim(0)) : 1.0;
  return ad::scale(ad::sum(bce), 1.0 / rows);
}

double compute_w1(std::span<const double> y_hat, double tau) {
  if (!(tau > 0 && tau < 1)) throw std::invalid_argument("compute_w1: tau must lie in (0, 1)");
  double sum = 0;
  std::size_t confident = 0;
  for (double v : y_hat) {
    if (v > tau) {
      sum += v;
      ++confident;
    }
  }
  return confident ? sum / static_cast<double>(confident) + 1.0 : 1.0;
}

TargetSplit make_target_split(const std::vector<std::vector<double>>& predictions, std::size_t class_count) {
  TargetSplit split;
  split.counts.assign(class_count, 0);
  for (const auto& row : predictions) {
    if (row.size() != class_count) throw std::invalid_argument("make_target_split: prediction width mismatch");
    // max_element returns the first maximum
    const auto k = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    split.assignment.push_back(k);
    ++split.counts[k];
  }
  split.total = predictions.size();
  return split;
}

std::vector<std::vector<double>> predict_all(const MultiLabelClassifier& mlc, const data::Dataset& set,
                                             std::size_t batch_size) {
  ad::NoGradGuard guard;
  std::vector<std::vector<double>> out;
  const std::size_t k = mlc.class_count();
  for (std::size_t start = 0; start < set.size(); start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, set.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto y = mlc.predict(data::stack_images(set, idx));
    for (std::size_t i = 0; i < idx.size(); ++i) out.emplace_back(y.data().begin() + i * k, y.data().begin() + (i + 1) * k);
  }
  return out;
}

TargetSplit refresh_target_split(const MultiLabelClassifier& mlc, const data::Dataset& target_set,
                                 std::size_t batch_size) {
  return make_target_split(predict_all(mlc, target_set, batch_size), mlc.class_count());
}

double compute_w2(const TargetSplit& split, std::size_t sample_class) {
  if (split.total == 0) throw std::invalid_argument("compute_w2: empty target split");
  if (sample_class >= split.counts.size() || split.counts[sample_class] == 0) {
    throw std::invalid_argument("compute_w2: class " + std::to_string(sample_class) + " has no assigned samples");
  }
  return std::exp(1.0 - static_cast<double>(split.counts[sample_class]) / static_cast<double>(split.total));
}

double combine_weights(double w1, double w2, double theta) {
  if (!(theta >= 0 && theta <= 1)) throw std::invalid_argument("combine_weights: theta must lie in [0, 1]");
  return theta * w1 + (1.0 - theta) * w2;
}

ImageDiscriminator::ImageDiscriminator(std::size_t channels, std::uint64_t seed) {
  Rng rng(seed);
  hidden_ = nn::make_linear(params_, "hidden", channels, 64, rng);
  out_ = nn::make_linear(params_, "out", 64, 1, rng, 0.01);
}

ad::Tensor ImageDiscriminator::logits(const ad::Tensor& g2) const {
  auto h = ad::relu(nn::linear(nn::global_avg_pool(g2), hidden_));
  auto z = nn::linear(h, out_);
  return ad::reshape(z, {z.dim(0)});
}

namespace {

void check_domain_logits(const ad::Tensor& s, const ad::Tensor& t) {
  if (s.rank() != 1 || t.rank() != 1) throw ad::ShapeError("adversarial loss: domain logits must be vectors");
  if (s.size() == 0 || t.size() == 0) throw std::invalid_argument("adversarial loss: empty batch");
}

// -log sigmoid(z) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z)
ad::Tensor source_term(const ad::Tensor& s) {
  return ad::scale(ad::sum(ad::softplus(ad::neg(s))), 1.0 / static_cast<double>(s.size()));
}

}  // namespace

ad::Tensor adversarial_loss(const ad::Tensor& source_logits, const ad::Tensor& target_logits) {
  check_domain_logits(source_logits, target_logits);
  auto t = ad::scale(ad::sum(ad::softplus(target_logits)), 1.0 / static_cast<double>(target_logits.size()));
  return ad::add(source_term(source_logits), t);
}

ad::Tensor dcbr_adv_loss(const ad::Tensor& source_logits, const ad::Tensor& target_logits,
                         std::span<const double> target_weights) {
  check_domain_logits(source_logits, target_logits);
  if (target_weights.size() != target_logits.size()) {
    throw ad::ShapeError("dcbr_adv_loss: " + std::to_string(target_weights.size()) + " weights for " +
                         std::to_string(target_logits.size()) + " target samples");
  }
  const auto w = ad::Tensor::from({target_weights.size()}, std::vector<double>(target_weights.begin(), target_weights.end()));
  auto t = ad::scale(ad::sum(ad::mul(ad::softplus(target_logits), w)), 1.0 / static_cast<double>(target_logits.size()));
  return ad::add(source_term(source_logits), t);
}

}  // namespace i3net::dcbr
