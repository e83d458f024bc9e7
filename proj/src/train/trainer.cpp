#include "i3net/train/trainer.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"
#include "i3net/autodiff/ops.hpp"
#include "i3net/detector/loss.hpp"
#include "i3net/train/optimizer.hpp"

namespace i3net::train {

namespace {

constexpr std::size_t kAnchorsPerCell = 1;
constexpr double kAnchorScaleCells = 2.0;
constexpr std::size_t kEvalBatch = 32;

std::vector<std::size_t> shuffled(std::size_t n, Rng rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  // Fisher-Yates, written out so the order does not depend on the standard library
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)));
    std::swap(perm[i - 1], perm[j]);
  }
  return perm;
}

std::vector<std::size_t> batch_indices(const std::vector<std::size_t>& perm, std::size_t first, std::size_t count) {
  std::vector<std::size_t> idx(count);
  for (std::size_t j = 0; j < count; ++j) idx[j] = perm[(first + j) % perm.size()];
  return idx;
}

ad::Tensor label_matrix(const data::Dataset& set, std::span<const std::size_t> idx, std::size_t k) {
  std::vector<double> y;
  y.reserve(idx.size() * k);
  for (std::size_t i : idx) {
    const auto row = dcbr::presence_labels(set.scenes[i].annotations, k);
    y.insert(y.end(), row.begin(), row.end());
  }
  return ad::Tensor::from({idx.size(), k}, std::move(y));
}

std::string side_name(rjca::Side side) { return side == rjca::Side::kSource ? "source" : "target"; }

std::string prototype_name(rjca::Side side, std::size_t layer, std::size_t k) {
  return fmt::format("prototypes.{}.{}.k{}", side_name(side), det::kLayerNames.at(layer), k);
}

void round_bank(rjca::PrototypeBank& bank) {
  for (auto side : {rjca::Side::kSource, rjca::Side::kTarget}) {
    for (std::size_t l = 0; l < bank.layer_count(); ++l) {
      for (std::size_t k = 0; k < bank.class_count(); ++k) {
        if (!bank.initialized(side, l, k)) continue;
        auto v = bank.value(side, l, k);
        for (double& x : v) x = det::to_storage_precision(x);
        bank.set(side, l, k, std::move(v));
      }
    }
  }
}

bool any_nan(const LossBreakdown& b) {
  for (double v : {b.l_det, b.l_mlc, b.l_dcbr, b.l_la, b.l_adv, b.l_jca, b.l_pr, b.total}) {
    if (std::isnan(v)) return true;
  }
  return false;
}

double meta_value(const std::vector<det::NamedArray>& arrays, const std::string& name, std::size_t i) {
  const auto& a = det::find_array(arrays, name);
  if (i >= a.values.size()) throw det::CheckpointError("checkpoint array " + name + " is too short");
  return a.values[i];
}

}  // namespace

double total_loss(const LossBreakdown& b, double lambda1, double lambda2, double gamma) {
  const std::pair<const char*, double> parts[] = {{"l_det", b.l_det}, {"l_dcbr", b.l_dcbr}, {"l_la", b.l_la},
                                                  {"l_adv", b.l_adv}, {"l_jca", b.l_jca},   {"l_pr", b.l_pr}};
  for (const auto& [name, v] : parts) {
    if (std::isnan(v)) throw std::domain_error(std::string("total_loss: component ") + name + " is NaN");
  }
  const double copm = b.l_la + b.l_adv;
  const double rjca = b.l_jca + gamma * b.l_pr;
  return b.l_det + lambda1 * b.l_dcbr + lambda2 * (copm + rjca);
}

std::string metrics_line(const LossBreakdown& b, std::optional<double> wall_seconds) {
  nlohmann::ordered_json j;
  j["step"] = b.step;
  j["epoch"] = b.epoch;
  j["l_det"] = b.l_det;
  j["l_mlc"] = b.l_mlc;
  j["l_dcbr"] = b.l_dcbr;
  j["l_la"] = b.l_la;
  j["l_adv"] = b.l_adv;
  j["l_jca"] = b.l_jca;
  j["l_pr"] = b.l_pr;
  j["total"] = b.total;
  if (wall_seconds) j["wall_s"] = *wall_seconds;
  return j.dump();
}

std::uint64_t derive_seed(std::uint64_t seed, SeedTag tag) {
  return Rng::stream(seed, static_cast<std::uint64_t>(tag))();
}

det::DetectorConfig detector_config(const Config& config) {
  det::DetectorConfig dc;
  dc.class_count = config.class_count;
  dc.image_size = config.image_size;
  dc.anchors_per_cell = kAnchorsPerCell;
  dc.anchor_scale_cells = kAnchorScaleCells;
  dc.seed = derive_seed(config.seed, SeedTag::kDetector);
  return dc;
}

double mean_mlc_loss(const dcbr::MultiLabelClassifier& mlc, const data::Dataset& set, std::size_t batch_size) {
  if (set.size() == 0) throw std::invalid_argument("mean_mlc_loss: empty dataset");
  ad::NoGradGuard guard;
  double total = 0;
  for (std::size_t start = 0; start < set.size(); start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, set.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto y = label_matrix(set, idx, mlc.class_count());
    total += dcbr::mlc_loss(y, mlc.predict(data::stack_images(set, idx))).item() * static_cast<double>(idx.size());
  }
  return total / static_cast<double>(set.size());
}

PretrainResult pretrain_mlc(const Config& config, const data::Dataset& source) {
  config.validate();
  if (source.size() == 0) throw std::invalid_argument("pretrain_mlc: the labeled source set is empty");
  auto dc = detector_config(config);
  dc.seed = derive_seed(config.seed, SeedTag::kClassifier);
  PretrainResult result;
  result.classifier = std::make_unique<dcbr::MultiLabelClassifier>(dc, dc.seed);
  auto& mlc = *result.classifier;
  result.initial_loss = mean_mlc_loss(mlc, source);

  Sgd opt({&mlc.params()}, config.momentum, config.weight_decay);
  const std::size_t bs = std::min(config.source_batch, source.size());
  const std::size_t steps = source.size() / bs;
  for (std::size_t e = 0; e < config.mlc_epochs; ++e) {
    const auto perm = shuffled(source.size(), Rng::stream(derive_seed(config.seed, SeedTag::kClassifierShuffle), e));
    double epoch_loss = 0;
    for (std::size_t s = 0; s < steps; ++s) {
      const auto idx = batch_indices(perm, s * bs, bs);
      auto loss = dcbr::mlc_loss(label_matrix(source, idx, mlc.class_count()),
                                 mlc.predict(data::stack_images(source, idx)));
      opt.zero_grad();
      loss.backward();
      opt.step(config.mlc_learning_rate);
      epoch_loss += loss.item();
    }
    spdlog::info("pretrain-mlc epoch {}: mean batch loss {:.6f}", e, epoch_loss / static_cast<double>(steps));
  }
  // stored values so that a reloaded classifier behaves identically
  det::round_to_storage_precision(mlc.params());
  mlc.set_frozen(true);
  result.final_loss = mean_mlc_loss(mlc, source);
  return result;
}

void save_classifier(const std::filesystem::path& file, const dcbr::MultiLabelClassifier& mlc) {
  std::vector<det::NamedArray> arrays;
  append_parameters(arrays, "mlc.", mlc.params());
  det::save_checkpoint(file, arrays);
}

std::unique_ptr<dcbr::MultiLabelClassifier> load_classifier(const std::filesystem::path& file,
                                                            const Config& config) {
  auto dc = detector_config(config);
  dc.seed = derive_seed(config.seed, SeedTag::kClassifier);
  auto mlc = std::make_unique<dcbr::MultiLabelClassifier>(dc, dc.seed);
  det::restore_parameters(det::load_checkpoint(file), "mlc.", mlc->params());
  mlc->set_frozen(true);
  return mlc;
}

TrainingState::TrainingState(const Config& config)
    : model(detector_config(config)),
      image_discriminator(model.layer_channels(), derive_seed(config.seed, SeedTag::kImageDiscriminator)),
      pixel_discriminator(model.low_channels(), derive_seed(config.seed, SeedTag::kPixelDiscriminator)),
      projections(copm::make_random_projections(config.fused_dim, model.low_channels(), config.class_count + 1,
                                                derive_seed(config.seed, SeedTag::kProjections))),
      bank(std::vector<std::size_t>(model.anchors().grids.size(), model.layer_channels()), config.class_count,
           config.rho) {}

std::vector<det::NamedArray> checkpoint_arrays(const TrainingState& state, const dcbr::MultiLabelClassifier* mlc,
                                               std::size_t epoch) {
  std::vector<det::NamedArray> arrays;
  const auto& dc = state.model.config();
  arrays.push_back({"meta.detector",
                    {4},
                    {static_cast<double>(dc.class_count), static_cast<double>(dc.image_size),
                     static_cast<double>(dc.anchors_per_cell), dc.anchor_scale_cells}});
  arrays.push_back({"meta.epoch", {1}, {static_cast<double>(epoch)}});
  append_parameters(arrays, "detector.", state.model.params());
  if (mlc) append_parameters(arrays, "mlc.", mlc->params());
  append_parameters(arrays, "dg.", state.image_discriminator.params());
  append_parameters(arrays, "dl.", state.pixel_discriminator.params());
  const auto& p = state.projections;
  arrays.push_back({"copm.r1", p.r1.shape(), {p.r1.data().begin(), p.r1.data().end()}});
  arrays.push_back({"copm.r2", p.r2.shape(), {p.r2.data().begin(), p.r2.data().end()}});
  for (auto side : {rjca::Side::kSource, rjca::Side::kTarget}) {
    for (std::size_t l = 0; l < state.bank.layer_count(); ++l) {
      for (std::size_t k = 0; k < state.bank.class_count(); ++k) {
        if (!state.bank.initialized(side, l, k)) continue;
        arrays.push_back({prototype_name(side, l, k), {state.bank.channels(l)}, state.bank.value(side, l, k)});
      }
    }
  }
  return arrays;
}

void save_training_checkpoint(const std::filesystem::path& file, const TrainingState& state,
                              const dcbr::MultiLabelClassifier* mlc, std::size_t epoch) {
  det::save_checkpoint(file, checkpoint_arrays(state, mlc, epoch));
}

TrainInputs load_inputs(const Config& config) {
  auto read = [](const std::filesystem::path& dir, const char* what) {
    if (dir.empty()) throw ConfigError(std::string(what) + " is not set");
    if (!std::filesystem::is_directory(dir)) throw ConfigError(std::string(what) + " " + dir.string() + " does not exist");
    return data::read_dataset(dir);
  };
  TrainInputs inputs;
  inputs.source = read(config.source_dir, "source_dir");
  if (config.dcbr || config.copm || config.rjca) inputs.target = read(config.target_dir, "target_dir");
  return inputs;
}

StepObjective step_objective(const TrainingState& state, const Config& config, const StepBatch& batch) {
  const auto& model = state.model;
  const std::size_t k_count = config.class_count;
  const std::size_t layers = model.anchors().grids.size();
  const std::size_t apc = model.config().anchors_per_cell;
  const bool adapting = config.dcbr || config.copm || config.rjca;
  if (adapting && !batch.target_images.defined()) throw std::invalid_argument("step_objective: missing target batch");

  StepObjective out;
  auto& b = out.parts;
  const auto fs = model.forward(batch.source_images);
  auto objective = det::detection_loss(fs.all_logits(), fs.all_offsets(), batch.source_targets).total;
  b.l_det = objective.item();

  det::ForwardResult ft;
  if (adapting) ft = model.forward(batch.target_images);

  if (config.dcbr) {
    const auto& dg = state.image_discriminator;
    auto l_dcbr = dcbr::dcbr_adv_loss(dg.logits(ad::gradient_reversal(fs.g2, config.grl_beta)),
                                      dg.logits(ad::gradient_reversal(ft.g2, config.grl_beta)), batch.target_weights);
    b.l_dcbr = l_dcbr.item();
    objective = objective + config.lambda1 * l_dcbr;
  }

  ad::Tensor adapt;
  auto accumulate = [&adapt](const ad::Tensor& t) { adapt = adapt.defined() ? adapt + t : t; };

  if (config.copm) {
    const std::size_t grid = model.low_grid();
    auto maps = [&](const det::ForwardResult& f) {
      const auto p = copm::head_probability_map(f.heads[det::kLayerA], apc, grid);
      return copm::attention_map(copm::fuse_maps(f.low, p, state.projections));
    };
    auto l_la = copm::batch_pattern_match_loss(maps(fs), maps(ft));
    const auto& dl = state.pixel_discriminator;
    auto l_adv = copm::pixel_adv_loss(dl.logits(ad::gradient_reversal(fs.low, config.grl_beta)),
                                      dl.logits(ad::gradient_reversal(ft.low, config.grl_beta)));
    b.l_la = l_la.item();
    b.l_adv = l_adv.item();
    accumulate(copm::copm_loss(l_la, l_adv));
  }

  out.source_globals.resize(layers);
  out.target_globals.resize(layers);
  if (config.rjca) {
    for (std::size_t l = 0; l < layers; ++l) {
      const auto src_labels = rjca::source_pixel_labels(model.anchors(), l, batch.source_targets);
      const auto tgt_labels = rjca::target_pixel_labels(ft.heads[l], apc);
      out.source_globals[l] = rjca::compose_globals(state.bank, rjca::Side::kSource, l,
                                                    rjca::local_prototypes(fs.layers[l], src_labels, k_count));
      out.target_globals[l] = rjca::compose_globals(state.bank, rjca::Side::kTarget, l,
                                                    rjca::local_prototypes(ft.layers[l], tgt_labels, k_count));
    }
    const rjca::HeadFn head = [&model](std::size_t layer, const ad::Tensor& f) { return model.head_logits(layer, f); };
    auto l_jca = rjca::jca_loss(out.source_globals, out.target_globals, config.margin);
    auto l_pr = rjca::pr_loss(out.target_globals, head, config.temperature, k_count);
    b.l_jca = l_jca.item();
    b.l_pr = l_pr.item();
    accumulate(rjca::rjca_loss(l_jca, l_pr, config.gamma));
  }

  if (adapt.defined()) objective = objective + config.lambda2 * adapt;
  b.total = objective.item();
  out.objective = objective;
  return out;
}

TrainResult train(const Config& config, const TrainInputs& inputs, const std::filesystem::path& out_dir,
                  const TrainOptions& options) {
  config.validate();
  const bool adapting = config.dcbr || config.copm || config.rjca;
  const auto& source = inputs.source;
  const auto& target = inputs.target;
  if (source.size() == 0) throw std::invalid_argument("train: the source set is empty");
  if (adapting && target.size() == 0) throw std::invalid_argument("train: the target set is empty");
  std::filesystem::create_directories(out_dir);

  const auto start_time = std::chrono::steady_clock::now();
  TrainResult result;
  result.state = std::make_unique<TrainingState>(config);
  auto& state = *result.state;
  auto& model = state.model;
  const std::size_t k_count = config.class_count;
  const std::size_t layers = model.anchors().grids.size();

  // frozen classifier for the reweighting
  std::unique_ptr<dcbr::MultiLabelClassifier> owned_mlc;
  const dcbr::MultiLabelClassifier* mlc = nullptr;
  std::vector<double> source_mlc_loss;
  if (config.dcbr) {
    if (options.classifier) {
      if (!options.classifier->frozen()) throw std::invalid_argument("train: the supplied classifier is not frozen");
      mlc = options.classifier;
    } else if (!config.mlc_checkpoint.empty() && std::filesystem::exists(config.mlc_checkpoint)) {
      owned_mlc = load_classifier(config.mlc_checkpoint, config);
      mlc = owned_mlc.get();
    } else {
      owned_mlc = pretrain_mlc(config, source).classifier;
      mlc = owned_mlc.get();
    }
    // frozen, so the per-image source loss is a constant
    const auto preds = dcbr::predict_all(*mlc, source);
    ad::NoGradGuard guard;
    for (std::size_t i = 0; i < source.size(); ++i) {
      const auto y = dcbr::presence_labels(source.scenes[i].annotations, k_count);
      source_mlc_loss.push_back(
          dcbr::mlc_loss(ad::Tensor::from({k_count}, y), ad::Tensor::from({k_count}, preds[i])).item());
    }
  }

  std::vector<det::AnchorTargets> source_targets;
  source_targets.reserve(source.size());
  for (const auto& scene : source.scenes) source_targets.push_back(det::match_anchors(model.anchors(), scene.annotations));

  if (config.rjca) rjca::source_global_prototypes(state.bank, model, source);

  std::vector<nn::ParameterSet*> groups{&model.params()};
  if (config.dcbr) groups.push_back(&state.image_discriminator.params());
  if (config.copm) groups.push_back(&state.pixel_discriminator.params());
  Sgd opt(groups, config.momentum, config.weight_decay);

  result.metrics_file = out_dir / "metrics.jsonl";
  std::ofstream metrics(result.metrics_file, std::ios::binary | std::ios::trunc);
  if (!metrics) throw std::runtime_error("train: cannot write " + result.metrics_file.string());

  const std::size_t bs = std::min(config.source_batch, source.size());
  const std::size_t bt = config.target_batch;
  const std::size_t steps = source.size() / bs;
  std::size_t global_step = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr =
        epoch >= config.decay_epoch() ? config.learning_rate * config.lr_decay_factor : config.learning_rate;
    const auto source_perm = shuffled(source.size(), Rng::stream(derive_seed(config.seed, SeedTag::kSourceShuffle), epoch));
    std::vector<std::size_t> target_perm;
    if (adapting) target_perm = shuffled(target.size(), Rng::stream(derive_seed(config.seed, SeedTag::kTargetShuffle), epoch));

    std::vector<std::vector<double>> target_scores;
    dcbr::TargetSplit split;
    if (config.dcbr) {
      target_scores = dcbr::predict_all(*mlc, target);
      split = dcbr::make_target_split(target_scores, k_count);
      spdlog::info("epoch {}: target split {}", epoch, fmt::join(split.counts, "/"));
    }

    for (std::size_t s = 0; s < steps; ++s, ++global_step) {
      const auto src_idx = batch_indices(source_perm, s * bs, bs);
      StepBatch batch;
      batch.source_images = data::stack_images(source, src_idx);
      for (std::size_t i : src_idx) batch.source_targets.push_back(source_targets[i]);
      if (adapting) {
        const auto tgt_idx = batch_indices(target_perm, s * bt, bt);
        batch.target_images = data::stack_images(target, tgt_idx);
        if (config.dcbr) {
          for (std::size_t i : tgt_idx) {
            const double w1 = dcbr::compute_w1(target_scores[i], config.tau);
            const double w2 = dcbr::compute_w2(split, split.assignment[i]);
            batch.target_weights.push_back(dcbr::combine_weights(w1, w2, config.theta));
          }
        }
      }
      auto step = step_objective(state, config, batch);
      auto& b = step.parts;
      b.step = global_step;
      b.epoch = epoch;
      if (config.dcbr) {
        double mlc_sum = 0;
        for (std::size_t i : src_idx) mlc_sum += source_mlc_loss[i];
        b.l_mlc = mlc_sum / static_cast<double>(src_idx.size());
      }
      if (any_nan(b)) {
        throw std::runtime_error("train: loss became NaN at step " + std::to_string(global_step) + ": " +
                                 metrics_line(b));
      }

      opt.zero_grad();
      step.objective.backward();
      opt.step(lr);
      if (config.rjca) {
        for (std::size_t l = 0; l < layers; ++l) {
          rjca::commit_globals(state.bank, rjca::Side::kSource, l, step.source_globals[l]);
          rjca::commit_globals(state.bank, rjca::Side::kTarget, l, step.target_globals[l]);
        }
      }

      std::optional<double> wall;
      if (options.record_wall_clock) {
        wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time).count();
      }
      metrics << metrics_line(b, wall) << '\n';
      result.history.push_back(b);
      if (options.on_step) options.on_step(b);
    }
    metrics.flush();

    // snap to the stored precision so that save -> load -> evaluate matches in-memory state
    det::round_to_storage_precision(model.params());
    det::round_to_storage_precision(state.image_discriminator.params());
    det::round_to_storage_precision(state.pixel_discriminator.params());
    round_bank(state.bank);
    const auto file = out_dir / fmt::format("epoch_{:03d}.ckpt", epoch);
    save_training_checkpoint(file, state, mlc, epoch);
    const auto& last = result.history.back();
    spdlog::info("epoch {} done: l_det {:.4f} total {:.4f} lr {:g}", epoch, last.l_det, last.total, lr);
  }

  result.final_checkpoint = out_dir / "final.ckpt";
  save_training_checkpoint(result.final_checkpoint, state, mlc, config.epochs - 1);
  return result;
}

LoadedDetector load_detector(const std::filesystem::path& checkpoint) {
  LoadedDetector out;
  out.arrays = det::load_checkpoint(checkpoint);
  det::DetectorConfig dc;
  dc.class_count = static_cast<std::size_t>(meta_value(out.arrays, "meta.detector", 0));
  dc.image_size = static_cast<std::size_t>(meta_value(out.arrays, "meta.detector", 1));
  dc.anchors_per_cell = static_cast<std::size_t>(meta_value(out.arrays, "meta.detector", 2));
  dc.anchor_scale_cells = meta_value(out.arrays, "meta.detector", 3);
  out.epoch = static_cast<std::size_t>(meta_value(out.arrays, "meta.epoch", 0));
  out.model = std::make_unique<det::DetectionModel>(dc);
  det::restore_parameters(out.arrays, "detector.", out.model->params());
  return out;
}

EvaluationReport evaluate(const det::DetectionModel& model, const data::Dataset& dataset, std::size_t batch_size) {
  ad::NoGradGuard guard;
  std::vector<std::vector<det::Detection>> detections;
  std::vector<std::vector<data::Annotation>> truth;
  for (std::size_t start = 0; start < dataset.size(); start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, dataset.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto fwd = model.forward(data::stack_images(dataset, idx));
    for (std::size_t j = 0; j < idx.size(); ++j) {
      detections.push_back(det::decode_and_nms(det::head_prediction(fwd, j), model.anchors()));
      truth.push_back(dataset.scenes[idx[j]].annotations);
    }
  }
  EvaluationReport report;
  report.images = dataset.size();
  report.map = det::evaluate_map(detections, truth, model.config().class_count);
  std::string text = fmt::format("images {}\n", report.images);
  for (std::size_t k = 0; k < report.map.average_precision.size(); ++k) {
    text += fmt::format("class {} gt {} ap {:.6f}\n", k, report.map.ground_truth[k], report.map.average_precision[k]);
  }
  text += fmt::format("mAP@0.5 {:.6f}\n", report.map.mean_ap);
  report.text = std::move(text);
  return report;
}

EvaluationReport evaluate(const std::filesystem::path& checkpoint, const data::Dataset& dataset) {
  const auto loaded = load_detector(checkpoint);
  return evaluate(*loaded.model, dataset, kEvalBatch);
}

ad::Tensor attention_for_image(const std::filesystem::path& checkpoint, const ad::Tensor& image) {
  const auto loaded = load_detector(checkpoint);
  const auto& model = *loaded.model;
  const auto& r1 = det::find_array(loaded.arrays, "copm.r1");
  const auto& r2 = det::find_array(loaded.arrays, "copm.r2");
  const copm::RandomProjections proj{ad::Tensor::from(r1.shape, r1.values), ad::Tensor::from(r2.shape, r2.values)};
  ad::NoGradGuard guard;
  const auto batch = image.rank() == 3 ? ad::reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)}) : image;
  const auto fwd = model.forward(batch);
  const auto p = copm::head_probability_map(fwd.heads[det::kLayerA], model.config().anchors_per_cell, model.low_grid());
  const auto map = copm::attention_map(copm::fuse_maps(fwd.low, p, proj));
  return ad::reshape(map, {map.dim(1), map.dim(2)});
}

}  // namespace i3net::train
