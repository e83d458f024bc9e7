#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "i3net/copm/copm.hpp"
#include "i3net/data/dataset.hpp"
#include "i3net/dcbr/dcbr.hpp"
#include "i3net/detector/checkpoint.hpp"
#include "i3net/detector/evaluation.hpp"
#include "i3net/detector/loss.hpp"
#include "i3net/detector/model.hpp"
#include "i3net/rjca/rjca.hpp"
#include "i3net/train/config.hpp"

namespace i3net::train {

struct LossBreakdown {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double l_det = 0;
  double l_mlc = 0;  // reported only; the classifier is frozen during adaptation
  double l_dcbr = 0;
  double l_la = 0;
  double l_adv = 0;
  double l_jca = 0;
  double l_pr = 0;
  double total = 0;
};

// det + lambda1 dcbr + lambda2 ((la + adv) + (jca + gamma pr)). Throws
// std::domain_error naming the first NaN component.
double total_loss(const LossBreakdown& b, double lambda1, double lambda2, double gamma);

// One JSON object per line; `wall_s` is appended when given.
std::string metrics_line(const LossBreakdown& b, std::optional<double> wall_seconds = std::nullopt);

// Streams derived from the run seed, one per consumer.
enum class SeedTag : std::uint64_t {
  kDetector = 1,
  kClassifier,
  kImageDiscriminator,
  kPixelDiscriminator,
  kProjections,
  kClassifierShuffle,
  kSourceShuffle,
  kTargetShuffle,
};
std::uint64_t derive_seed(std::uint64_t seed, SeedTag tag);

det::DetectorConfig detector_config(const Config& config);

struct PretrainResult {
  std::unique_ptr<dcbr::MultiLabelClassifier> classifier;  // frozen
  double initial_loss = 0;  // mean per-image loss over the source set
  double final_loss = 0;
};

// Trains the classifier on the labeled source set, then freezes it. Throws
// std::invalid_argument on an empty set.
PretrainResult pretrain_mlc(const Config& config, const data::Dataset& source);

// Mean per-image classifier loss over a labeled set, without gradients.
double mean_mlc_loss(const dcbr::MultiLabelClassifier& mlc, const data::Dataset& set, std::size_t batch_size = 32);

void save_classifier(const std::filesystem::path& file, const dcbr::MultiLabelClassifier& mlc);
std::unique_ptr<dcbr::MultiLabelClassifier> load_classifier(const std::filesystem::path& file, const Config& config);

// Everything needed to resume evaluation or inspect a run.
struct TrainingState {
  explicit TrainingState(const Config& config);

  det::DetectionModel model;
  dcbr::ImageDiscriminator image_discriminator;
  copm::PixelDiscriminator pixel_discriminator;
  copm::RandomProjections projections;
  rjca::PrototypeBank bank;
};

std::vector<det::NamedArray> checkpoint_arrays(const TrainingState& state, const dcbr::MultiLabelClassifier* mlc,
                                               std::size_t epoch);
void save_training_checkpoint(const std::filesystem::path& file, const TrainingState& state,
                              const dcbr::MultiLabelClassifier* mlc, std::size_t epoch);

struct StepBatch {
  ad::Tensor source_images;
  std::vector<det::AnchorTargets> source_targets;
  ad::Tensor target_images;            // required when any component is on
  std::vector<double> target_weights;  // one per target image, read by dcbr
};

struct StepObjective {
  ad::Tensor objective;
  LossBreakdown parts;  // step, epoch and l_mlc are left for the caller
  // Post-update globals to commit after the backward pass (rjca only).
  std::vector<rjca::ClassVectors> source_globals;
  std::vector<rjca::ClassVectors> target_globals;
};

// The full training objective of one step. Components switched off in
// `config` are not evaluated and report 0.
StepObjective step_objective(const TrainingState& state, const Config& config, const StepBatch& batch);

struct TrainInputs {
  data::Dataset source;
  data::Dataset target;
};

// Reads source_dir and target_dir; a missing directory is rejected here.
TrainInputs load_inputs(const Config& config);

struct TrainResult {
  std::unique_ptr<TrainingState> state;  // as saved in the final checkpoint
  std::vector<LossBreakdown> history;
  std::filesystem::path final_checkpoint;
  std::filesystem::path metrics_file;
};

struct TrainOptions {
  // Adds wall-clock seconds since start to every metrics line.
  bool record_wall_clock = true;
  // Uses this classifier instead of pretraining one (it must be frozen).
  const dcbr::MultiLabelClassifier* classifier = nullptr;
  std::function<void(const LossBreakdown&)> on_step;
};

// Writes out_dir/metrics.jsonl, out_dir/epoch_<e>.ckpt and out_dir/final.ckpt.
// Throws std::runtime_error with the last breakdown when a loss turns NaN.
TrainResult train(const Config& config, const TrainInputs& inputs, const std::filesystem::path& out_dir,
                  const TrainOptions& options = {});

// Restored detector with its anchor layout.
struct LoadedDetector {
  std::unique_ptr<det::DetectionModel> model;
  std::size_t epoch = 0;
  std::vector<det::NamedArray> arrays;
};
LoadedDetector load_detector(const std::filesystem::path& checkpoint);

struct EvaluationReport {
  det::MapReport map;
  std::size_t images = 0;
  std::string text;
};

EvaluationReport evaluate(const det::DetectionModel& model, const data::Dataset& dataset,
                          std::size_t batch_size = 32);
EvaluationReport evaluate(const std::filesystem::path& checkpoint, const data::Dataset& dataset);

// Fused attention map of one image (H x W of the low tap) for inspection.
ad::Tensor attention_for_image(const std::filesystem::path& checkpoint, const ad::Tensor& image);

}  // namespace i3net::train
