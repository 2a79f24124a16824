#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tmlab/model.hpp"
#include "tmlab/optim.hpp"
#include "tmlab/shift.hpp"
#include "tmlab/sits_data.hpp"

namespace tmlab::adapt {

using Eigen::Index;
using model::ModelParams;

struct TrainConfig {
  int max_shift = 60;          // Delta, days
  double lambda = 2.0;         // weight of the pseudo-label loss
  double alpha = 0.9999;       // teacher EMA decay
  double threshold = 0.9;      // pseudo-label confidence epsilon; >= 1 disables
  double focal_gamma = 1.0;
  Index batch_size = 128;      // per domain
  Index pixel_set = 64;        // S
  Index timesteps = 30;        // k, strong augmentation
  int pretrain_epochs = 100;
  double pretrain_lr = 1e-3;
  Index pretrain_iterations = 0;  // per epoch; 0 means ceil(n / B)
  int adapt_epochs = 20;
  Index adapt_iterations = 500;   // m
  double adapt_lr = 1e-4;
  double weight_decay = 1e-4;
  double bn_momentum = 0.9;
  std::size_t sample_cap = shift::kDefaultSampleCap;
  std::uint64_t seed = 0;

  // Throws InputError on out-of-range values.
  void validate() const;
};

enum class Method { timematch, fixmatch, source_only, shiftaug_source };

std::string_view to_string(Method method);
Method method_from_string(std::string_view name);

// One JSON object per event; used for training logs.
using Logger = std::function<void(const nlohmann::json&)>;

// ---------------------------------------------------------------------------
// Source pre-training

struct PretrainEpoch {
  int epoch = 0;  // 1-based
  double loss = 0.0;
  double val_macro_f1 = 0.0;
  double learning_rate = 0.0;
};

struct PretrainResult {
  ModelParams<float> params;  // best epoch by validation macro-F1
  model::OptimizerState<float> optimizer;
  std::vector<PretrainEpoch> epochs;
  int best_epoch = 0;
  bool shiftaug = false;
};

// Focal-loss training on class-balanced, pixel- and timestep-subsampled
// source batches. With `shiftaug`, every presented example is moved by its own
// uniform shift in [-Delta, Delta]. The epoch with the best validation
// macro-F1 (last epoch when `val` is empty) is returned, with its source
// normalization statistics copied to the target slot.
PretrainResult pretrain_source(const data::Dataset& train, const data::Dataset& val,
                               const ModelParams<float>& init, const TrainConfig& cfg,
                               bool shiftaug, const Logger& log = {});

// ---------------------------------------------------------------------------
// Adaptation

struct PseudoLabels {
  std::vector<int> labels;      // argmax per column
  std::vector<bool> confident;  // max probability > threshold
  std::size_t passed = 0;
};

PseudoLabels make_pseudo_labels(const model::Matrix<float>& probs, double threshold);

struct EpochRecord {
  int epoch = 0;  // 1-based
  int delta_t_to_s = 0;
  int delta_s_to_t = 0;
  double pass_fraction = 0.0;  // pseudo-labels above threshold
  std::optional<double> pseudo_label_accuracy;
  double loss_source = 0.0;  // mean L^{s->t} over the epoch
  double loss_target = 0.0;  // mean L^t over the epoch
  Eigen::VectorXd class_distribution;  // of all pseudo-labels of the epoch
  std::optional<shift::ShiftEstimate> estimate;
};

struct AdaptReport {
  Method method = Method::timematch;
  std::vector<EpochRecord> epochs;
  std::size_t shift_estimations = 0;
  std::size_t iterations = 0;
  std::vector<double> target_loss_stream;  // L^t per iteration
  bool flat_initial_curve = false;
};

struct AdaptResult {
  ModelParams<float> student;
  ModelParams<float> teacher;
  AdaptReport report;
};

// Self-training with an EMA teacher. Each epoch re-estimates the target-to-
// source shift with the teacher; the source-to-target shift is fixed from the
// first estimate. Target labels, when present, only feed diagnostics.
AdaptResult timematch(const data::Dataset& source, const data::Dataset& target,
                      const ModelParams<float>& init, const TrainConfig& cfg,
                      const Logger& log = {});

// The same loop with both shifts fixed at 0 and no shift estimation.
AdaptResult fixmatch(const data::Dataset& source, const data::Dataset& target,
                     const ModelParams<float>& init, const TrainConfig& cfg,
                     const Logger& log = {});

// Dispatch by method. source_only and shiftaug_source return `init` unchanged
// with an empty report.
AdaptResult run_adaptation(Method method, const data::Dataset& source, const data::Dataset& target,
                           const ModelParams<float>& init, const TrainConfig& cfg,
                           const Logger& log = {});

nlohmann::json to_json(const EpochRecord& record);
// JSON lines: one object per epoch, then a summary object.
std::string report_jsonl(const AdaptReport& report);

}  // namespace tmlab::adapt
