#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tmlab/model.hpp"
#include "tmlab/sits_data.hpp"

namespace tmlab::metrics {

using Eigen::Index;

// K x K counts, rows = truth, columns = prediction.
using ConfusionMatrix = Eigen::Matrix<long long, Eigen::Dynamic, Eigen::Dynamic>;

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool undefined = false;  // class absent from both truth and predictions
};

std::vector<ClassScores> per_class_scores(const ConfusionMatrix& confusion);
Eigen::VectorXd per_class_f1(const ConfusionMatrix& confusion);
// Unweighted mean of per-class F1, optionally leaving out one class.
double macro_f1(const ConfusionMatrix& confusion, int exclude_class = -1);
double accuracy(const ConfusionMatrix& confusion);

struct EvalResult {
  std::vector<std::string> class_names;
  ConfusionMatrix confusion;
  std::vector<ClassScores> per_class;
  double macro_f1 = 0.0;              // over all classes
  double macro_f1_without_unknown = 0.0;
  bool include_unknown = true;        // which of the two is the headline value
  double accuracy = 0.0;
  long long n = 0;

  double headline_f1() const { return include_unknown ? macro_f1 : macro_f1_without_unknown; }
};

// Builds an EvalResult from parallel truth/prediction label lists. The last
// class is treated as unknown.
EvalResult summarize(std::vector<std::string> class_names, const std::vector<int>& truth,
                     const std::vector<int>& predicted, bool include_unknown = true);

// Full-resolution evaluation: every time step and pixel, eval-mode
// normalization with `domain` statistics, days moved by `shift`.
EvalResult evaluate(const model::ModelParams<float>& params, const data::Dataset& dataset,
                    model::Domain domain, int shift = 0, bool include_unknown = true);

// Argmax predictions of every sample.
std::vector<int> predict_labels(const model::ModelParams<float>& params, const data::Dataset& dataset,
                                model::Domain domain, int shift = 0);

nlohmann::json to_json(const EvalResult& result);
// "truth\pred" header row then one row per true class.
std::string confusion_csv(const EvalResult& result);

}  // namespace tmlab::metrics
