#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "tmlab/model.hpp"
#include "tmlab/sits_data.hpp"

// Temporal shift estimation from prediction statistics of a trained model on
// shifted target data. Scores use natural logarithms.
namespace tmlab::shift {

using Eigen::Index;

// Class probabilities, one column per sample (K x n).
using ProbabilityMatrix = Eigen::MatrixXd;
using ClassDistribution = Eigen::VectorXd;

enum class Metric { entropy, inception, activation_maximization };

std::string_view to_string(Metric metric);  // "entropy" | "is" | "am"
Metric metric_from_string(std::string_view name);

inline constexpr double kMarginalFloor = 1e-12;

double entropy(const Eigen::Ref<const Eigen::VectorXd>& p);
// KL(p || q); terms with p = 0 contribute 0.
double kl_divergence(const Eigen::Ref<const Eigen::VectorXd>& p,
                     const Eigen::Ref<const Eigen::VectorXd>& q);

// Mean prediction entropy.
double expected_entropy(const ProbabilityMatrix& probs);
ClassDistribution marginal(const ProbabilityMatrix& probs);
// H(marginal) - E[H(p)], clamped at 0.
double inception_score(const ProbabilityMatrix& probs);
// E[KL(p || marginal)], the same quantity computed term by term.
double inception_score_mean_kl(const ProbabilityMatrix& probs);
// E[H(p)] + KL(class_dist || max(marginal, 1e-12)).
double am_score(const ProbabilityMatrix& probs, const ClassDistribution& class_dist);
// Frequencies of argmax labels.
ClassDistribution pseudo_label_distribution(const ProbabilityMatrix& probs);

// Throws InputError unless dist is a K-simplex point within 1e-9.
void validate_distribution(const ClassDistribution& dist, Index num_classes);

struct ShiftEstimate {
  int delta = 0;
  Metric metric = Metric::activation_maximization;
  std::vector<std::pair<int, double>> curve;  // ascending shift, every candidate once
  std::optional<ClassDistribution> class_distribution;

  double score_at(int shift) const;
};

// Candidate shifts from most to least preferred under ties: 0, -1, 1, -2, 2, ...
std::vector<int> preference_order(int max_shift);

// Class probabilities of the scanned dataset at a given shift.
using Predictor = std::function<ProbabilityMatrix(int shift)>;

// Scans the candidate grid [-max_shift, max_shift] with one predictor, caching
// predictions per shift so several metrics share one pass over the data.
class ShiftScanner {
 public:
  ShiftScanner(Predictor predictor, int max_shift);

  const ProbabilityMatrix& predictions(int shift);

  ShiftEstimate estimate_entropy();
  ShiftEstimate estimate_is();
  ShiftEstimate estimate_am(const ClassDistribution& class_dist);

  // Without a prior: IS estimate, pseudo-label class distribution at that
  // shift, then AM with that distribution. With a prior: AM directly.
  ShiftEstimate estimate(const std::optional<ClassDistribution>& prior);

  int max_shift() const { return max_shift_; }
  std::size_t grid_scans() const { return grid_scans_; }
  std::size_t predictor_calls() const { return predictor_calls_; }

 private:
  void prefetch();
  template <typename Score>
  ShiftEstimate scan(Metric metric, bool maximize, Score&& score);

  Predictor predictor_;
  int max_shift_;
  std::vector<std::optional<ProbabilityMatrix>> cache_;
  std::size_t grid_scans_ = 0;
  std::size_t predictor_calls_ = 0;
};

// First `cap` indices of a seeded shuffle, or every index when n <= cap.
std::vector<std::size_t> select_capped(std::size_t n, std::size_t cap, std::uint64_t seed);

// Eval-mode predictor over a capped sample of `dataset`, using a private
// snapshot of the parameters. Pixel-set embeddings are computed once, so each
// shift only re-runs the temporal attention and the head.
class ModelPredictor {
 public:
  ModelPredictor(const model::ModelParams<float>& params, const data::Dataset& dataset,
                 model::Domain domain, std::size_t sample_cap, std::uint64_t seed);

  ProbabilityMatrix operator()(int shift) const;
  std::size_t size() const { return embeddings_->size(); }

 private:
  std::shared_ptr<const model::ModelParams<float>> params_;
  std::shared_ptr<const std::vector<model::Matrix<float>>> embeddings_;
  std::shared_ptr<const std::vector<std::vector<int>>> days_;
};

inline constexpr std::size_t kDefaultSampleCap = 5000;

// Predictions of `params` on a capped sample of `dataset` with every day moved
// by `delta`.
ProbabilityMatrix predict_probabilities(const model::ModelParams<float>& params,
                                        const data::Dataset& dataset, int delta,
                                        std::size_t sample_cap = kDefaultSampleCap,
                                        std::uint64_t seed = 0,
                                        model::Domain domain = model::Domain::target);

// Shift estimation with a model on a target dataset over [-max_shift, max_shift].
ShiftEstimate estimate_temporal_shift(const model::ModelParams<float>& params,
                                      const data::Dataset& dataset, int max_shift,
                                      const std::optional<ClassDistribution>& prior,
                                      std::size_t sample_cap = kDefaultSampleCap,
                                      std::uint64_t seed = 0);

}  // namespace tmlab::shift
