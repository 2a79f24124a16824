#include "tmlab/shift.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tmlab/errors.hpp"
#include "tmlab/parallel.hpp"
#include "tmlab/rng.hpp"

namespace tmlab::shift {

std::string_view to_string(Metric metric) {
  switch (metric) {
    case Metric::entropy:
      return "entropy";
    case Metric::inception:
      return "is";
    case Metric::activation_maximization:
      return "am";
  }
  return "am";
}

Metric metric_from_string(std::string_view name) {
  if (name == "entropy") return Metric::entropy;
  if (name == "is") return Metric::inception;
  if (name == "am") return Metric::activation_maximization;
  throw InputError("unknown metric '" + std::string(name) + "' (expected entropy|is|am)");
}

double entropy(const Eigen::Ref<const Eigen::VectorXd>& p) {
  double h = 0.0;
  for (Index j = 0; j < p.size(); ++j)
    if (p[j] > 0) h -= p[j] * std::log(p[j]);
  return h;
}

double kl_divergence(const Eigen::Ref<const Eigen::VectorXd>& p,
                     const Eigen::Ref<const Eigen::VectorXd>& q) {
  double kl = 0.0;
  for (Index j = 0; j < p.size(); ++j)
    if (p[j] > 0) kl += p[j] * (std::log(p[j]) - std::log(q[j]));
  return kl;
}

namespace {

void require_samples(const ProbabilityMatrix& probs) {
  if (probs.cols() == 0) throw InputError("shift statistics need at least one sample");
}

}  // namespace

double expected_entropy(const ProbabilityMatrix& probs) {
  require_samples(probs);
  double total = 0.0;
  for (Index i = 0; i < probs.cols(); ++i) total += entropy(probs.col(i));
  return total / static_cast<double>(probs.cols());
}

ClassDistribution marginal(const ProbabilityMatrix& probs) {
  require_samples(probs);
  return probs.rowwise().sum() / static_cast<double>(probs.cols());
}

double inception_score(const ProbabilityMatrix& probs) {
  return std::max(0.0, entropy(marginal(probs)) - expected_entropy(probs));
}

double inception_score_mean_kl(const ProbabilityMatrix& probs) {
  const ClassDistribution m = marginal(probs);
  double total = 0.0;
  for (Index i = 0; i < probs.cols(); ++i) total += kl_divergence(probs.col(i), m);
  return total / static_cast<double>(probs.cols());
}

double am_score(const ProbabilityMatrix& probs, const ClassDistribution& class_dist) {
  validate_distribution(class_dist, probs.rows());
  const ClassDistribution m = marginal(probs).cwiseMax(kMarginalFloor);
  return expected_entropy(probs) + kl_divergence(class_dist, m);
}

ClassDistribution pseudo_label_distribution(const ProbabilityMatrix& probs) {
  require_samples(probs);
  ClassDistribution counts = ClassDistribution::Zero(probs.rows());
  for (Index i = 0; i < probs.cols(); ++i) {
    Index best;
    probs.col(i).maxCoeff(&best);
    counts[best] += 1.0;
  }
  return counts / static_cast<double>(probs.cols());
}

void validate_distribution(const ClassDistribution& dist, Index num_classes) {
  if (dist.size() != num_classes)
    throw InputError("class distribution has " + std::to_string(dist.size()) +
                     " entries, expected " + std::to_string(num_classes));
  if ((dist.array() < 0).any() || !dist.allFinite())
    throw InputError("class distribution has negative or non-finite entries");
  if (std::abs(dist.sum() - 1.0) > 1e-9) throw InputError("class distribution must sum to 1");
}

double ShiftEstimate::score_at(int shift) const {
  for (const auto& [s, v] : curve)
    if (s == shift) return v;
  throw InputError("shift " + std::to_string(shift) + " not on the scanned grid");
}

std::vector<int> preference_order(int max_shift) {
  std::vector<int> order{0};
  for (int d = 1; d <= max_shift; ++d) {
    order.push_back(-d);
    order.push_back(d);
  }
  return order;
}

ShiftScanner::ShiftScanner(Predictor predictor, int max_shift)
    : predictor_(std::move(predictor)), max_shift_(max_shift) {
  if (max_shift < 0) throw InputError("maximum shift must be non-negative");
  cache_.resize(static_cast<std::size_t>(2 * max_shift + 1));
}

namespace {

ProbabilityMatrix checked(ProbabilityMatrix probs, int shift) {
  if (!probs.allFinite())
    throw NumericError("non-finite predictions at shift " + std::to_string(shift));
  return probs;
}

}  // namespace

const ProbabilityMatrix& ShiftScanner::predictions(int shift) {
  if (std::abs(shift) > max_shift_) throw ShiftRangeError("shift outside the scan grid");
  auto& slot = cache_[static_cast<std::size_t>(shift + max_shift_)];
  if (!slot) {
    slot = checked(predictor_(shift), shift);
    ++predictor_calls_;
  }
  return *slot;
}

void ShiftScanner::prefetch() {
  std::vector<int> missing;
  for (int s = -max_shift_; s <= max_shift_; ++s)
    if (!cache_[static_cast<std::size_t>(s + max_shift_)]) missing.push_back(s);
  parallel_for(missing.size(), [&](std::size_t j) {
    cache_[static_cast<std::size_t>(missing[j] + max_shift_)] =
        checked(predictor_(missing[j]), missing[j]);
  });
  predictor_calls_ += missing.size();
}

template <typename Score>
ShiftEstimate ShiftScanner::scan(Metric metric, bool maximize, Score&& score) {
  prefetch();
  ++grid_scans_;
  ShiftEstimate est;
  est.metric = metric;
  std::vector<double> values(cache_.size());
  for (int s = -max_shift_; s <= max_shift_; ++s) {
    const double v = score(predictions(s));
    if (!std::isfinite(v)) throw NumericError("non-finite shift score");
    values[static_cast<std::size_t>(s + max_shift_)] = v;
    est.curve.emplace_back(s, v);
  }
  double best = 0.0;
  bool first = true;
  for (int s : preference_order(max_shift_)) {
    const double v = values[static_cast<std::size_t>(s + max_shift_)];
    if (first || (maximize ? v > best : v < best)) {
      best = v;
      est.delta = s;
      first = false;
    }
  }
  return est;
}

ShiftEstimate ShiftScanner::estimate_entropy() {
  return scan(Metric::entropy, false, [](const ProbabilityMatrix& p) { return expected_entropy(p); });
}

ShiftEstimate ShiftScanner::estimate_is() {
  return scan(Metric::inception, true, [](const ProbabilityMatrix& p) { return inception_score(p); });
}

ShiftEstimate ShiftScanner::estimate_am(const ClassDistribution& class_dist) {
  validate_distribution(class_dist, predictions(0).rows());
  ShiftEstimate est = scan(Metric::activation_maximization, false, [&](const ProbabilityMatrix& p) {
    return am_score(p, class_dist);
  });
  est.class_distribution = class_dist;
  return est;
}

ShiftEstimate ShiftScanner::estimate(const std::optional<ClassDistribution>& prior) {
  if (prior) return estimate_am(*prior);
  const ShiftEstimate initial = estimate_is();
  return estimate_am(pseudo_label_distribution(predictions(initial.delta)));
}

std::vector<std::size_t> select_capped(std::size_t n, std::size_t cap, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (n <= cap) return idx;
  Rng rng(derive_seed(seed, "sample-cap"));
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(cap);
  return idx;
}

ModelPredictor::ModelPredictor(const model::ModelParams<float>& params,
                               const data::Dataset& dataset, model::Domain domain,
                               std::size_t sample_cap, std::uint64_t seed)
    : params_(std::make_shared<const model::ModelParams<float>>(params)) {
  if (dataset.empty()) throw InputError("cannot estimate a shift on an empty dataset");
  const auto chosen = select_capped(dataset.size(), sample_cap, seed);
  std::vector<model::Matrix<float>> embeddings(chosen.size());
  std::vector<std::vector<int>> days(chosen.size());
  parallel_for(chosen.size(), [&](std::size_t j) {
    const auto& s = dataset.samples[chosen[j]];
    embeddings[j] = model::embed_timesteps(*params_, s, domain);
    days[j] = s.days;
  });
  embeddings_ = std::make_shared<const std::vector<model::Matrix<float>>>(std::move(embeddings));
  days_ = std::make_shared<const std::vector<std::vector<int>>>(std::move(days));
}

ProbabilityMatrix ModelPredictor::operator()(int shift) const {
  ProbabilityMatrix probs(params_->dims.classes, static_cast<Index>(embeddings_->size()));
  for (std::size_t i = 0; i < embeddings_->size(); ++i)
    probs.col(static_cast<Index>(i)) =
        model::classify_embeddings(*params_, (*embeddings_)[i], (*days_)[i], shift)
            .template cast<double>();
  return probs;
}

ProbabilityMatrix predict_probabilities(const model::ModelParams<float>& params,
                                        const data::Dataset& dataset, int delta,
                                        std::size_t sample_cap, std::uint64_t seed,
                                        model::Domain domain) {
  return ModelPredictor(params, dataset, domain, sample_cap, seed)(delta);
}

ShiftEstimate estimate_temporal_shift(const model::ModelParams<float>& params,
                                      const data::Dataset& dataset, int max_shift,
                                      const std::optional<ClassDistribution>& prior,
                                      std::size_t sample_cap, std::uint64_t seed) {
  if (max_shift > params.posenc.max_shift)
    throw ShiftRangeError("scan range exceeds the model's maximum shift");
  ShiftScanner scanner(ModelPredictor(params, dataset, model::Domain::target, sample_cap, seed),
                       max_shift);
  return scanner.estimate(prior);
}

}  // namespace tmlab::shift
