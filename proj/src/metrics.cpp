#include "tmlab/metrics.hpp"

#include <sstream>

#include "tmlab/errors.hpp"
#include "tmlab/parallel.hpp"

namespace tmlab::metrics {

std::vector<ClassScores> per_class_scores(const ConfusionMatrix& confusion) {
  if (confusion.rows() != confusion.cols()) throw DimensionError("confusion matrix must be square");
  std::vector<ClassScores> out(static_cast<std::size_t>(confusion.rows()));
  for (Index c = 0; c < confusion.rows(); ++c) {
    const double tp = static_cast<double>(confusion(c, c));
    const double truth = static_cast<double>(confusion.row(c).sum());
    const double predicted = static_cast<double>(confusion.col(c).sum());
    auto& s = out[static_cast<std::size_t>(c)];
    s.precision = predicted > 0 ? tp / predicted : 0.0;
    s.recall = truth > 0 ? tp / truth : 0.0;
    s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    s.undefined = truth == 0 && predicted == 0;
  }
  return out;
}

Eigen::VectorXd per_class_f1(const ConfusionMatrix& confusion) {
  const auto scores = per_class_scores(confusion);
  Eigen::VectorXd f1(static_cast<Index>(scores.size()));
  for (std::size_t c = 0; c < scores.size(); ++c) f1[static_cast<Index>(c)] = scores[c].f1;
  return f1;
}

double macro_f1(const ConfusionMatrix& confusion, int exclude_class) {
  const Eigen::VectorXd f1 = per_class_f1(confusion);
  double sum = 0.0;
  int count = 0;
  for (Index c = 0; c < f1.size(); ++c) {
    if (c == exclude_class) continue;
    sum += f1[c];
    ++count;
  }
  return count > 0 ? sum / count : 0.0;
}

double accuracy(const ConfusionMatrix& confusion) {
  const long long total = confusion.sum();
  return total > 0 ? static_cast<double>(confusion.trace()) / static_cast<double>(total) : 0.0;
}

EvalResult summarize(std::vector<std::string> class_names, const std::vector<int>& truth,
                     const std::vector<int>& predicted, bool include_unknown) {
  if (truth.size() != predicted.size()) throw DimensionError("truth and prediction counts differ");
  const auto k = static_cast<Index>(class_names.size());
  EvalResult r;
  r.confusion = ConfusionMatrix::Zero(k, k);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= k || predicted[i] < 0 || predicted[i] >= k)
      throw DimensionError("label outside the class inventory");
    ++r.confusion(truth[i], predicted[i]);
  }
  r.class_names = std::move(class_names);
  r.per_class = per_class_scores(r.confusion);
  r.macro_f1 = macro_f1(r.confusion);
  r.macro_f1_without_unknown = k > 1 ? macro_f1(r.confusion, static_cast<int>(k - 1)) : r.macro_f1;
  r.include_unknown = include_unknown;
  r.accuracy = accuracy(r.confusion);
  r.n = static_cast<long long>(truth.size());
  return r;
}

std::vector<int> predict_labels(const model::ModelParams<float>& params, const data::Dataset& dataset,
                                model::Domain domain, int shift) {
  std::vector<int> out(dataset.size());
  parallel_for(dataset.size(), [&](std::size_t i) {
    const auto p = model::predict(params, dataset.samples[i], shift, domain);
    Index best;
    p.maxCoeff(&best);
    out[i] = static_cast<int>(best);
  });
  return out;
}

EvalResult evaluate(const model::ModelParams<float>& params, const data::Dataset& dataset,
                    model::Domain domain, int shift, bool include_unknown) {
  if (dataset.num_classes() != params.dims.classes)
    throw DimensionError("dataset has " + std::to_string(dataset.num_classes()) +
                         " classes, model has " + std::to_string(params.dims.classes));
  std::vector<int> truth;
  truth.reserve(dataset.size());
  for (const auto& s : dataset.samples) {
    if (!s.label) throw InputError("sample '" + s.id + "' has no label");
    truth.push_back(*s.label);
  }
  return summarize(dataset.class_names, truth, predict_labels(params, dataset, domain, shift),
                   include_unknown);
}

nlohmann::json to_json(const EvalResult& r) {
  nlohmann::json per_class = nlohmann::json::array();
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& s = r.per_class[c];
    per_class.push_back({{"class", r.class_names[c]},
                         {"precision", s.precision},
                         {"recall", s.recall},
                         {"f1", s.f1},
                         {"undefined", s.undefined}});
  }
  nlohmann::json confusion = nlohmann::json::array();
  for (Index i = 0; i < r.confusion.rows(); ++i) {
    std::vector<long long> row(static_cast<std::size_t>(r.confusion.cols()));
    for (Index j = 0; j < r.confusion.cols(); ++j) row[static_cast<std::size_t>(j)] = r.confusion(i, j);
    confusion.push_back(row);
  }
  return {{"n", r.n},
          {"accuracy", r.accuracy},
          {"macro_f1", r.headline_f1()},
          {"macro_f1_with_unknown", r.macro_f1},
          {"macro_f1_without_unknown", r.macro_f1_without_unknown},
          {"unknown_included", r.include_unknown},
          {"classes", r.class_names},
          {"per_class", per_class},
          {"confusion", confusion}};
}

std::string confusion_csv(const EvalResult& r) {
  std::ostringstream out;
  out << "truth\\pred";
  for (const auto& name : r.class_names) out << ',' << name;
  out << '\n';
  for (Index i = 0; i < r.confusion.rows(); ++i) {
    out << r.class_names[static_cast<std::size_t>(i)];
    for (Index j = 0; j < r.confusion.cols(); ++j) out << ',' << r.confusion(i, j);
    out << '\n';
  }
  return out.str();
}

}  // namespace tmlab::metrics
