#include "tmlab/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "tmlab/errors.hpp"
#include "tmlab/metrics.hpp"
#include "tmlab/rng.hpp"

namespace tmlab::adapt {

using data::Dataset;
using data::TimeSeriesSample;
using model::Domain;
using model::Mode;
using model::Weights;

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw InputError(what);
  };
  require(max_shift >= 0, "train.max_shift must be >= 0");
  require(lambda >= 0 && std::isfinite(lambda), "train.lambda must be >= 0");
  require(alpha >= 0 && alpha <= 1, "train.alpha must lie in [0, 1]");
  // Thresholds >= 1 switch pseudo-labelling off; run configs keep it in [0, 1].
  require(threshold >= 0 && std::isfinite(threshold), "train.threshold must be >= 0");
  require(focal_gamma >= 0, "train.focal_gamma must be >= 0");
  require(batch_size >= 1, "train.batch_size must be >= 1");
  require(pixel_set >= 1, "train.pixel_set must be >= 1");
  require(timesteps >= 1, "train.timesteps must be >= 1");
  require(pretrain_epochs >= 1, "train.pretrain_epochs must be >= 1");
  require(pretrain_iterations >= 0, "train.pretrain_iterations must be >= 0");
  require(adapt_epochs >= 0, "train.adapt_epochs must be >= 0");
  require(adapt_iterations >= 1, "train.adapt_iterations must be >= 1");
  require(pretrain_lr > 0 && adapt_lr > 0, "learning rates must be positive");
  require(weight_decay >= 0, "train.weight_decay must be >= 0");
  require(bn_momentum >= 0 && bn_momentum <= 1, "train.bn_momentum must lie in [0, 1]");
  require(sample_cap >= 1, "train.sample_cap must be >= 1");
}

std::string_view to_string(Method method) {
  switch (method) {
    case Method::timematch:
      return "timematch";
    case Method::fixmatch:
      return "fixmatch";
    case Method::source_only:
      return "source_only";
    case Method::shiftaug_source:
      return "shiftaug_source";
  }
  return "timematch";
}

Method method_from_string(std::string_view name) {
  if (name == "timematch") return Method::timematch;
  if (name == "fixmatch") return Method::fixmatch;
  if (name == "source_only") return Method::source_only;
  if (name == "shiftaug_source") return Method::shiftaug_source;
  throw InputError("unknown method '" + std::string(name) +
                   "' (expected timematch|fixmatch|source_only|shiftaug_source)");
}

namespace {

void emit(const Logger& log, const nlohmann::json& event) {
  if (log) log(event);
}

TimeSeriesSample augment(const TimeSeriesSample& s, Index pixel_set, Index timesteps, Rng& rng) {
  auto out = data::subsample_pixels(s, pixel_set, rng);
  return timesteps > 0 ? data::subsample_timesteps(out, timesteps, rng) : out;
}

// Train-mode forward and backward of a weighted focal loss on one domain;
// adds the gradient into `grad` and updates the domain's running statistics.
// Returns the unweighted-by-scale loss sum_i w_i * focal_i.
double train_pass(ModelParams<float>& params, const std::vector<TimeSeriesSample>& batch,
                  const std::vector<int>& shifts, const std::vector<int>& labels,
                  const std::vector<double>& loss_weights, double grad_scale, Domain domain,
                  const TrainConfig& cfg, Weights<float>& grad) {
  auto fwd = model::forward<float>(params, batch, shifts, domain, Mode::train);
  const auto lg = model::focal_loss_gradient<float>(fwd.probs, labels, loss_weights, cfg.focal_gamma);
  if (!std::isfinite(lg.loss)) throw NumericError("non-finite training loss");
  if (grad_scale != 0.0 && !lg.dlogits.isZero(0)) {
    const Weights<float> g = model::backward<float>(params, fwd.cache, lg.dlogits);
    if (!model::all_finite(g)) throw NumericError("non-finite gradient");
    model::accumulate(grad, g, static_cast<float>(grad_scale));
  }
  model::update_running_stats(params, fwd.cache, cfg.bn_momentum);
  return lg.loss;
}

void check_labeled(const Dataset& d) {
  for (const auto& s : d.samples)
    if (!s.label) throw InputError("sample '" + s.id + "' has no label");
}

}  // namespace

PretrainResult pretrain_source(const Dataset& train, const Dataset& val,
                               const ModelParams<float>& init, const TrainConfig& cfg,
                               bool shiftaug, const Logger& log) {
  cfg.validate();
  if (train.empty()) throw InputError("pre-training needs a non-empty source dataset");
  check_labeled(train);
  check_labeled(val);
  if (train.num_classes() != init.dims.classes)
    throw DimensionError("source dataset and model disagree on the number of classes");
  if (shiftaug && cfg.max_shift > init.posenc.max_shift)
    throw ShiftRangeError("ShiftAug range exceeds the model's maximum shift");

  const Index b = cfg.batch_size;
  const Index per_epoch = cfg.pretrain_iterations > 0
                              ? cfg.pretrain_iterations
                              : (static_cast<Index>(train.size()) + b - 1) / b;
  model::AdamConfig adam{cfg.pretrain_lr, 0.9, 0.999, 1e-8, cfg.weight_decay,
                         static_cast<std::int64_t>(cfg.pretrain_epochs) * per_epoch};

  PretrainResult result;
  result.shiftaug = shiftaug;
  result.params = init;
  result.optimizer = model::OptimizerState<float>::create(init.dims, adam);
  ModelParams<float> params = init;
  data::BalancedBatchSampler sampler(train, b, derive_seed(cfg.seed, "batches"));
  Rng aug_rng = make_rng(cfg.seed, "augment");
  Rng shift_rng = make_rng(cfg.seed, "shiftaug");
  std::uniform_int_distribution<int> shift_dist(-cfg.max_shift, cfg.max_shift);
  double best_f1 = -1.0;

  for (int epoch = 1; epoch <= cfg.pretrain_epochs; ++epoch) {
    double loss_sum = 0.0;
    for (Index it = 0; it < per_epoch; ++it) {
      const auto idx = sampler.next();
      std::vector<TimeSeriesSample> batch;
      std::vector<int> shifts, labels;
      batch.reserve(idx.size());
      for (std::size_t i : idx) {
        batch.push_back(augment(train.samples[i], cfg.pixel_set, cfg.timesteps, aug_rng));
        shifts.push_back(shiftaug ? shift_dist(shift_rng) : 0);
        labels.push_back(*train.samples[i].label);
      }
      const std::vector<double> w(idx.size(), 1.0 / static_cast<double>(idx.size()));
      Weights<float> grad = Weights<float>::zeros(params.dims);
      loss_sum += train_pass(params, batch, shifts, labels, w, 1.0, Domain::source, cfg, grad);
      model::adam_step(params.weights, grad, result.optimizer);
    }
    PretrainEpoch rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(per_epoch);
    rec.learning_rate = model::cosine_learning_rate(adam, result.optimizer.step);
    rec.val_macro_f1 = val.empty() ? 0.0
                                   : metrics::evaluate(params, val, Domain::source).headline_f1();
    result.epochs.push_back(rec);
    emit(log, {{"event", "pretrain_epoch"},
               {"epoch", rec.epoch},
               {"loss", rec.loss},
               {"val_macro_f1", rec.val_macro_f1},
               {"lr", rec.learning_rate},
               {"shiftaug", shiftaug}});
    if (val.empty() || rec.val_macro_f1 > best_f1) {
      best_f1 = rec.val_macro_f1;
      result.best_epoch = epoch;
      result.params = params;
    }
  }
  result.params.norm_for(Domain::target) = result.params.norm_for(Domain::source);
  emit(log, {{"event", "pretrain_done"}, {"best_epoch", result.best_epoch}, {"best_val_macro_f1", best_f1}});
  return result;
}

PseudoLabels make_pseudo_labels(const model::Matrix<float>& probs, double threshold) {
  PseudoLabels out;
  out.labels.resize(static_cast<std::size_t>(probs.cols()));
  out.confident.resize(static_cast<std::size_t>(probs.cols()));
  for (Index j = 0; j < probs.cols(); ++j) {
    Index arg;
    const double conf = static_cast<double>(probs.col(j).maxCoeff(&arg));
    out.labels[static_cast<std::size_t>(j)] = static_cast<int>(arg);
    out.confident[static_cast<std::size_t>(j)] = conf > threshold;
    out.passed += conf > threshold;
  }
  return out;
}

namespace {

AdaptResult self_train(const Dataset& source, const Dataset& target, const ModelParams<float>& init,
                       const TrainConfig& cfg, bool estimate_shifts, Method method,
                       const Logger& log) {
  cfg.validate();
  if (source.empty() || target.empty()) throw InputError("adaptation needs non-empty source and target");
  check_labeled(source);
  if (source.num_classes() != init.dims.classes || target.num_classes() != init.dims.classes)
    throw DimensionError("datasets and model disagree on the number of classes");
  if (cfg.max_shift > init.posenc.max_shift)
    throw ShiftRangeError("train.max_shift exceeds the model's maximum shift");

  const Index b = cfg.batch_size;
  const Index m = cfg.adapt_iterations;
  const Index k = init.dims.classes;
  model::AdamConfig adam{cfg.adapt_lr, 0.9, 0.999, 1e-8, cfg.weight_decay,
                         static_cast<std::int64_t>(cfg.adapt_epochs) * m};
  auto optimizer = model::OptimizerState<float>::create(init.dims, adam);

  AdaptResult result{init, init, {}};
  result.report.method = method;
  auto& student = result.student;
  auto& teacher = result.teacher;
  data::BalancedBatchSampler source_sampler(source, b, derive_seed(cfg.seed, "source-batches"));
  data::UniformBatchSampler target_sampler(target.size(), b, derive_seed(cfg.seed, "target-batches"));
  Rng aug_rng = make_rng(cfg.seed, "augment");
  const bool target_labeled =
      std::all_of(target.samples.begin(), target.samples.end(), [](const auto& s) { return s.label.has_value(); });

  std::optional<Eigen::VectorXd> class_dist;
  int delta_t_to_s = 0, delta_s_to_t = 0;

  for (int epoch = 1; epoch <= cfg.adapt_epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    if (estimate_shifts) {
      shift::ShiftScanner scanner(
          shift::ModelPredictor(teacher, target, Domain::target, cfg.sample_cap,
                                derive_seed(cfg.seed, "estimate")),
          cfg.max_shift);
      auto est = scanner.estimate(class_dist);
      ++result.report.shift_estimations;
      delta_t_to_s = est.delta;
      if (epoch == 1) {
        const auto [lo, hi] = std::minmax_element(est.curve.begin(), est.curve.end(),
                                                  [](const auto& a, const auto& c) { return a.second < c.second; });
        if (hi->second - lo->second <= 1e-12) {
          result.report.flat_initial_curve = true;
          delta_t_to_s = 0;
          emit(log, {{"event", "warning"}, {"message", "flat shift-score curve in epoch 1; using shift 0"}});
        }
        delta_s_to_t = -delta_t_to_s;
      }
      rec.estimate = std::move(est);
    }
    rec.delta_t_to_s = delta_t_to_s;
    rec.delta_s_to_t = delta_s_to_t;

    Eigen::VectorXd label_counts = Eigen::VectorXd::Zero(k);
    long long passed = 0, total = 0, correct = 0;
    double loss_s_sum = 0.0, loss_t_sum = 0.0;
    for (Index it = 0; it < m; ++it) {
      // Source: strong augmentation, true labels, shifted toward the target.
      const auto src_idx = source_sampler.next();
      std::vector<TimeSeriesSample> src_batch;
      std::vector<int> src_labels;
      for (std::size_t i : src_idx) {
        src_batch.push_back(augment(source.samples[i], cfg.pixel_set, cfg.timesteps, aug_rng));
        src_labels.push_back(*source.samples[i].label);
      }
      const std::vector<int> src_shifts(src_idx.size(), delta_s_to_t);

      // Target: one pixel set per sample. The teacher sees every time step
      // moved by delta^{t->s}; the student a random subset of k steps in the
      // target's own time.
      const auto tgt_idx = target_sampler.next();
      std::vector<TimeSeriesSample> weak, strong;
      for (std::size_t i : tgt_idx) {
        weak.push_back(data::subsample_pixels(target.samples[i], cfg.pixel_set, aug_rng));
        strong.push_back(data::subsample_timesteps(weak.back(), cfg.timesteps, aug_rng));
      }
      const std::vector<int> teacher_shifts(tgt_idx.size(), delta_t_to_s);
      const std::vector<int> student_shifts(tgt_idx.size(), 0);
      const auto teacher_out = model::forward<float>(teacher, weak, teacher_shifts, Domain::target, Mode::eval);

      const auto pl = make_pseudo_labels(teacher_out.probs, cfg.threshold);
      std::vector<double> mask_w(tgt_idx.size());
      const double inv_b = 1.0 / static_cast<double>(tgt_idx.size());
      for (std::size_t j = 0; j < tgt_idx.size(); ++j) {
        label_counts[pl.labels[j]] += 1.0;
        mask_w[j] = pl.confident[j] ? inv_b : 0.0;
        if (target_labeled) correct += (*target.samples[tgt_idx[j]].label == pl.labels[j]);
      }
      passed += static_cast<long long>(pl.passed);
      total += static_cast<long long>(tgt_idx.size());

      Weights<float> grad = Weights<float>::zeros(student.dims);
      const std::vector<double> src_w(src_idx.size(), 1.0 / static_cast<double>(src_idx.size()));
      const double loss_s = train_pass(student, src_batch, src_shifts, src_labels, src_w, 1.0,
                                       Domain::source, cfg, grad);
      const double loss_t = train_pass(student, strong, student_shifts, pl.labels, mask_w, cfg.lambda,
                                       Domain::target, cfg, grad);
      model::adam_step(student.weights, grad, optimizer);
      model::ema_update(teacher, student, cfg.alpha);

      loss_s_sum += loss_s;
      loss_t_sum += loss_t;
      result.report.target_loss_stream.push_back(loss_t);
      ++result.report.iterations;
    }
    rec.loss_source = loss_s_sum / static_cast<double>(m);
    rec.loss_target = loss_t_sum / static_cast<double>(m);
    rec.pass_fraction = static_cast<double>(passed) / static_cast<double>(total);
    if (target_labeled) rec.pseudo_label_accuracy = static_cast<double>(correct) / static_cast<double>(total);
    rec.class_distribution = label_counts / static_cast<double>(total);
    class_dist = rec.class_distribution;
    emit(log, [&] {
      auto j = to_json(rec);
      j["event"] = "adapt_epoch";
      return j;
    }());
    result.report.epochs.push_back(std::move(rec));
  }
  return result;
}

}  // namespace

AdaptResult timematch(const Dataset& source, const Dataset& target, const ModelParams<float>& init,
                      const TrainConfig& cfg, const Logger& log) {
  return self_train(source, target, init, cfg, true, Method::timematch, log);
}

AdaptResult fixmatch(const Dataset& source, const Dataset& target, const ModelParams<float>& init,
                     const TrainConfig& cfg, const Logger& log) {
  return self_train(source, target, init, cfg, false, Method::fixmatch, log);
}

AdaptResult run_adaptation(Method method, const Dataset& source, const Dataset& target,
                           const ModelParams<float>& init, const TrainConfig& cfg, const Logger& log) {
  switch (method) {
    case Method::timematch:
      return timematch(source, target, init, cfg, log);
    case Method::fixmatch:
      return fixmatch(source, target, init, cfg, log);
    case Method::source_only:
    case Method::shiftaug_source:
      break;
  }
  cfg.validate();
  AdaptResult result{init, init, {}};
  result.report.method = method;
  return result;
}

nlohmann::json to_json(const EpochRecord& r) {
  nlohmann::json j = {{"epoch", r.epoch},
                      {"delta_t_to_s", r.delta_t_to_s},
                      {"delta_s_to_t", r.delta_s_to_t},
                      {"pass_fraction", r.pass_fraction},
                      {"loss_source", r.loss_source},
                      {"loss_target", r.loss_target},
                      {"class_distribution",
                       std::vector<double>(r.class_distribution.data(),
                                           r.class_distribution.data() + r.class_distribution.size())}};
  j["pseudo_label_accuracy"] = r.pseudo_label_accuracy ? nlohmann::json(*r.pseudo_label_accuracy) : nullptr;
  if (r.estimate) {
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& [s, v] : r.estimate->curve) curve.push_back({s, v});
    j["estimate"] = {{"metric", shift::to_string(r.estimate->metric)}, {"curve", curve}};
  } else {
    j["estimate"] = nullptr;
  }
  return j;
}

std::string report_jsonl(const AdaptReport& report) {
  std::ostringstream out;
  for (const auto& e : report.epochs) out << to_json(e).dump() << '\n';
  nlohmann::json summary = {{"summary", true},
                            {"method", to_string(report.method)},
                            {"epochs", report.epochs.size()},
                            {"iterations", report.iterations},
                            {"shift_estimations", report.shift_estimations},
                            {"flat_initial_curve", report.flat_initial_curve}};
  summary["final_delta_t_to_s"] = report.epochs.empty() ? nlohmann::json(nullptr)
                                                        : nlohmann::json(report.epochs.back().delta_t_to_s);
  summary["delta_s_to_t"] = report.epochs.empty() ? nlohmann::json(nullptr)
                                                  : nlohmann::json(report.epochs.front().delta_s_to_t);
  out << summary.dump() << '\n';
  return out.str();
}

}  // namespace tmlab::adapt
