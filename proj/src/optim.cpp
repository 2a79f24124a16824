#include "tmlab/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "tmlab/errors.hpp"

namespace tmlab::model {

namespace {

template <typename A, typename B>
void require_congruent(const A& a, const B& b) {
  bool ok = true;
  zip_weights(
      [&ok](std::string_view, const auto& x, const auto& y) {
        ok = ok && x.rows() == y.rows() && x.cols() == y.cols();
      },
      a, b);
  if (!ok) throw DimensionError("weight tensors are not shape-congruent");
}

}  // namespace

template <typename Scalar>
OptimizerState<Scalar> OptimizerState<Scalar>::create(const ModelDims& dims,
                                                      const AdamConfig& config) {
  if (config.total_steps < 1) throw InputError("optimizer horizon must be at least one step");
  return {config, Weights<Scalar>::zeros(dims), Weights<Scalar>::zeros(dims), 0};
}

double cosine_learning_rate(const AdamConfig& config, std::int64_t step) {
  const double progress =
      std::clamp(static_cast<double>(step) / static_cast<double>(config.total_steps), 0.0, 1.0);
  return 0.5 * config.learning_rate * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename Scalar>
void adam_step(Weights<Scalar>& params, const Weights<Scalar>& grads, OptimizerState<Scalar>& state) {
  require_congruent(params, grads);
  require_congruent(params, state.first_moment);
  const auto& cfg = state.config;
  const double lr = cosine_learning_rate(cfg, state.step);
  ++state.step;
  const double t = static_cast<double>(state.step);
  const Scalar b1 = static_cast<Scalar>(cfg.beta1), b2 = static_cast<Scalar>(cfg.beta2);
  const Scalar c1 = static_cast<Scalar>(1.0 / (1.0 - std::pow(cfg.beta1, t)));
  const Scalar c2 = static_cast<Scalar>(1.0 / (1.0 - std::pow(cfg.beta2, t)));
  const Scalar eps = static_cast<Scalar>(cfg.epsilon);
  const Scalar step_size = static_cast<Scalar>(lr);
  const Scalar decay = static_cast<Scalar>(lr * cfg.weight_decay);

  using Array = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  zip_weights(
      [&](std::string_view, auto& p, const auto& g, auto& m, auto& v) {
        m.array() = b1 * m.array() + (Scalar(1) - b1) * g.array();
        v.array() = b2 * v.array() + (Scalar(1) - b2) * g.array().square();
        const Array update = (m.array() * c1) / ((v.array() * c2).sqrt() + eps);
        p.array() -= step_size * update + decay * p.array();
      },
      params, grads, state.first_moment, state.second_moment);
}

template <typename Scalar>
void ema_update(ModelParams<Scalar>& teacher, const ModelParams<Scalar>& student, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InputError("EMA decay must lie in [0, 1]");
  require_congruent(teacher.weights, student.weights);
  if (alpha == 1.0) return;
  if (alpha == 0.0) {
    teacher.weights = student.weights;
    teacher.norm = student.norm;
    return;
  }
  const Scalar keep = static_cast<Scalar>(alpha), take = static_cast<Scalar>(1.0 - alpha);
  auto blend = [&](std::string_view, auto& t, const auto& s) { t = take * s + keep * t; };
  zip_weights(blend, teacher.weights, student.weights);
  for (std::size_t d = 0; d < teacher.norm.size(); ++d)
    zip_norm_stats(blend, teacher.norm[d], student.norm[d]);
}

template <typename Scalar>
void accumulate(Weights<Scalar>& a, const Weights<Scalar>& b, Scalar scale) {
  require_congruent(a, b);
  zip_weights([scale](std::string_view, auto& x, const auto& y) { x += scale * y; }, a, b);
}

template struct OptimizerState<float>;
template struct OptimizerState<double>;
template void adam_step<float>(Weights<float>&, const Weights<float>&, OptimizerState<float>&);
template void adam_step<double>(Weights<double>&, const Weights<double>&, OptimizerState<double>&);
template void ema_update<float>(ModelParams<float>&, const ModelParams<float>&, double);
template void ema_update<double>(ModelParams<double>&, const ModelParams<double>&, double);
template void accumulate<float>(Weights<float>&, const Weights<float>&, float);
template void accumulate<double>(Weights<double>&, const Weights<double>&, double);

}  // namespace tmlab::model
