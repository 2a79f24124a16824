#pragma once

#include <cstdint>

#include "tmlab/model.hpp"

namespace tmlab::model {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-4;
  std::int64_t total_steps = 1;  // cosine horizon
};

template <typename Scalar>
struct OptimizerState {
  AdamConfig config;
  Weights<Scalar> first_moment;
  Weights<Scalar> second_moment;
  std::int64_t step = 0;

  static OptimizerState create(const ModelDims& dims, const AdamConfig& config);
};

// Cosine annealing from config.learning_rate at step 0 to 0 at total_steps.
double cosine_learning_rate(const AdamConfig& config, std::int64_t step);

// One Adam step with decoupled weight decay, using the schedule's rate for the
// current step; increments the step counter.
template <typename Scalar>
void adam_step(Weights<Scalar>& params, const Weights<Scalar>& grads, OptimizerState<Scalar>& state);

// teacher <- (1 - alpha) * student + alpha * teacher on weights and on both
// domains' running statistics.
template <typename Scalar>
void ema_update(ModelParams<Scalar>& teacher, const ModelParams<Scalar>& student, double alpha);

// a += scale * b
template <typename Scalar>
void accumulate(Weights<Scalar>& a, const Weights<Scalar>& b, Scalar scale = Scalar(1));

}  // namespace tmlab::model
