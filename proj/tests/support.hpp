#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tmlab/adapt.hpp"
#include "tmlab/model.hpp"
#include "tmlab/rng.hpp"
#include "tmlab/sits_data.hpp"

namespace tmlab::testing {

// Random sample with uniform pixels and strictly increasing days from `first`.
inline data::TimeSeriesSample random_sample(Rng& rng, Eigen::Index t, Eigen::Index n, Eigen::Index c,
                                            int first_day = 1, int label = 0) {
  data::TimeSeriesSample s;
  s.id = "s" + std::to_string(rng() % 100000);
  std::uniform_int_distribution<int> gap(1, 12);
  int day = first_day;
  for (Eigen::Index j = 0; j < t; ++j) {
    s.days.push_back(day);
    day += gap(rng);
  }
  s.pixels_per_step = n;
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  s.pixels = data::PixelMatrix::NullaryExpr(c, t * n, [&] { return u(rng); });
  s.label = label;
  return s;
}

inline std::vector<std::string> class_names(Eigen::Index k) {
  std::vector<std::string> names;
  for (Eigen::Index j = 0; j + 1 < k; ++j) names.push_back("c" + std::to_string(j));
  names.emplace_back(data::kUnknownClass);
  return names;
}

// Small model used across unit tests.
template <typename Scalar>
model::ModelParams<Scalar> tiny_params(std::uint64_t seed, Eigen::Index classes = 3, int max_shift = 60,
                                       Eigen::Index channels = 4) {
  const model::ModelDims dims{channels, 8, 8, 4, 8, classes};
  const model::PosEncConfig posenc{8, max_shift, 10000.0};
  return model::init_params<Scalar>(dims, posenc, class_names(classes), seed);
}

// Desk-scale model for training runs on the synthetic scenarios.
inline model::ModelParams<float> desk_params(Eigen::Index classes, std::uint64_t seed,
                                             std::vector<std::string> names) {
  const model::ModelDims dims{4, 32, 32, 8, 32, classes};
  const model::PosEncConfig posenc{32, 60, 10000.0};
  return model::init_params<float>(dims, posenc, std::move(names), seed);
}

inline adapt::TrainConfig desk_config(std::uint64_t seed) {
  adapt::TrainConfig cfg;
  cfg.batch_size = 32;
  cfg.pixel_set = 16;
  cfg.pretrain_epochs = 25;
  cfg.pretrain_iterations = 50;
  cfg.adapt_epochs = 10;
  cfg.adapt_iterations = 50;
  cfg.adapt_lr = 5e-4;
  cfg.sample_cap = 1000;
  cfg.seed = seed;
  return cfg;
}

// Central-difference check of backward() composed with the weighted focal
// loss. Returns the worst per-tensor relative error
// ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-6).
inline double gradient_check(const model::ModelParams<double>& params,
                             const std::vector<data::TimeSeriesSample>& batch,
                             const std::vector<int>& shifts, const std::vector<int>& labels,
                             model::Domain domain, model::Mode mode, double h = 1e-4,
                             std::string* worst_name = nullptr) {
  const std::vector<double> weights(batch.size(), 1.0 / static_cast<double>(batch.size()));
  auto loss_of = [&](const model::ModelParams<double>& p) {
    const auto fwd = model::forward<double>(p, batch, shifts, domain, mode);
    return model::focal_loss_gradient<double>(fwd.probs, labels, weights, 1.0).loss;
  };
  const auto fwd = model::forward<double>(params, batch, shifts, domain, mode);
  const auto lg = model::focal_loss_gradient<double>(fwd.probs, labels, weights, 1.0);
  const auto analytic = model::backward<double>(params, fwd.cache, lg.dlogits);

  auto probe = params;
  auto numeric = analytic;
  model::zip_weights(
      [&](std::string_view, auto& target, auto& out) {
        for (Eigen::Index j = 0; j < target.size(); ++j) {
          const double keep = target.data()[j];
          target.data()[j] = keep + h;
          const double up = loss_of(probe);
          target.data()[j] = keep - h;
          const double down = loss_of(probe);
          target.data()[j] = keep;
          out.data()[j] = (up - down) / (2 * h);
        }
      },
      probe.weights, numeric);

  double worst = 0.0;
  model::zip_weights(
      [&](std::string_view name, const auto& a, const auto& n) {
        const double scale = std::max({a.norm(), n.norm(), 1e-6});
        const double err = (a - n).norm() / scale;
        if (err > worst) {
          worst = err;
          if (worst_name) *worst_name = std::string(name);
        }
      },
      analytic, numeric);
  return worst;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("tmlab-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace tmlab::testing
