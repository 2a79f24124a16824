#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include <json.hpp>

#include "tmlab/adapt.hpp"
#include "tmlab/model.hpp"
#include "tmlab/shift.hpp"
#include "tmlab/sits_data.hpp"

namespace tmlab::config {

struct RunConfig {
  adapt::TrainConfig train;
  Eigen::Index hidden = 64;
  Eigen::Index embed = 64;
  Eigen::Index key = 16;
  Eigen::Index value = 64;
  double posenc_base = 10000.0;
  adapt::Method method = adapt::Method::timematch;
  shift::Metric metric = shift::Metric::activation_maximization;
  std::size_t min_class_samples = 200;
  bool include_unknown = true;

  model::ModelDims dims(Eigen::Index channels, Eigen::Index classes) const;
  model::PosEncConfig posenc() const;
  // Throws InputError on out-of-range values.
  void validate() const;
};

// Flat "dotted.key = value" lines ('#' starts a comment) or a JSON object whose
// nested objects flatten to the same dotted keys. Unknown keys are rejected.
RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& config);

nlohmann::json scenario_to_json(const data::ScenarioSpec& scenario);
// Accepts the output of scenario_to_json, and calendars given either as
// {"days": [...], "dropout": p} or {"first": d, "step": s, "dropout": p}.
// {"preset": "standard"|"confusable", "shift": d, "samples": n} expands a preset.
data::ScenarioSpec scenario_from_json(const nlohmann::json& j);
data::ScenarioSpec load_scenario(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);

}  // namespace tmlab::config
