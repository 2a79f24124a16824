#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tmlab/rng.hpp"

namespace tmlab::data {

using Eigen::Index;

// Pixel payload of one parcel. Column `t * N + n` holds the C channel values of
// pixel n at time step t, so the column-major buffer is exactly the row-major
// T x N x C layout used on disk.
using PixelMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic>;

inline constexpr int kMinDay = 1;
inline constexpr int kMaxDay = 366;
inline constexpr const char* kUnknownClass = "unknown";

struct TimeSeriesSample {
  std::string id;
  std::vector<int> days;
  Index pixels_per_step = 0;
  PixelMatrix pixels;
  std::optional<int> label;

  Index timesteps() const { return static_cast<Index>(days.size()); }
  Index channels() const { return pixels.rows(); }

  // C x N block of time step t.
  auto step(Index t) const { return pixels.middleCols(t * pixels_per_step, pixels_per_step); }
  auto step(Index t) { return pixels.middleCols(t * pixels_per_step, pixels_per_step); }

  friend bool operator==(const TimeSeriesSample& a, const TimeSeriesSample& b);
};

struct Dataset {
  std::string domain_id;
  std::vector<std::string> class_names;
  Index channels = 0;
  std::vector<TimeSeriesSample> samples;

  Index num_classes() const { return static_cast<Index>(class_names.size()); }
  // Index of the reserved "unknown" entry (the last class).
  int unknown_class() const { return static_cast<int>(class_names.size()) - 1; }
  bool empty() const { return samples.empty(); }
  std::size_t size() const { return samples.size(); }

  friend bool operator==(const Dataset& a, const Dataset& b);
};

// Throws ParseError naming the sample when a structural invariant is broken:
// strictly increasing days in [1, 366] (unless `allow_shifted_days`), non-empty
// dimensions, finite pixels, label < num_classes.
void validate_sample(const TimeSeriesSample& sample, Index channels, Index num_classes,
                     bool allow_shifted_days = false);
void validate_dataset(const Dataset& dataset);

// ---------------------------------------------------------------------------
// Synthetic phenology

// Double-logistic seasonal curve mixed into C channels.
struct PhenologyClassSpec {
  std::string name;
  double start_of_season = 120;  // t_sos
  double end_of_season = 240;    // t_eos
  double amplitude = 0.5;
  double baseline = 0.1;
  double rise_slope = 0.1;  // k1
  double fall_slope = 0.1;  // k2
  Eigen::VectorXd mix;      // per-channel weights

  void validate() const;
};

// Value of the class curve at `day`, one entry per channel.
Eigen::VectorXd phenology_value(const PhenologyClassSpec& spec, int day);

// Same curve with both season edges moved by `offset` days and evaluated at a
// real-valued day.
double phenology_curve(const PhenologyClassSpec& spec, double day, double offset = 0.0);

// Catch-all class: AR(1) coloured noise around a per-parcel random baseline.
struct UnknownClassSpec {
  double baseline_min = 0.1;
  double baseline_max = 0.45;
  double amplitude = 0.08;
  double correlation = 0.8;
};

struct AcquisitionCalendar {
  std::vector<int> days;
  double dropout = 0.0;
};

struct DomainSpec {
  std::string id;
  // True target-to-source shift: this domain's seasons occur `shift` days
  // earlier than the reference phenology, so adding `shift` to its days aligns
  // it with a domain whose shift is 0.
  int shift = 0;
  AcquisitionCalendar calendar;
  std::vector<double> class_frequencies;  // one per class, unknown last
  Index pixels_min = 16;
  Index pixels_max = 32;
  double pixel_noise = 0.02;
  double jitter = 4.0;
  Index samples = 1000;
};

struct ScenarioSpec {
  Index channels = 4;
  std::vector<PhenologyClassSpec> classes;  // real classes; unknown is implicit
  UnknownClassSpec unknown;
  std::vector<DomainSpec> domains;

  std::vector<std::string> class_names() const;
  const DomainSpec& domain(const std::string& id) const;
  void validate() const;
};

inline constexpr int kMaxScenarioShift = 120;

// Four crop classes sharing one spectral signature and differing in season
// timing, plus unknown; domains "source" (shift 0) and "target" (shift
// `target_shift`).
ScenarioSpec standard_scenario(int target_shift, Index samples_per_domain = 2000);

// Four crops with one spectral signature: "early" and "late" share one curve
// offset by 25 days, so only timing separates them; "winter" and "summer" also
// differ in season length and slope.
ScenarioSpec confusable_scenario(int target_shift, Index samples_per_domain = 2000);

// Calendar every `step` days from `first` up to `last`.
AcquisitionCalendar regular_calendar(int first, int step, double dropout, int last = kMaxDay);

// Sample i draws from its own stream derive_seed(seed, i), so the result
// depends only on the domain spec and the seed; give each domain its own seed
// to decorrelate domains.
Dataset generate_domain(const ScenarioSpec& scenario, const std::string& domain_id,
                        std::uint64_t seed);

// ---------------------------------------------------------------------------
// Augmentation

TimeSeriesSample shift_days(const TimeSeriesSample& sample, int delta);
TimeSeriesSample subsample_timesteps(const TimeSeriesSample& sample, Index k, Rng& rng);
TimeSeriesSample subsample_pixels(const TimeSeriesSample& sample, Index set_size, Rng& rng);

// ---------------------------------------------------------------------------
// Batching

// Class-balanced index stream: per batch, class counts differ by at most one.
// Each class cycles through a reshuffled queue, so classes smaller than their
// share repeat samples.
class BalancedBatchSampler {
 public:
  BalancedBatchSampler(const Dataset& dataset, Index batch_size, std::uint64_t seed);

  std::vector<std::size_t> next();
  const std::vector<int>& classes() const { return classes_; }

 private:
  std::size_t draw(std::size_t slot);

  Index batch_size_;
  Rng rng_;
  std::vector<int> classes_;
  std::vector<std::vector<std::size_t>> members_;
  std::vector<std::vector<std::size_t>> queues_;
  std::vector<std::size_t> cursors_;
};

// Uniform index stream over the whole dataset, reshuffled on every pass.
class UniformBatchSampler {
 public:
  UniformBatchSampler(std::size_t dataset_size, Index batch_size, std::uint64_t seed);

  std::vector<std::size_t> next();

 private:
  Index batch_size_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

struct DatasetSplits {
  Dataset train;
  Dataset val;
  Dataset test;
};

// Seeded 70/10/20 split. Sizes always sum to the input size.
DatasetSplits split_dataset(const Dataset& dataset, std::uint64_t seed, double train_fraction = 0.7,
                            double val_fraction = 0.1);

// Remaps labels of classes with fewer than `min_count` samples to unknown and
// drops those classes from the inventory. Returns the surviving original class
// indices in order (unknown last).
std::vector<int> remap_rare_classes(Dataset& dataset, std::size_t min_count);

// Keeps the listed original classes in the given order (unknown last) and
// folds every other label into unknown.
void select_classes(Dataset& dataset, const std::vector<int>& kept);

std::vector<std::size_t> class_counts(const Dataset& dataset);

}  // namespace tmlab::data
