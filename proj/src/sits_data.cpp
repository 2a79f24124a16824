#include "tmlab/sits_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "tmlab/errors.hpp"

namespace tmlab::data {

namespace {

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::string sample_id(const std::string& domain, std::size_t index) {
  std::string digits = std::to_string(index);
  if (digits.size() < 6) digits.insert(0, 6 - digits.size(), '0');
  return domain + "-" + digits;
}

}  // namespace

bool operator==(const TimeSeriesSample& a, const TimeSeriesSample& b) {
  return a.id == b.id && a.days == b.days && a.pixels_per_step == b.pixels_per_step &&
         a.label == b.label && a.pixels.rows() == b.pixels.rows() &&
         a.pixels.cols() == b.pixels.cols() &&
         std::equal(a.pixels.data(), a.pixels.data() + a.pixels.size(), b.pixels.data(),
                    [](float x, float y) {
                      return std::memcmp(&x, &y, sizeof(float)) == 0;
                    });
}

bool operator==(const Dataset& a, const Dataset& b) {
  return a.domain_id == b.domain_id && a.class_names == b.class_names &&
         a.channels == b.channels && a.samples == b.samples;
}

void validate_sample(const TimeSeriesSample& s, Index channels, Index num_classes,
                     bool allow_shifted_days) {
  if (s.days.empty()) throw ParseError("sample has no time steps", 0, s.id);
  if (s.pixels_per_step < 1) throw ParseError("sample has no pixels", 0, s.id);
  if (s.channels() != channels)
    throw ParseError("channel count " + std::to_string(s.channels()) + " != " +
                         std::to_string(channels),
                     0, s.id);
  if (s.pixels.cols() != s.timesteps() * s.pixels_per_step)
    throw ParseError("pixel payload does not match T x N", 0, s.id);
  for (std::size_t j = 0; j < s.days.size(); ++j) {
    if (!allow_shifted_days && (s.days[j] < kMinDay || s.days[j] > kMaxDay))
      throw ParseError("day " + std::to_string(s.days[j]) + " outside [1, 366]", 0, s.id);
    if (j > 0 && s.days[j] <= s.days[j - 1])
      throw ParseError("days are not strictly increasing", 0, s.id);
  }
  if (!s.pixels.allFinite()) throw ParseError("non-finite pixel value", 0, s.id);
  if (s.label && (*s.label < 0 || *s.label >= num_classes))
    throw ParseError("label " + std::to_string(*s.label) + " out of range", 0, s.id);
}

void validate_dataset(const Dataset& d) {
  if (d.class_names.empty()) throw ParseError("dataset has no classes");
  if (std::count(d.class_names.begin(), d.class_names.end(), kUnknownClass) != 1 ||
      d.class_names.back() != kUnknownClass)
    throw ParseError("class list must end with exactly one 'unknown' entry");
  if (d.channels < 1) throw ParseError("dataset must have at least one channel");
  for (const auto& s : d.samples) validate_sample(s, d.channels, d.num_classes());
}

// ---------------------------------------------------------------------------

void PhenologyClassSpec::validate() const {
  if (!(start_of_season < end_of_season))
    throw InputError("class '" + name + "': start of season must precede end of season");
  if (!(amplitude > 0)) throw InputError("class '" + name + "': amplitude must be positive");
  if (!(rise_slope > 0) || !(fall_slope > 0))
    throw InputError("class '" + name + "': slopes must be positive");
  if (mix.size() == 0) throw InputError("class '" + name + "': empty channel mix");
}

double phenology_curve(const PhenologyClassSpec& spec, double day, double offset) {
  return spec.baseline +
         spec.amplitude * (logistic(spec.rise_slope * (day - spec.start_of_season - offset)) -
                           logistic(spec.fall_slope * (day - spec.end_of_season - offset)));
}

Eigen::VectorXd phenology_value(const PhenologyClassSpec& spec, int day) {
  return spec.mix * phenology_curve(spec, day);
}

std::vector<std::string> ScenarioSpec::class_names() const {
  std::vector<std::string> names;
  for (const auto& c : classes) names.push_back(c.name);
  names.emplace_back(kUnknownClass);
  return names;
}

const DomainSpec& ScenarioSpec::domain(const std::string& id) const {
  for (const auto& d : domains)
    if (d.id == id) return d;
  throw InputError("scenario has no domain '" + id + "'");
}

void ScenarioSpec::validate() const {
  if (channels < 1) throw InputError("scenario needs at least one channel");
  if (classes.empty()) throw InputError("scenario needs at least one class");
  for (const auto& c : classes) {
    c.validate();
    if (c.mix.size() != channels)
      throw InputError("class '" + c.name + "': mix has " + std::to_string(c.mix.size()) +
                       " entries, expected " + std::to_string(channels));
    if (c.name == kUnknownClass) throw InputError("'unknown' is reserved");
  }
  if (!(unknown.baseline_min <= unknown.baseline_max) || unknown.amplitude < 0 ||
      std::abs(unknown.correlation) >= 1)
    throw InputError("invalid unknown-class spec");
  const auto k = classes.size() + 1;
  for (const auto& d : domains) {
    const std::string where = "domain '" + d.id + "': ";
    if (std::abs(d.shift) > kMaxScenarioShift) throw InputError(where + "|shift| exceeds 120");
    if (d.calendar.days.empty() || !(d.calendar.dropout >= 0 && d.calendar.dropout < 1))
      throw InputError(where + "calendar is empty after dropout");
    for (std::size_t j = 0; j < d.calendar.days.size(); ++j) {
      if (d.calendar.days[j] < kMinDay || d.calendar.days[j] > kMaxDay)
        throw InputError(where + "calendar day outside [1, 366]");
      if (j > 0 && d.calendar.days[j] <= d.calendar.days[j - 1])
        throw InputError(where + "calendar days must be strictly increasing");
    }
    if (d.class_frequencies.size() != k)
      throw InputError(where + "expected " + std::to_string(k) + " class frequencies");
    double total = 0;
    for (double f : d.class_frequencies) {
      if (!(f >= 0)) throw InputError(where + "negative class frequency");
      total += f;
    }
    if (std::abs(total - 1.0) > 1e-9) throw InputError(where + "class frequencies must sum to 1");
    if (d.pixels_min < 1 || d.pixels_max < d.pixels_min)
      throw InputError(where + "invalid pixel-count range");
    if (d.pixel_noise < 0 || d.jitter < 0) throw InputError(where + "negative noise level");
    if (d.samples < 0) throw InputError(where + "negative sample count");
  }
}

AcquisitionCalendar regular_calendar(int first, int step, double dropout, int last) {
  if (step < 1) throw InputError("regular_calendar: step must be >= 1");
  AcquisitionCalendar cal;
  cal.dropout = dropout;
  for (int d = first; d <= std::min(last, kMaxDay); d += step) cal.days.push_back(d);
  return cal;
}

namespace {

PhenologyClassSpec crop(std::string name, double sos, double eos, double amplitude, double baseline,
                        double k1, double k2, std::initializer_list<double> mix) {
  PhenologyClassSpec c;
  c.name = std::move(name);
  c.start_of_season = sos;
  c.end_of_season = eos;
  c.amplitude = amplitude;
  c.baseline = baseline;
  c.rise_slope = k1;
  c.fall_slope = k2;
  c.mix = Eigen::Map<const Eigen::VectorXd>(mix.begin(), static_cast<Index>(mix.size()));
  return c;
}

ScenarioSpec two_domain_scenario(std::vector<PhenologyClassSpec> classes,
                                 std::vector<double> frequencies, int target_shift,
                                 Index samples) {
  ScenarioSpec s;
  s.channels = 4;
  s.classes = std::move(classes);
  DomainSpec source;
  source.id = "source";
  source.shift = 0;
  // Dense grid with heavy per-sample dropout, shared by both domains: the
  // training set covers every other day, so the model cannot lock onto one
  // sparse revisit grid, and both domains see the same gap statistics.
  source.calendar = regular_calendar(2, 2, 0.75);
  source.class_frequencies = frequencies;
  source.samples = samples;
  DomainSpec target = source;
  target.id = "target";
  target.shift = target_shift;
  s.domains = {source, target};
  return s;
}

}  // namespace

ScenarioSpec standard_scenario(int target_shift, Index samples_per_domain) {
  // One spectral signature for every crop: only season timing and slopes tell
  // the classes apart.
  return two_domain_scenario(
      {
          crop("barley", 70, 165, 0.60, 0.12, 0.10, 0.12, {0.35, 0.55, 1.00, 0.70}),
          crop("wheat", 95, 195, 0.60, 0.12, 0.09, 0.11, {0.35, 0.55, 1.00, 0.70}),
          crop("sunflower", 130, 225, 0.60, 0.12, 0.11, 0.10, {0.35, 0.55, 1.00, 0.70}),
          crop("maize", 160, 265, 0.60, 0.12, 0.12, 0.09, {0.35, 0.55, 1.00, 0.70}),
      },
      {0.28, 0.24, 0.20, 0.18, 0.10}, target_shift, samples_per_domain);
}

ScenarioSpec confusable_scenario(int target_shift, Index samples_per_domain) {
  // "early" and "late" are the same crop 25 days apart; "winter" (long, slow
  // season) and "summer" (short, steep season) differ in shape as well.
  return two_domain_scenario(
      {
          crop("early", 100, 200, 0.60, 0.12, 0.10, 0.10, {0.35, 0.55, 1.00, 0.70}),
          crop("late", 125, 225, 0.60, 0.12, 0.10, 0.10, {0.35, 0.55, 1.00, 0.70}),
          crop("winter", 60, 210, 0.60, 0.12, 0.06, 0.06, {0.35, 0.55, 1.00, 0.70}),
          crop("summer", 160, 220, 0.60, 0.12, 0.15, 0.15, {0.35, 0.55, 1.00, 0.70}),
      },
      {0.25, 0.25, 0.20, 0.20, 0.10}, target_shift, samples_per_domain);
}

Dataset generate_domain(const ScenarioSpec& scenario, const std::string& domain_id,
                        std::uint64_t seed) {
  scenario.validate();
  const DomainSpec& dom = scenario.domain(domain_id);
  const Index channels = scenario.channels;
  const int unknown = static_cast<int>(scenario.classes.size());

  Dataset out;
  out.domain_id = domain_id;
  out.class_names = scenario.class_names();
  out.channels = channels;
  out.samples.reserve(static_cast<std::size_t>(dom.samples));

  for (Index i = 0; i < dom.samples; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    std::discrete_distribution<int> pick_class(dom.class_frequencies.begin(),
                                               dom.class_frequencies.end());
    std::bernoulli_distribution dropped(dom.calendar.dropout);
    std::uniform_int_distribution<Index> pick_n(dom.pixels_min, dom.pixels_max);
    std::normal_distribution<double> unit(0.0, 1.0);

    TimeSeriesSample s;
    s.id = sample_id(domain_id, static_cast<std::size_t>(i));
    const int label = pick_class(rng);
    s.label = label;
    for (int day : dom.calendar.days)
      if (!dropped(rng)) s.days.push_back(day);
    if (s.days.empty()) {
      std::uniform_int_distribution<std::size_t> any(0, dom.calendar.days.size() - 1);
      s.days.push_back(dom.calendar.days[any(rng)]);
    }
    s.pixels_per_step = pick_n(rng);
    const Index steps = s.timesteps();
    s.pixels.resize(channels, steps * s.pixels_per_step);

    // Noise-free parcel signal, C x T.
    Eigen::MatrixXd signal(channels, steps);
    if (label == unknown) {
      std::uniform_real_distribution<double> base(scenario.unknown.baseline_min,
                                                  scenario.unknown.baseline_max);
      const double rho = scenario.unknown.correlation;
      const double innovation = scenario.unknown.amplitude * std::sqrt(1 - rho * rho);
      for (Index c = 0; c < channels; ++c) {
        const double b = base(rng);
        double state = scenario.unknown.amplitude * unit(rng);
        for (Index t = 0; t < steps; ++t) {
          if (t > 0) state = rho * state + innovation * unit(rng);
          signal(c, t) = b + state;
        }
      }
    } else {
      const auto& spec = scenario.classes[static_cast<std::size_t>(label)];
      const double offset = -dom.shift + dom.jitter * unit(rng);
      for (Index t = 0; t < steps; ++t)
        signal.col(t) = spec.mix * phenology_curve(spec, s.days[static_cast<std::size_t>(t)], offset);
    }

    for (Index t = 0; t < steps; ++t)
      for (Index n = 0; n < s.pixels_per_step; ++n)
        for (Index c = 0; c < channels; ++c) {
          const double noisy = signal(c, t) + dom.pixel_noise * unit(rng);
          s.pixels(c, t * s.pixels_per_step + n) = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
        }
    out.samples.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------

TimeSeriesSample shift_days(const TimeSeriesSample& sample, int delta) {
  TimeSeriesSample out = sample;
  for (int& d : out.days) d += delta;
  return out;
}

TimeSeriesSample subsample_timesteps(const TimeSeriesSample& sample, Index k, Rng& rng) {
  if (k < 1) throw InputError("subsample_timesteps: k must be >= 1");
  const Index steps = sample.timesteps();
  if (steps <= k) return sample;
  std::vector<Index> all(static_cast<std::size_t>(steps));
  std::iota(all.begin(), all.end(), Index{0});
  std::vector<Index> keep;
  keep.reserve(static_cast<std::size_t>(k));
  std::sample(all.begin(), all.end(), std::back_inserter(keep), k, rng);

  TimeSeriesSample out;
  out.id = sample.id;
  out.label = sample.label;
  out.pixels_per_step = sample.pixels_per_step;
  out.pixels.resize(sample.channels(), k * sample.pixels_per_step);
  for (Index j = 0; j < k; ++j) {
    const Index t = keep[static_cast<std::size_t>(j)];
    out.days.push_back(sample.days[static_cast<std::size_t>(t)]);
    out.step(j) = sample.step(t);
  }
  return out;
}

TimeSeriesSample subsample_pixels(const TimeSeriesSample& sample, Index set_size, Rng& rng) {
  if (set_size < 1) throw InputError("subsample_pixels: set size must be >= 1");
  const Index n = sample.pixels_per_step;
  std::vector<Index> keep;
  keep.reserve(static_cast<std::size_t>(set_size));
  if (n >= set_size) {
    std::vector<Index> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), Index{0});
    std::sample(all.begin(), all.end(), std::back_inserter(keep), set_size, rng);
  } else {
    std::uniform_int_distribution<Index> any(0, n - 1);
    for (Index j = 0; j < set_size; ++j) keep.push_back(any(rng));
  }

  TimeSeriesSample out;
  out.id = sample.id;
  out.label = sample.label;
  out.days = sample.days;
  out.pixels_per_step = set_size;
  out.pixels.resize(sample.channels(), sample.timesteps() * set_size);
  for (Index t = 0; t < sample.timesteps(); ++t)
    for (Index j = 0; j < set_size; ++j)
      out.pixels.col(t * set_size + j) = sample.pixels.col(t * n + keep[static_cast<std::size_t>(j)]);
  return out;
}

// ---------------------------------------------------------------------------

BalancedBatchSampler::BalancedBatchSampler(const Dataset& dataset, Index batch_size,
                                           std::uint64_t seed)
    : batch_size_(batch_size), rng_(seed) {
  if (batch_size < 1) throw InputError("batch size must be >= 1");
  std::vector<std::vector<std::size_t>> by_class(dataset.class_names.size());
  bool any_label = false;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const auto& label = dataset.samples[i].label;
    if (!label) continue;
    any_label = true;
    by_class.at(static_cast<std::size_t>(*label)).push_back(i);
  }
  if (!any_label) throw InputError("balanced sampling needs a labeled dataset");
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (by_class[c].empty()) continue;
    classes_.push_back(static_cast<int>(c));
    members_.push_back(std::move(by_class[c]));
  }
  queues_.resize(members_.size());
  cursors_.assign(members_.size(), 0);
}

std::size_t BalancedBatchSampler::draw(std::size_t slot) {
  auto& queue = queues_[slot];
  auto& cursor = cursors_[slot];
  if (cursor == queue.size()) {
    queue = members_[slot];
    std::shuffle(queue.begin(), queue.end(), rng_);
    cursor = 0;
  }
  return queue[cursor++];
}

std::vector<std::size_t> BalancedBatchSampler::next() {
  const std::size_t k = members_.size();
  const std::size_t base = static_cast<std::size_t>(batch_size_) / k;
  const std::size_t extra = static_cast<std::size_t>(batch_size_) % k;
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng_);
  std::vector<std::size_t> quota(k, base);
  for (std::size_t j = 0; j < extra; ++j) ++quota[order[j]];

  std::vector<std::size_t> batch;
  batch.reserve(static_cast<std::size_t>(batch_size_));
  for (std::size_t slot = 0; slot < k; ++slot)
    for (std::size_t j = 0; j < quota[slot]; ++j) batch.push_back(draw(slot));
  std::shuffle(batch.begin(), batch.end(), rng_);
  return batch;
}

UniformBatchSampler::UniformBatchSampler(std::size_t dataset_size, Index batch_size,
                                         std::uint64_t seed)
    : batch_size_(batch_size), rng_(seed), order_(dataset_size) {
  if (dataset_size == 0) throw InputError("cannot sample batches from an empty dataset");
  if (batch_size < 1) throw InputError("batch size must be >= 1");
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  cursor_ = order_.size();
}

std::vector<std::size_t> UniformBatchSampler::next() {
  std::vector<std::size_t> batch;
  batch.reserve(static_cast<std::size_t>(batch_size_));
  while (batch.size() < static_cast<std::size_t>(batch_size_)) {
    if (cursor_ == order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
    }
    batch.push_back(order_[cursor_++]);
  }
  return batch;
}

// ---------------------------------------------------------------------------

DatasetSplits split_dataset(const Dataset& dataset, std::uint64_t seed, double train_fraction,
                            double val_fraction) {
  std::vector<std::size_t> order(dataset.samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, "split"));
  std::shuffle(order.begin(), order.end(), rng);

  const auto n = order.size();
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train,
                              static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n))));
  DatasetSplits out;
  for (Dataset* d : {&out.train, &out.val, &out.test}) {
    d->domain_id = dataset.domain_id;
    d->class_names = dataset.class_names;
    d->channels = dataset.channels;
  }
  // Keep the original sample order within each split.
  std::vector<int> bucket(n, 2);
  for (std::size_t j = 0; j < n; ++j) bucket[order[j]] = j < n_train ? 0 : (j < n_train + n_val ? 1 : 2);
  for (std::size_t i = 0; i < n; ++i) {
    Dataset& d = bucket[i] == 0 ? out.train : (bucket[i] == 1 ? out.val : out.test);
    d.samples.push_back(dataset.samples[i]);
  }
  return out;
}

std::vector<std::size_t> class_counts(const Dataset& dataset) {
  std::vector<std::size_t> counts(dataset.class_names.size(), 0);
  for (const auto& s : dataset.samples)
    if (s.label) ++counts.at(static_cast<std::size_t>(*s.label));
  return counts;
}

void select_classes(Dataset& dataset, const std::vector<int>& kept) {
  const int unknown = dataset.unknown_class();
  if (kept.empty() || kept.back() != unknown)
    throw InputError("class selection must end with the unknown class");
  std::vector<int> new_index(dataset.class_names.size(), -1);
  std::vector<std::string> names;
  for (std::size_t j = 0; j < kept.size(); ++j) {
    const int c = kept[j];
    if (c < 0 || c > unknown || new_index[static_cast<std::size_t>(c)] >= 0)
      throw InputError("invalid class selection");
    new_index[static_cast<std::size_t>(c)] = static_cast<int>(j);
    names.push_back(dataset.class_names[static_cast<std::size_t>(c)]);
  }
  const int new_unknown = static_cast<int>(kept.size()) - 1;
  for (auto& s : dataset.samples) {
    if (!s.label) continue;
    const int mapped = new_index[static_cast<std::size_t>(*s.label)];
    s.label = mapped >= 0 ? mapped : new_unknown;
  }
  dataset.class_names = std::move(names);
}

std::vector<int> remap_rare_classes(Dataset& dataset, std::size_t min_count) {
  const auto counts = class_counts(dataset);
  const int unknown = dataset.unknown_class();
  std::vector<int> kept;
  for (int c = 0; c < unknown; ++c)
    if (counts[static_cast<std::size_t>(c)] >= min_count) kept.push_back(c);
  kept.push_back(unknown);
  select_classes(dataset, kept);
  return kept;
}

}  // namespace tmlab::data
