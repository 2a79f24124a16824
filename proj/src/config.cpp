#include "tmlab/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "tmlab/errors.hpp"

namespace tmlab::config {

using nlohmann::json;

model::ModelDims RunConfig::dims(Eigen::Index channels, Eigen::Index classes) const {
  return {channels, hidden, embed, key, value, classes};
}

model::PosEncConfig RunConfig::posenc() const { return {embed, train.max_shift, posenc_base}; }

void RunConfig::validate() const {
  train.validate();
  if (train.threshold > 1) throw InputError("train.threshold must lie in [0, 1]");
  if (hidden < 1 || embed < 2 || key < 1 || value < 1)
    throw InputError("model dimensions must be positive");
  if (embed % 2 != 0) throw InputError("model.embed must be even");
  if (!(posenc_base > 1.0)) throw InputError("model.posenc_base must exceed 1");
}

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size())
    throw InputError("config key '" + key + "': cannot parse '" + value + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw InputError("config key '" + key + "': expected true or false, got '" + value + "'");
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

template <typename T, typename Field>
Setter number(Field field) {
  return [field](RunConfig& c, const std::string& k, const std::string& v) {
    field(c) = static_cast<std::remove_reference_t<decltype(field(c))>>(parse_number<T>(k, v));
  };
}

const std::map<std::string, Setter, std::less<>>& setters() {
  static const std::map<std::string, Setter, std::less<>> table = {
      {"train.max_shift", number<int>([](RunConfig& c) -> int& { return c.train.max_shift; })},
      {"train.lambda", number<double>([](RunConfig& c) -> double& { return c.train.lambda; })},
      {"train.alpha", number<double>([](RunConfig& c) -> double& { return c.train.alpha; })},
      {"train.threshold", number<double>([](RunConfig& c) -> double& { return c.train.threshold; })},
      {"train.focal_gamma", number<double>([](RunConfig& c) -> double& { return c.train.focal_gamma; })},
      {"train.batch_size", number<long long>([](RunConfig& c) -> Eigen::Index& { return c.train.batch_size; })},
      {"train.pixel_set", number<long long>([](RunConfig& c) -> Eigen::Index& { return c.train.pixel_set; })},
      {"train.timesteps", number<long long>([](RunConfig& c) -> Eigen::Index& { return c.train.timesteps; })},
      {"train.pretrain_epochs", number<int>([](RunConfig& c) -> int& { return c.train.pretrain_epochs; })},
      {"train.pretrain_lr", number<double>([](RunConfig& c) -> double& { return c.train.pretrain_lr; })},
      {"train.pretrain_iterations",
       number<long long>([](RunConfig& c) -> Eigen::Index& { return c.train.pretrain_iterations; })},
      {"train.adapt_epochs", number<int>([](RunConfig& c) -> int& { return c.train.adapt_epochs; })},
      {"train.adapt_iterations",
       number<long long>([](RunConfig& c) -> Eigen::Index& { return c.train.adapt_iterations; })},
      {"train.adapt_lr", number<double>([](RunConfig& c) -> double& { return c.train.adapt_lr; })},
      {"train.weight_decay", number<double>([](RunConfig& c) -> double& { return c.train.weight_decay; })},
      {"train.bn_momentum", number<double>([](RunConfig& c) -> double& { return c.train.bn_momentum; })},
      {"train.sample_cap",
       number<unsigned long long>([](RunConfig& c) -> std::size_t& { return c.train.sample_cap; })},
      {"train.seed", number<unsigned long long>([](RunConfig& c) -> std::uint64_t& { return c.train.seed; })},
      {"model.hidden", number<long long>([](RunConfig& c) -> Eigen::Index& { return c.hidden; })},
      {"model.embed", number<long long>([](RunConfig& c) -> Eigen::Index& { return c.embed; })},
      {"model.key", number<long long>([](RunConfig& c) -> Eigen::Index& { return c.key; })},
      {"model.value", number<long long>([](RunConfig& c) -> Eigen::Index& { return c.value; })},
      {"model.posenc_base", number<double>([](RunConfig& c) -> double& { return c.posenc_base; })},
      {"data.min_class_samples",
       number<unsigned long long>([](RunConfig& c) -> std::size_t& { return c.min_class_samples; })},
      {"eval.include_unknown",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.include_unknown = parse_bool(k, v); }},
      {"method", [](RunConfig& c, const std::string&, const std::string& v) {
         c.method = adapt::method_from_string(v);
       }},
      {"metric", [](RunConfig& c, const std::string&, const std::string& v) {
         c.metric = shift::metric_from_string(v);
       }},
  };
  return table;
}

void apply(RunConfig& c, const std::string& key, const std::string& value) {
  const auto it = setters().find(key);
  if (it == setters().end()) throw InputError("unknown config key '" + key + "'");
  it->second(c, key, value);
}

void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, std::string>>& out) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) flatten(v, prefix.empty() ? k : prefix + "." + k, out);
  } else if (j.is_string()) {
    out.emplace_back(prefix, j.get<std::string>());
  } else if (j.is_number() || j.is_boolean()) {
    out.emplace_back(prefix, j.dump());
  } else {
    throw InputError("config key '" + prefix + "': unsupported value " + j.dump());
  }
}

}  // namespace

RunConfig parse_run_config(std::string_view text) {
  RunConfig c;
  const std::string body = trim(text);
  if (!body.empty() && body.front() == '{') {
    json j;
    try {
      j = json::parse(body);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("config: ") + e.what());
    }
    std::vector<std::pair<std::string, std::string>> entries;
    flatten(j, "", entries);
    for (const auto& [k, v] : entries) apply(c, k, v);
  } else {
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
      ++number;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos)
        throw ParseError("config: expected 'key = value'", number);
      apply(c, trim(std::string_view(t).substr(0, eq)), trim(std::string_view(t).substr(eq + 1)));
    }
  }
  c.validate();
  return c;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig load_run_config(const std::filesystem::path& path) { return parse_run_config(read_file(path)); }

json to_json(const RunConfig& c) {
  const auto& t = c.train;
  return {{"train",
           {{"max_shift", t.max_shift},
            {"lambda", t.lambda},
            {"alpha", t.alpha},
            {"threshold", t.threshold},
            {"focal_gamma", t.focal_gamma},
            {"batch_size", t.batch_size},
            {"pixel_set", t.pixel_set},
            {"timesteps", t.timesteps},
            {"pretrain_epochs", t.pretrain_epochs},
            {"pretrain_lr", t.pretrain_lr},
            {"pretrain_iterations", t.pretrain_iterations},
            {"adapt_epochs", t.adapt_epochs},
            {"adapt_iterations", t.adapt_iterations},
            {"adapt_lr", t.adapt_lr},
            {"weight_decay", t.weight_decay},
            {"bn_momentum", t.bn_momentum},
            {"sample_cap", t.sample_cap},
            {"seed", t.seed}}},
          {"model",
           {{"hidden", c.hidden}, {"embed", c.embed}, {"key", c.key}, {"value", c.value},
            {"posenc_base", c.posenc_base}}},
          {"data", {{"min_class_samples", c.min_class_samples}}},
          {"eval", {{"include_unknown", c.include_unknown}}},
          {"method", adapt::to_string(c.method)},
          {"metric", shift::to_string(c.metric)}};
}

// ---------------------------------------------------------------------------
// Scenarios

json scenario_to_json(const data::ScenarioSpec& s) {
  json classes = json::array();
  for (const auto& c : s.classes)
    classes.push_back({{"name", c.name},
                       {"start_of_season", c.start_of_season},
                       {"end_of_season", c.end_of_season},
                       {"amplitude", c.amplitude},
                       {"baseline", c.baseline},
                       {"rise_slope", c.rise_slope},
                       {"fall_slope", c.fall_slope},
                       {"mix", std::vector<double>(c.mix.data(), c.mix.data() + c.mix.size())}});
  json domains = json::array();
  for (const auto& d : s.domains)
    domains.push_back({{"id", d.id},
                       {"shift", d.shift},
                       {"calendar", {{"days", d.calendar.days}, {"dropout", d.calendar.dropout}}},
                       {"class_frequencies", d.class_frequencies},
                       {"pixels_min", d.pixels_min},
                       {"pixels_max", d.pixels_max},
                       {"pixel_noise", d.pixel_noise},
                       {"jitter", d.jitter},
                       {"samples", d.samples}});
  return {{"channels", s.channels},
          {"classes", classes},
          {"unknown",
           {{"baseline_min", s.unknown.baseline_min},
            {"baseline_max", s.unknown.baseline_max},
            {"amplitude", s.unknown.amplitude},
            {"correlation", s.unknown.correlation}}},
          {"domains", domains}};
}

namespace {

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

data::ScenarioSpec parse_scenario(const json& j) {
  if (j.contains("preset")) {
    const auto preset = j.at("preset").get<std::string>();
    const int shift = j.value("shift", 0);
    const Eigen::Index n = j.value("samples", Eigen::Index{2000});
    if (preset == "standard") return data::standard_scenario(shift, n);
    if (preset == "confusable") return data::confusable_scenario(shift, n);
    throw InputError("unknown scenario preset '" + preset + "'");
  }
  data::ScenarioSpec s;
  read_opt(j, "channels", s.channels);
  for (const auto& c : j.at("classes")) {
    data::PhenologyClassSpec spec;
    spec.name = c.at("name").get<std::string>();
    read_opt(c, "start_of_season", spec.start_of_season);
    read_opt(c, "end_of_season", spec.end_of_season);
    read_opt(c, "amplitude", spec.amplitude);
    read_opt(c, "baseline", spec.baseline);
    read_opt(c, "rise_slope", spec.rise_slope);
    read_opt(c, "fall_slope", spec.fall_slope);
    const auto mix = c.at("mix").get<std::vector<double>>();
    spec.mix = Eigen::Map<const Eigen::VectorXd>(mix.data(), static_cast<Eigen::Index>(mix.size()));
    s.classes.push_back(std::move(spec));
  }
  if (j.contains("unknown")) {
    const auto& u = j.at("unknown");
    read_opt(u, "baseline_min", s.unknown.baseline_min);
    read_opt(u, "baseline_max", s.unknown.baseline_max);
    read_opt(u, "amplitude", s.unknown.amplitude);
    read_opt(u, "correlation", s.unknown.correlation);
  }
  for (const auto& d : j.at("domains")) {
    data::DomainSpec dom;
    dom.id = d.at("id").get<std::string>();
    read_opt(d, "shift", dom.shift);
    const auto& cal = d.at("calendar");
    const double dropout = cal.value("dropout", 0.0);
    if (cal.contains("days")) {
      dom.calendar = {cal.at("days").get<std::vector<int>>(), dropout};
    } else {
      dom.calendar = data::regular_calendar(cal.at("first").get<int>(), cal.at("step").get<int>(), dropout,
                                            cal.value("last", data::kMaxDay));
    }
    dom.class_frequencies = d.at("class_frequencies").get<std::vector<double>>();
    read_opt(d, "pixels_min", dom.pixels_min);
    read_opt(d, "pixels_max", dom.pixels_max);
    read_opt(d, "pixel_noise", dom.pixel_noise);
    read_opt(d, "jitter", dom.jitter);
    read_opt(d, "samples", dom.samples);
    s.domains.push_back(std::move(dom));
  }
  return s;
}

}  // namespace

data::ScenarioSpec scenario_from_json(const json& j) {
  data::ScenarioSpec s;
  try {
    s = parse_scenario(j);
  } catch (const json::exception& e) {
    throw ParseError(std::string("scenario: ") + e.what());
  }
  s.validate();
  return s;
}

data::ScenarioSpec load_scenario(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError("scenario '" + path.string() + "': " + e.what());
  }
  return scenario_from_json(j);
}

}  // namespace tmlab::config
