// tmlab: synthetic scenarios, source pre-training, shift estimation,
// adaptation and evaluation from the command line.

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "tmlab/adapt.hpp"
#include "tmlab/checkpoint.hpp"
#include "tmlab/config.hpp"
#include "tmlab/dataset_io.hpp"
#include "tmlab/errors.hpp"
#include "tmlab/metrics.hpp"
#include "tmlab/parallel.hpp"
#include "tmlab/shift.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tmlab;

namespace {

// A dataset argument is either a file or a directory written by `generate`,
// in which case `split` picks the file inside it.
fs::path resolve_dataset(const fs::path& path, const std::string& split) {
  if (!fs::exists(path)) throw InputError("no such file or directory: '" + path.string() + "'");
  if (!fs::is_directory(path)) return path;
  for (const char* ext : {".jsonl", ".jsonl.gz"}) {
    const auto candidate = path / (split + ext);
    if (fs::exists(candidate)) return candidate;
  }
  throw InputError("directory '" + path.string() + "' has no " + split + ".jsonl");
}

data::Dataset load_split(const fs::path& path, const std::string& split) {
  return data::load_dataset(resolve_dataset(path, split));
}

void require_file(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw InputError("no such file: '" + path.string() + "'");
}

// Brings a dataset's labels onto the checkpoint's class list: identical lists
// are used as is, the pre-remap training list is remapped by name.
void align_classes(data::Dataset& dataset, const model::Checkpoint& ckpt) {
  const auto& classes = ckpt.params.class_names;
  if (dataset.class_names == classes) return;
  if (!ckpt.dataset_classes.empty() && dataset.class_names == ckpt.dataset_classes) {
    std::vector<int> kept;
    for (const auto& name : classes) {
      const auto it = std::find(dataset.class_names.begin(), dataset.class_names.end(), name);
      kept.push_back(static_cast<int>(it - dataset.class_names.begin()));
    }
    data::select_classes(dataset, kept);
    return;
  }
  throw DimensionError("dataset '" + dataset.domain_id + "' has " +
                       std::to_string(dataset.class_names.size()) +
                       " classes that do not match the model's " + std::to_string(classes.size()));
}

class JsonLines {
 public:
  explicit JsonLines(const fs::path& path) : out_(path) {
    if (!out_) throw InputError("cannot write '" + path.string() + "'");
  }
  void operator()(const json& j) { out_ << j.dump() << '\n' << std::flush; }

 private:
  std::ofstream out_;
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  out << text;
}

// ---------------------------------------------------------------------------

struct ScenarioArgs {
  std::string preset = "standard";
  int shift = 20;
  long long samples = 2000;
  std::string out;
};

void cmd_scenario(const ScenarioArgs& a) {
  const auto spec = a.preset == "confusable" ? data::confusable_scenario(a.shift, a.samples)
                    : a.preset == "standard" ? data::standard_scenario(a.shift, a.samples)
                                             : throw InputError("unknown preset '" + a.preset + "'");
  const std::string text = config::scenario_to_json(spec).dump(2) + "\n";
  if (a.out.empty())
    std::cout << text;
  else
    write_text(a.out, text);
}

struct GenerateArgs {
  std::string scenario, out;
  std::uint64_t seed = 0;
  bool gzip = false;
};

void cmd_generate(const GenerateArgs& a) {
  require_file(a.scenario);
  const auto spec = config::load_scenario(a.scenario);
  const std::string ext = a.gzip ? ".jsonl.gz" : ".jsonl";
  json summary = json::object();
  for (const auto& dom : spec.domains) {
    const auto dataset = data::generate_domain(spec, dom.id, derive_seed(derive_seed(a.seed, "data"), dom.id));
    const auto splits = data::split_dataset(dataset, derive_seed(a.seed, "split"));
    const fs::path dir = fs::path(a.out) / dom.id;
    fs::create_directories(dir);
    data::save_dataset(dataset, dir / ("all" + ext));
    data::save_dataset(splits.train, dir / ("train" + ext));
    data::save_dataset(splits.val, dir / ("val" + ext));
    data::save_dataset(splits.test, dir / ("test" + ext));
    summary[dom.id] = {{"shift", dom.shift},
                       {"all", dataset.size()},
                       {"train", splits.train.size()},
                       {"val", splits.val.size()},
                       {"test", splits.test.size()}};
  }
  std::cout << summary.dump() << '\n';
}

struct PretrainArgs {
  std::string config, source, out, log;
  bool shiftaug = false;
};

void cmd_pretrain(const PretrainArgs& a) {
  require_file(a.config);
  const auto cfg = config::load_run_config(a.config);
  auto train = load_split(a.source, "train");
  data::Dataset val;
  if (fs::is_directory(a.source)) val = load_split(a.source, "val");
  const auto original_classes = train.class_names;
  const auto kept = data::remap_rare_classes(train, cfg.min_class_samples);
  if (!val.samples.empty() || !val.class_names.empty()) {
    if (val.class_names != original_classes) throw DimensionError("validation split has a different class list");
    data::select_classes(val, kept);
  }

  const auto dims = cfg.dims(train.channels, train.num_classes());
  const auto init = model::init_params<float>(dims, cfg.posenc(), train.class_names, cfg.train.seed);
  JsonLines log(a.log.empty() ? a.out + ".log.jsonl" : a.log);
  std::vector<std::string> dropped;
  for (std::size_t c = 0; c + 1 < original_classes.size(); ++c)
    if (std::find(kept.begin(), kept.end(), static_cast<int>(c)) == kept.end())
      dropped.push_back(original_classes[c]);
  log({{"event", "pretrain_start"},
       {"shiftaug", a.shiftaug},
       {"classes", train.class_names},
       {"dataset_classes", original_classes},
       {"remapped_to_unknown", dropped},
       {"train_samples", train.size()},
       {"val_samples", val.size()},
       {"config", config::to_json(cfg)}});

  auto result = adapt::pretrain_source(train, val, init, cfg.train, a.shiftaug, std::ref(log));
  model::Checkpoint ckpt{std::move(result.params), std::move(result.optimizer), {}};
  if (original_classes != ckpt.params.class_names) ckpt.dataset_classes = original_classes;
  model::save_checkpoint(ckpt, a.out);
  std::cout << json{{"checkpoint", a.out},
                    {"best_epoch", result.best_epoch},
                    {"best_val_macro_f1", result.epochs[static_cast<std::size_t>(result.best_epoch - 1)].val_macro_f1},
                    {"shiftaug", a.shiftaug},
                    {"classes", ckpt.params.class_names}}
                   .dump()
            << '\n';
}

struct EstimateArgs {
  std::string model, target, metric = "am", curve, split = "train";
  std::size_t cap = shift::kDefaultSampleCap;
  std::optional<int> max_shift;
  std::uint64_t seed = 0;
};

void cmd_estimate_shift(const EstimateArgs& a) {
  require_file(a.model);
  const auto metric = shift::metric_from_string(a.metric);
  const auto ckpt = model::load_checkpoint(a.model);
  auto target = load_split(a.target, a.split);
  align_classes(target, ckpt);
  const int max_shift = a.max_shift.value_or(ckpt.params.posenc.max_shift);
  if (max_shift < 0 || max_shift > ckpt.params.posenc.max_shift)
    throw ShiftRangeError("--max-shift must lie in [0, " + std::to_string(ckpt.params.posenc.max_shift) + "]");

  shift::ShiftScanner scanner(
      shift::ModelPredictor(ckpt.params, target, model::Domain::target, a.cap, a.seed), max_shift);
  const auto by_entropy = scanner.estimate_entropy();
  const auto by_is = scanner.estimate_is();
  const auto by_am = scanner.estimate(std::nullopt);
  const auto& chosen = metric == shift::Metric::entropy   ? by_entropy
                       : metric == shift::Metric::inception ? by_is
                                                            : by_am;
  if (!a.curve.empty()) {
    std::string csv = "shift,entropy,is,am\n";
    for (std::size_t j = 0; j < by_am.curve.size(); ++j) {
      char row[160];
      std::snprintf(row, sizeof row, "%d,%.17g,%.17g,%.17g\n", by_am.curve[j].first,
                    by_entropy.curve[j].second, by_is.curve[j].second, by_am.curve[j].second);
      csv += row;
    }
    write_text(a.curve, csv);
  }
  const auto& dist = *by_am.class_distribution;
  std::cout << json{{"delta", chosen.delta},
                    {"metric", shift::to_string(metric)},
                    {"class_distribution", std::vector<double>(dist.data(), dist.data() + dist.size())},
                    {"classes", ckpt.params.class_names},
                    {"samples", std::min(a.cap, target.size())}}
                   .dump()
            << '\n';
}

struct AdaptArgs {
  std::string config, source, target, init, method, out, report, teacher_out;
};

void cmd_adapt(const AdaptArgs& a) {
  require_file(a.config);
  require_file(a.init);
  auto cfg = config::load_run_config(a.config);
  if (!a.method.empty()) cfg.method = adapt::method_from_string(a.method);
  const auto init = model::load_checkpoint(a.init);
  auto source = load_split(a.source, "train");
  auto target = load_split(a.target, "train");
  align_classes(source, init);
  align_classes(target, init);

  const std::string report_path = a.report.empty() ? a.out + ".report.jsonl" : a.report;
  JsonLines log(report_path + ".log");
  auto result = adapt::run_adaptation(cfg.method, source, target, init.params, cfg.train, std::ref(log));
  model::save_checkpoint({result.student, std::nullopt, init.dataset_classes}, a.out);
  if (!a.teacher_out.empty())
    model::save_checkpoint({result.teacher, std::nullopt, init.dataset_classes}, a.teacher_out);
  write_text(report_path, adapt::report_jsonl(result.report));
  std::cout << json{{"checkpoint", a.out},
                    {"report", report_path},
                    {"method", adapt::to_string(cfg.method)},
                    {"epochs", result.report.epochs.size()},
                    {"iterations", result.report.iterations},
                    {"shift_estimations", result.report.shift_estimations}}
                   .dump()
            << '\n';
}

struct EvaluateArgs {
  std::string model, data, domain = "target", confusion, split = "test", sweep;
  int shift = 0;
  bool exclude_unknown = false;
};

void cmd_evaluate(const EvaluateArgs& a) {
  require_file(a.model);
  const auto ckpt = model::load_checkpoint(a.model);
  auto dataset = load_split(a.data, a.split);
  align_classes(dataset, ckpt);
  const auto domain = model::domain_from_string(a.domain);
  if (!a.sweep.empty()) {
    // --sweep LO:HI prints accuracy and macro-F1 for every shift in range.
    int lo = 0, hi = 0;
    const auto colon = a.sweep.find(':');
    const char* begin = a.sweep.data();
    const char* end = begin + a.sweep.size();
    if (colon == std::string::npos || std::from_chars(begin, begin + colon, lo).ptr != begin + colon ||
        std::from_chars(begin + colon + 1, end, hi).ptr != end || lo > hi)
      throw InputError("--sweep expects LO:HI with LO <= HI");
    std::cout << "shift,accuracy,macro_f1\n";
    for (int s = lo; s <= hi; ++s) {
      const auto r = metrics::evaluate(ckpt.params, dataset, domain, s, !a.exclude_unknown);
      std::printf("%d,%.17g,%.17g\n", s, r.accuracy, r.headline_f1());
    }
    return;
  }
  const auto result = metrics::evaluate(ckpt.params, dataset, domain, a.shift, !a.exclude_unknown);
  if (!a.confusion.empty()) write_text(a.confusion, metrics::confusion_csv(result));
  auto j = metrics::to_json(result);
  j["shift"] = a.shift;
  j["domain"] = a.domain;
  std::cout << j.dump() << '\n';
}

int exit_code(const std::exception& e) {
  if (dynamic_cast<const InputError*>(&e) || dynamic_cast<const ShiftRangeError*>(&e)) return 2;
  if (dynamic_cast<const ParseError*>(&e) || dynamic_cast<const DimensionError*>(&e)) return 3;
  if (dynamic_cast<const NumericError*>(&e)) return 4;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Temporal-shift estimation and self-training adaptation for pixel-set time series"};
  app.require_subcommand(1);

  ScenarioArgs sc;
  auto* scenario = app.add_subcommand("scenario", "Write a preset scenario as JSON");
  scenario->add_option("--preset", sc.preset, "standard | confusable")->capture_default_str();
  scenario->add_option("--shift", sc.shift, "Target-to-source shift in days")->capture_default_str();
  scenario->add_option("--samples", sc.samples, "Samples per domain")->capture_default_str();
  scenario->add_option("--out", sc.out, "Output file (default stdout)");

  GenerateArgs gen;
  auto* generate = app.add_subcommand("generate", "Generate one dataset per scenario domain with splits");
  generate->add_option("--scenario", gen.scenario)->required();
  generate->add_option("--out", gen.out)->required();
  generate->add_option("--seed", gen.seed)->capture_default_str();
  generate->add_flag("--gzip", gen.gzip, "Write .jsonl.gz files");

  PretrainArgs pre;
  auto* pretrain = app.add_subcommand("pretrain", "Train a source model");
  pretrain->add_option("--config", pre.config)->required();
  pretrain->add_option("--source", pre.source, "Dataset file or generated domain directory")->required();
  pretrain->add_option("--out", pre.out, "Checkpoint path")->required();
  pretrain->add_option("--log", pre.log, "Training log (default <out>.log.jsonl)");
  pretrain->add_flag("--shiftaug", pre.shiftaug, "Random day shifts in [-max_shift, max_shift]");

  EstimateArgs est;
  auto* estimate = app.add_subcommand("estimate-shift", "Estimate the target-to-source shift");
  estimate->add_option("--model", est.model)->required();
  estimate->add_option("--target", est.target)->required();
  estimate->add_option("--metric", est.metric, "am | is | entropy")->capture_default_str();
  estimate->add_option("--cap", est.cap, "Maximum number of target samples")->capture_default_str();
  estimate->add_option("--max-shift", est.max_shift, "Scan range (default: the model's)");
  estimate->add_option("--curve", est.curve, "Write the score curve as CSV");
  estimate->add_option("--split", est.split, "Split used when --target is a directory")->capture_default_str();
  estimate->add_option("--seed", est.seed, "Seed of the capped sample")->capture_default_str();

  AdaptArgs ad;
  auto* adapt_cmd = app.add_subcommand("adapt", "Adapt a source model to a target domain");
  adapt_cmd->add_option("--config", ad.config)->required();
  adapt_cmd->add_option("--source", ad.source)->required();
  adapt_cmd->add_option("--target", ad.target)->required();
  adapt_cmd->add_option("--init", ad.init, "Source-trained checkpoint")->required();
  adapt_cmd->add_option("--method", ad.method, "timematch | fixmatch | source_only | shiftaug_source");
  adapt_cmd->add_option("--out", ad.out, "Student checkpoint path")->required();
  adapt_cmd->add_option("--report", ad.report, "Report path (default <out>.report.jsonl)");
  adapt_cmd->add_option("--teacher-out", ad.teacher_out, "Also write the teacher checkpoint");

  EvaluateArgs ev;
  auto* evaluate = app.add_subcommand("evaluate", "Full-resolution evaluation on labeled data");
  evaluate->add_option("--model", ev.model)->required();
  evaluate->add_option("--data", ev.data)->required();
  evaluate->add_option("--shift", ev.shift)->capture_default_str();
  evaluate->add_option("--domain", ev.domain, "source | target")->capture_default_str();
  evaluate->add_option("--split", ev.split, "Split used when --data is a directory")->capture_default_str();
  evaluate->add_option("--confusion", ev.confusion, "Write the confusion matrix as CSV");
  evaluate->add_option("--sweep", ev.sweep, "LO:HI, print a CSV of scores per shift");
  evaluate->add_flag("--exclude-unknown", ev.exclude_unknown, "Headline macro-F1 without unknown");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*scenario) cmd_scenario(sc);
    if (*generate) cmd_generate(gen);
    if (*pretrain) cmd_pretrain(pre);
    if (*estimate) cmd_estimate_shift(est);
    if (*adapt_cmd) cmd_adapt(ad);
    if (*evaluate) cmd_evaluate(ev);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e);
  }
  return 0;
}
