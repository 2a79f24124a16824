#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "support.hpp"
#include "tmlab/checkpoint.hpp"

using namespace tmlab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

Run run(const std::string& args, const fs::path& dir) {
  const auto err_path = dir / "stderr.txt";
  const std::string cmd = "TMLAB_THREADS=1 " + std::string(TMLAB_CLI_PATH) + " " + args + " 2>" + err_path.string();
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  std::size_t got;
  while ((got = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, got);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream e(err_path);
  r.err.assign(std::istreambuf_iterator<char>(e), {});
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(line);
  return out;
}

const char* kQuickConfig = R"(model.hidden = 8
model.embed = 8
model.key = 4
model.value = 8
train.batch_size = 16
train.pixel_set = 8
train.pretrain_epochs = 2
train.pretrain_iterations = 5
train.adapt_epochs = 2
train.adapt_iterations = 4
train.sample_cap = 100
train.seed = 3
data.min_class_samples = 10
)";

// Scenario, generated data, config and a quick source checkpoint.
struct Workspace {
  fs::path dir;
  fs::path scenario, data, config, ckpt;
};

const Workspace& workspace() {
  static const Workspace ws = [] {
    Workspace w;
    w.dir = testing::temp_dir("cli");
    w.scenario = w.dir / "scenario.json";
    w.data = w.dir / "data";
    w.config = w.dir / "quick.cfg";
    w.ckpt = w.dir / "source.ckpt";
    std::ofstream(w.config) << kQuickConfig;
    REQUIRE(run("scenario --preset standard --shift 20 --samples 300 --out " + w.scenario.string(), w.dir).code == 0);
    REQUIRE(run("generate --scenario " + w.scenario.string() + " --out " + w.data.string() + " --seed 5", w.dir).code ==
            0);
    const auto r = run("pretrain --config " + w.config.string() + " --source " + (w.data / "source").string() +
                           " --out " + w.ckpt.string(),
                       w.dir);
    REQUIRE(r.code == 0);
    return w;
  }();
  return ws;
}

}  // namespace

TEST_CASE("help exits cleanly and unknown commands are input errors") {
  const auto dir = testing::temp_dir("cli-help");
  CHECK(run("--help", dir).code == 0);
  CHECK(run("frobnicate", dir).code == 2);
  CHECK(run("evaluate --model", dir).code == 2);
}

TEST_CASE("generate is deterministic and splits sum to n") {
  const auto& ws = workspace();
  const auto again = ws.dir / "again";
  const auto r = run("generate --scenario " + ws.scenario.string() + " --out " + again.string() + " --seed 5", ws.dir);
  REQUIRE(r.code == 0);
  for (const char* dom : {"source", "target"})
    for (const char* split : {"all.jsonl", "train.jsonl", "val.jsonl", "test.jsonl"})
      CHECK(slurp(ws.data / dom / split) == slurp(again / dom / split));
  const auto summary = json::parse(r.out);
  for (const char* dom : {"source", "target"}) {
    const auto& s = summary[dom];
    CHECK(s["train"].get<int>() + s["val"].get<int>() + s["test"].get<int>() == s["all"].get<int>());
    CHECK(s["all"] == 300);
  }
  CHECK(summary["target"]["shift"] == 20);
}

TEST_CASE("gzip output loads like plain output") {
  const auto& ws = workspace();
  const auto gz = ws.dir / "gz";
  REQUIRE(run("generate --gzip --scenario " + ws.scenario.string() + " --out " + gz.string() + " --seed 5", ws.dir)
              .code == 0);
  CHECK(fs::exists(gz / "target" / "test.jsonl.gz"));
  const auto r = run("evaluate --model " + ws.ckpt.string() + " --data " + (gz / "target").string(), ws.dir);
  const auto plain = run("evaluate --model " + ws.ckpt.string() + " --data " + (ws.data / "target").string(), ws.dir);
  CHECK(r.code == 0);
  CHECK(r.out == plain.out);
}

TEST_CASE("missing scenario file is exit code 2 with a message") {
  const auto dir = testing::temp_dir("cli-missing");
  const auto r = run("generate --scenario /nonexistent/scenario.json --out " + (dir / "x").string(), dir);
  CHECK(r.code == 2);
  CHECK(r.err.find("scenario.json") != std::string::npos);
}

TEST_CASE("malformed scenario is a schema error") {
  const auto dir = testing::temp_dir("cli-bad-scenario");
  std::ofstream(dir / "bad.json") << "{\"domains\": 3";
  CHECK(run("generate --scenario " + (dir / "bad.json").string() + " --out " + (dir / "x").string(), dir).code == 3);
}

TEST_CASE("out-of-range config values are rejected before any compute") {
  const auto& ws = workspace();
  for (const char* line : {"train.alpha = 1.5", "train.threshold = 2", "train.lambda = -0.5"}) {
    const auto cfg = ws.dir / "bad.cfg";
    std::ofstream(cfg) << kQuickConfig << line << "\n";
    const auto out = ws.dir / "never.ckpt";
    const auto r = run("pretrain --config " + cfg.string() + " --source " + (ws.data / "source").string() +
                           " --out " + out.string(),
                       ws.dir);
    INFO(line);
    CHECK(r.code == 2);
    CHECK_FALSE(fs::exists(out));
  }
}

TEST_CASE("pretrain reports the selected epoch and logs ShiftAug") {
  const auto& ws = workspace();
  const auto out = ws.dir / "aug.ckpt";
  const auto r = run("pretrain --shiftaug --config " + ws.config.string() + " --source " +
                         (ws.data / "source").string() + " --out " + out.string(),
                     ws.dir);
  REQUIRE(r.code == 0);
  const auto summary = json::parse(r.out);
  CHECK(summary["shiftaug"] == true);
  CHECK(summary["best_epoch"].get<int>() >= 1);
  CHECK(summary["best_epoch"].get<int>() <= 2);
  const auto log = lines_of(slurp(out.string() + ".log.jsonl"));
  REQUIRE_FALSE(log.empty());
  const auto start = json::parse(log.front());
  CHECK(start["event"] == "pretrain_start");
  CHECK(start["shiftaug"] == true);
  CHECK(json::parse(log.back())["event"] == "pretrain_done");
}

TEST_CASE("rare classes are remapped and visible in the checkpoint") {
  const auto& ws = workspace();
  const auto cfg = ws.dir / "rare.cfg";
  std::ofstream(cfg) << kQuickConfig << "data.min_class_samples = 45\n";
  const auto out = ws.dir / "rare.ckpt";
  const auto r = run("pretrain --config " + cfg.string() + " --source " + (ws.data / "source").string() + " --out " +
                         out.string(),
                     ws.dir);
  REQUIRE(r.code == 0);
  const auto ckpt = model::load_checkpoint(out);
  CHECK(ckpt.params.class_names.size() < ckpt.dataset_classes.size());
  CHECK(ckpt.params.class_names.back() == "unknown");
  CHECK(ckpt.dataset_classes.size() == 5);
  // The remapped model still evaluates on the original data.
  CHECK(run("evaluate --model " + out.string() + " --data " + (ws.data / "target").string(), ws.dir).code == 0);
}

TEST_CASE("estimate-shift curve sizes") {
  const auto& ws = workspace();
  const auto curve = ws.dir / "curve.csv";
  auto r = run("estimate-shift --model " + ws.ckpt.string() + " --target " + (ws.data / "target").string() +
                   " --max-shift 0 --curve " + curve.string(),
               ws.dir);
  REQUIRE(r.code == 0);
  CHECK(json::parse(r.out)["delta"] == 0);
  auto rows = lines_of(slurp(curve));
  CHECK(rows.size() == 2);
  CHECK(rows[0] == "shift,entropy,is,am");

  r = run("estimate-shift --metric is --model " + ws.ckpt.string() + " --target " + (ws.data / "target").string() +
              " --curve " + curve.string(),
          ws.dir);
  REQUIRE(r.code == 0);
  const auto summary = json::parse(r.out);
  CHECK(summary["metric"] == "is");
  CHECK(summary["class_distribution"].size() == 5);
  rows = lines_of(slurp(curve));
  CHECK(rows.size() == 1 + 121);

  CHECK(run("estimate-shift --max-shift 61 --model " + ws.ckpt.string() + " --target " + (ws.data / "target").string(),
            ws.dir)
            .code == 2);
  CHECK(run("estimate-shift --metric kl --model " + ws.ckpt.string() + " --target " + (ws.data / "target").string(),
            ws.dir)
            .code == 2);
}

TEST_CASE("adapt methods") {
  const auto& ws = workspace();
  const std::string common = " --config " + ws.config.string() + " --source " + (ws.data / "source").string() +
                             " --target " + (ws.data / "target").string() + " --init " + ws.ckpt.string();

  auto r = run("adapt --method source_only --out " + (ws.dir / "so.ckpt").string() + common, ws.dir);
  REQUIRE(r.code == 0);
  CHECK(json::parse(r.out)["iterations"] == 0);
  const auto init = model::load_checkpoint(ws.ckpt);
  const auto copy = model::load_checkpoint(ws.dir / "so.ckpt");
  model::zip_weights([](std::string_view, const auto& a, const auto& b) { CHECK(a == b); }, init.params.weights,
                     copy.params.weights);

  r = run("adapt --method fixmatch --out " + (ws.dir / "fm.ckpt").string() + common, ws.dir);
  REQUIRE(r.code == 0);
  CHECK(json::parse(r.out)["shift_estimations"] == 0);

  r = run("adapt --method timematch --out " + (ws.dir / "tm.ckpt").string() + common, ws.dir);
  REQUIRE(r.code == 0);
  const auto summary = json::parse(r.out);
  CHECK(summary["epochs"] == 2);
  CHECK(summary["shift_estimations"] == 2);
  const auto report = lines_of(slurp(ws.dir / "tm.ckpt.report.jsonl"));
  REQUIRE(report.size() == 3);
  CHECK(json::parse(report.back())["summary"] == true);
  CHECK(fs::exists(ws.dir / "tm.ckpt.report.jsonl.log"));

  CHECK(run("adapt --method dann --out " + (ws.dir / "x.ckpt").string() + common, ws.dir).code == 2);
}

TEST_CASE("evaluate output and errors") {
  const auto& ws = workspace();
  const auto confusion = ws.dir / "confusion.csv";
  auto r = run("evaluate --model " + ws.ckpt.string() + " --data " + (ws.data / "target").string() +
                   " --shift 20 --confusion " + confusion.string(),
               ws.dir);
  REQUIRE(r.code == 0);
  const auto j = json::parse(r.out);
  CHECK(j["shift"] == 20);
  CHECK(j["n"] == 60);
  CHECK(lines_of(slurp(confusion)).size() == 6);

  r = run("evaluate --model " + ws.ckpt.string() + " --data " + (ws.data / "target").string() + " --sweep -2:2",
          ws.dir);
  REQUIRE(r.code == 0);
  CHECK(lines_of(r.out).size() == 6);
  CHECK(run("evaluate --model " + ws.ckpt.string() + " --data " + (ws.data / "target").string() + " --sweep 2:x",
            ws.dir)
            .code == 2);
  CHECK(run("evaluate --model " + ws.ckpt.string() + " --data " + (ws.data / "target").string() + " --shift 61",
            ws.dir)
            .code == 2);
  CHECK(run("evaluate --model /nonexistent.ckpt --data " + (ws.data / "target").string(), ws.dir).code == 2);
}

TEST_CASE("class-count mismatch is exit code 3") {
  const auto& ws = workspace();
  const auto other = ws.dir / "other";
  const auto sc = ws.dir / "four.json";
  std::ofstream(sc) << R"({"preset": "confusable", "shift": 0, "samples": 40})";
  REQUIRE(run("generate --scenario " + sc.string() + " --out " + other.string(), ws.dir).code == 0);
  // Same number of classes but different names is also a mismatch.
  const auto r = run("evaluate --model " + ws.ckpt.string() + " --data " + (other / "target").string(), ws.dir);
  CHECK(r.code == 3);

  auto ckpt = model::load_checkpoint(ws.ckpt);
  ckpt.params = testing::tiny_params<float>(1, 4);
  ckpt.optimizer.reset();
  model::save_checkpoint(ckpt, ws.dir / "k4.ckpt");
  CHECK(run("evaluate --model " + (ws.dir / "k4.ckpt").string() + " --data " + (ws.data / "target").string(), ws.dir)
            .code == 3);
}

TEST_CASE("truncated checkpoint is exit code 3") {
  const auto& ws = workspace();
  const auto bytes = slurp(ws.ckpt);
  std::ofstream(ws.dir / "cut.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  CHECK(run("evaluate --model " + (ws.dir / "cut.ckpt").string() + " --data " + (ws.data / "target").string(), ws.dir)
            .code == 3);
}

TEST_CASE("desk-scale run: estimate and sweep recover the injected shift") {
  const auto dir = testing::temp_dir("cli-desk");
  std::ofstream(dir / "desk.cfg") << R"(model.hidden = 32
model.embed = 32
model.key = 8
model.value = 32
train.batch_size = 32
train.pixel_set = 16
train.pretrain_epochs = 25
train.pretrain_iterations = 50
train.seed = 1
)";
  REQUIRE(run("scenario --preset standard --shift 20 --samples 2000 --out " + (dir / "sc.json").string(), dir).code ==
          0);
  REQUIRE(run("generate --scenario " + (dir / "sc.json").string() + " --out " + (dir / "data").string() + " --seed 2",
              dir)
              .code == 0);
  REQUIRE(run("pretrain --config " + (dir / "desk.cfg").string() + " --source " + (dir / "data" / "source").string() +
                  " --out " + (dir / "m.ckpt").string(),
              dir)
              .code == 0);

  const auto est = run("estimate-shift --cap 1000 --model " + (dir / "m.ckpt").string() + " --target " +
                           (dir / "data" / "target").string(),
                       dir);
  REQUIRE(est.code == 0);
  const int delta = json::parse(est.out)["delta"];
  CHECK(delta >= 17);
  CHECK(delta <= 23);

  // Accuracy as a function of the evaluation shift peaks near the injected
  // shift and falls off on both sides.
  const auto sweep = run("evaluate --model " + (dir / "m.ckpt").string() + " --data " +
                             (dir / "data" / "target").string() + " --sweep -40:60",
                         dir);
  REQUIRE(sweep.code == 0);
  const auto rows = lines_of(sweep.out);
  REQUIRE(rows.size() == 102);
  int best_shift = 0;
  double best = -1, at_minus40 = 0, at_60 = 0;
  for (std::size_t j = 1; j < rows.size(); ++j) {
    int s;
    double acc, f1;
    REQUIRE(std::sscanf(rows[j].c_str(), "%d,%lf,%lf", &s, &acc, &f1) == 3);
    if (acc > best) {
      best = acc;
      best_shift = s;
    }
    if (s == -40) at_minus40 = acc;
    if (s == 60) at_60 = acc;
  }
  CHECK(std::abs(best_shift - 20) <= 5);
  CHECK(at_minus40 < best - 0.2);
  CHECK(at_60 < best - 0.2);
}
