#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "mskl/cli.hpp"
#include "mskl/error.hpp"
#include "mskl/harness.hpp"
#include "mskl/seed.hpp"

using namespace mskl;
using namespace mskl::harness;
namespace fs = std::filesystem;

namespace {

episodes::Metaset tiny_metaset(std::size_t n_tasks, std::uint64_t seed = 3) {
  episodes::SynthConfig cfg;
  cfg.n_tasks = n_tasks;
  cfg.n_classes = 2;
  cfg.width = 2;
  cfg.min_length = 6;
  cfg.max_length = 10;
  cfg.min_trials = 5;
  cfg.max_trials = 6;
  cfg.seed = seed;
  return episodes::synth_metaset(cfg);
}

RunConfig tiny_config() {
  RunConfig cfg;
  cfg.reps = 2;
  cfg.seed = 7;
  cfg.k = {1, 2};
  cfg.meta.outer.max_epochs = 1;
  cfg.meta.outer.validation_draws = 1;
  cfg.meta.inner_test.n_updates = 2;
  return cfg;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("mskl_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int invoke(const std::vector<std::string>& args, std::string* err_text = nullptr) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  if (err_text) *err_text = err.str();
  return code;
}

}  // namespace

TEST_CASE("round-robin plans") {
  const episodes::Metaset five = tiny_metaset(5);
  const auto rounds = plan_round_robin(five);
  REQUIRE(rounds.size() == 5);
  for (std::size_t r = 0; r < 5; ++r) {
    CHECK(rounds[r].validation == five.tasks[r].name);
    CHECK(rounds[r].sources.size() == 4);
    CHECK(std::find(rounds[r].sources.begin(), rounds[r].sources.end(), rounds[r].validation) ==
          rounds[r].sources.end());
    CHECK_FALSE(rounds[r].test.has_value());
  }

  const episodes::Metaset six = tiny_metaset(6);
  const std::string test = six.tasks[5].name;
  const auto with_test = plan_round_robin(six, test);
  REQUIRE(with_test.size() == 5);
  for (const RoundPlan& p : with_test) {
    CHECK(p.sources.size() == 4);
    CHECK(p.test == test);
    CHECK(p.validation != test);
    CHECK(std::find(p.sources.begin(), p.sources.end(), test) == p.sources.end());
  }

  const auto two = plan_round_robin(tiny_metaset(2));
  REQUIRE(two.size() == 2);
  CHECK(two[0].sources.size() == 1);
  CHECK(two[1].sources.size() == 1);
  CHECK_THROWS_AS(plan_round_robin(tiny_metaset(2), tiny_metaset(2).tasks[0].name), ValidationError);
  CHECK_THROWS_AS(plan_round_robin(five, std::string("nope")), ValidationError);
}

TEST_CASE("repetition seeds are distinct and stable") {
  CHECK(rep_seed(1, 4, 0, 0) == rep_seed(1, 4, 0, 0));
  CHECK(rep_seed(1, 4, 0, 0) != rep_seed(1, 4, 0, 1));
  CHECK(rep_seed(1, 4, 0, 0) != rep_seed(1, 4, 1, 0));
  CHECK(rep_seed(1, 4, 0, 0) != rep_seed(1, 2, 0, 0));
  CHECK(rep_seed(1, 4, 0, 0) != rep_seed(2, 4, 0, 0));
}

TEST_CASE("summaries") {
  const MetricSummary constant = summarize({0.9, 0.9, 0.9});
  CHECK(*constant.mean == doctest::Approx(0.9));
  CHECK(constant.std == 0.0);
  CHECK(constant.n_kept == 3);

  std::vector<std::optional<double>> values;
  for (int i = 0; i < 99; ++i) values.push_back(0.85 + 0.001 * (i % 10));
  values.push_back(0.05);
  const MetricSummary s = summarize(values);
  CHECK(s.n_removed == 1);
  CHECK(s.removed_reps == std::vector<std::size_t>{99});
  double expect = 0.0;
  for (int i = 0; i < 99; ++i) expect += 0.85 + 0.001 * (i % 10);
  CHECK(*s.mean == doctest::Approx(expect / 99.0).epsilon(1e-12));

  const MetricSummary gaps = summarize({0.5, std::nullopt, 0.7});
  CHECK(*gaps.mean == doctest::Approx(0.6));
  CHECK(gaps.n_kept == 2);
  CHECK_FALSE(summarize({std::nullopt, std::nullopt}).mean.has_value());

  const TestSummary t = summarize_test({0.6, 0.9, 0.7}, {0.5, 0.95, std::nullopt});
  CHECK(*t.best == 0.9);
  CHECK(*t.best_rep == 1);
  CHECK(*t.auc_best == 0.95);
  CHECK(*t.best >= *t.mean);
}

TEST_CASE("overall is the unweighted mean of round means") {
  RoundReport a, b, c;
  a.per_k[1].mean = 0.9;
  b.per_k[1].mean = 0.6;
  c.per_k[1].mean = 0.75;
  a.per_k[4].mean = 1.0;
  b.per_k[4].mean = std::nullopt;
  c.per_k[4].mean = 0.8;
  const OverallReport o = aggregate_overall({&a, &b, &c}, {1, 4});
  CHECK(*o.per_k.at(1) == doctest::Approx(0.75));
  CHECK(*o.per_k.at(4) == doctest::Approx(0.9));
}

TEST_CASE("file names") {
  CHECK(sanitize("task one/two") == "task_one_two");
  CHECK(sanitize("a  b") == "a_b");
  CHECK(sanitize("ok-name_1.x") == "ok-name_1.x");
}

TEST_CASE("worker resolution") {
  CHECK(resolve_workers(3, 10) == 3);
  CHECK(resolve_workers(8, 2) == 2);
  CHECK(resolve_workers(0, 1) == 1);
  CHECK(resolve_workers(4, 0) >= 1);
}

TEST_CASE("prediction files round trip") {
  const fs::path dir = scratch("pred");
  const std::vector<metrics::PredictionRecord> recs{metrics::make_record({0.25, 0.75}, 1),
                                                    metrics::make_record({0.9, 0.1}, 1)};
  write_predictions(dir / "p.csv", {"a", "b"}, recs, {"novice", "expert"});
  const PredictionLog log = read_predictions(dir / "p.csv");
  CHECK(log.ids == std::vector<std::string>{"a", "b"});
  CHECK(log.class_names == std::vector<std::string>{"novice", "expert"});
  REQUIRE(log.records.size() == 2);
  CHECK(log.records[0].softmax == recs[0].softmax);
  CHECK(log.records[1].predicted == 0);
  CHECK(log.records[1].actual == 1);
  fs::remove_all(dir);
}

TEST_CASE("run, aggregate and emit") {
  const episodes::Metaset ms = tiny_metaset(3);
  RunConfig cfg = tiny_config();
  cfg.k = {1, 2, 6};
  cfg.workers = 2;
  const RunOutput out = run(ms, cfg);
  REQUIRE(out.report.rounds.size() == 3);
  for (const RoundReport& r : out.report.rounds) {
    CHECK(r.runs.size() == 2);
    CHECK(r.per_k.at(1).mean.has_value());
    // Classes hold 5 or 6 trials, so k = 6 leaves no query sample.
    CHECK_FALSE(r.per_k.at(6).mean.has_value());
    for (const RunRow& row : r.runs) {
      CHECK_FALSE(row.validation.at(6).has_value());
      CHECK(*row.validation.at(1) >= 0.0);
      CHECK(*row.validation.at(1) <= 1.0);
    }
  }
  const OverallReport& overall = out.report.overall.at(2);
  double sum = 0.0;
  for (const RoundReport& r : out.report.rounds) sum += *r.per_k.at(1).mean;
  CHECK(*overall.per_k.at(1) == doctest::Approx(sum / 3.0).epsilon(1e-12));

  // Every stored accuracy is reproducible from the prediction records.
  for (std::size_t r = 0; r < out.results.size(); ++r) {
    for (const RunResult& rr : out.results[r]) {
      const auto& ev = *rr.validation.at(1);
      CHECK(metrics::micro_accuracy(ev.records) == ev.accuracy);
    }
  }

  CHECK(report_from_json(to_json(out.report)) == out.report);

  const fs::path dir = scratch("emit");
  emit_report(out, dir);
  CHECK(fs::exists(dir / "report.json"));
  CHECK(fs::exists(dir / "tables.csv"));
  CHECK(fs::exists(dir / "run.log"));
  CHECK(report_from_json(slurp(dir / "report.json")) == out.report);
  std::size_t spectra = 0;
  for (const auto& e : fs::directory_iterator(dir / "spectra")) {
    const std::string name = e.path().filename().string();
    CHECK(name.find(' ') == std::string::npos);
    ++spectra;
  }
  CHECK(spectra > 0);
  for (const auto& e : fs::directory_iterator(dir / "predictions")) {
    const std::string name = e.path().filename().string();
    CHECK(name.find(' ') == std::string::npos);
    CHECK(name.find("_r") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("tables with the default k list") {
  const episodes::Metaset ms = tiny_metaset(2);
  RunConfig cfg = tiny_config();
  cfg.k = {};
  cfg.reps = 1;
  const RunOutput out = run(ms, cfg);
  const fs::path dir = scratch("tables");
  emit_report(out, dir);
  std::ifstream in(dir / "tables.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header.find("k1_mean") != std::string::npos);
  CHECK(header.find("k2_") == std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("reports do not depend on the worker count") {
  const episodes::Metaset ms = tiny_metaset(3, 5);
  RunConfig cfg = tiny_config();
  cfg.workers = 1;
  const std::string one = to_json(run(ms, cfg).report);
  cfg.workers = 4;
  const std::string four = to_json(run(ms, cfg).report);
  CHECK(one == four);
}

TEST_CASE("shared training across repetitions") {
  const episodes::Metaset ms = tiny_metaset(2, 8);
  RunConfig cfg = tiny_config();
  cfg.retrain_per_rep = false;
  cfg.reps = 3;
  const RunOutput out = run(ms, cfg);
  for (const RoundReport& r : out.report.rounds) {
    CHECK(r.runs.size() == 3);
    CHECK(r.runs[0].best_epoch == r.runs[2].best_epoch);
  }
  CHECK_FALSE(out.report.retrain_per_rep);
}

TEST_CASE("run configuration validation") {
  RunConfig cfg = tiny_config();
  cfg.reps = 0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = tiny_config();
  cfg.k = {0};
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("command line") {
  std::string err;
  CHECK(invoke({"run", "--out", "/tmp/x"}, &err) == kExitValidation);
  CHECK(err.find("manifest") != std::string::npos);
  CHECK(invoke({"run", "--manifest", "m.json", "--out", "o", "--bogus"}) == kExitValidation);
  CHECK(invoke({"frobnicate"}) == kExitValidation);
  CHECK(invoke({"run", "--manifest", "/nonexistent/manifest.json", "--out", "/tmp/mskl_never"}) ==
        kExitValidation);

  const fs::path dir = scratch("cli");
  const std::string data = (dir / "data").string();
  REQUIRE(invoke({"synth", "--tasks", "2", "--classes", "2", "--dims", "2", "--min-length", "6", "--max-length", "10",
               "--min-trials", "5", "--max-trials", "5", "--seed", "4", "--out", data}) == kExitOk);
  const std::vector<std::string> run_args{"run",  "--manifest",   data + "/manifest.json", "--reps", "2",
                                          "--seed", "7",          "--max-epochs",          "1",      "--k",
                                          "1",    "--workers",    "2"};
  std::vector<std::string> a = run_args, b = run_args;
  a.insert(a.end(), {"--out", (dir / "a").string(), "--save-checkpoints"});
  b.insert(b.end(), {"--out", (dir / "b").string()});
  REQUIRE(invoke(a) == kExitOk);
  REQUIRE(invoke(b) == kExitOk);
  CHECK(slurp(dir / "a" / "report.json") == slurp(dir / "b" / "report.json"));

  // Trust spectra from a stored prediction log.
  fs::path pred;
  for (const auto& e : fs::directory_iterator(dir / "a" / "predictions")) pred = e.path();
  REQUIRE_FALSE(pred.empty());
  CHECK(invoke({"trust", "--predictions", pred.string(), "--out", (dir / "trust").string()}) == kExitOk);
  CHECK(fs::exists(dir / "trust" / "nts.json"));

  // A saved checkpoint adapts to a task.
  fs::path ckpt;
  for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
    if (e.path().extension() == ".mskl") ckpt = e.path();
  }
  REQUIRE_FALSE(ckpt.empty());
  episodes::Metaset ms = episodes::load_metaset(data + "/manifest.json");
  CHECK(invoke({"adapt", "--checkpoint", ckpt.string(), "--manifest", data + "/manifest.json", "--task",
             ms.tasks[0].name, "--k", "1", "--out", (dir / "adapt").string()}) == kExitOk);
  CHECK(invoke({"adapt", "--checkpoint", ckpt.string(), "--manifest", data + "/manifest.json", "--task",
             ms.tasks[0].name, "--k", "9", "--out", (dir / "adapt2").string()}) == kExitValidation);
  fs::remove_all(dir);
}
