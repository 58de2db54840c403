#pragma once

// Round-robin orchestration: per-round preprocessing, seeded repetitions of
// meta-training plus k-shot evaluation, outlier-filtered aggregation and
// report files.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mskl/episodes.hpp"
#include "mskl/metalearn.hpp"
#include "mskl/metrics.hpp"

namespace mskl::harness {

struct RoundPlan {
  std::string validation;
  std::vector<std::string> sources;
  std::optional<std::string> test;

  friend bool operator==(const RoundPlan&, const RoundPlan&) = default;
};

// One round per non-test task, in manifest order. Throws ValidationError when
// fewer than two non-test tasks remain or the test task is unknown.
std::vector<RoundPlan> plan_round_robin(const episodes::Metaset& metaset,
                                        const std::optional<std::string>& test_task = std::nullopt);

struct RunConfig {
  std::vector<std::size_t> ssf;      // empty: use the data width as is
  std::vector<std::size_t> k{1};     // shots evaluated on the validation task
  std::size_t reps = 100;
  std::uint64_t seed = 0;
  metalearn::MetaConfig meta;
  std::optional<std::string> test_task;
  bool retrain_per_rep = true;
  double target_fps = 1.0;
  std::size_t workers = 0;  // 0: MSKL_WORKERS or hardware concurrency
  // When set, the best learner of every training run is written here.
  std::optional<std::filesystem::path> checkpoint_dir;

  void validate() const;
};

// Preprocessed, normalized data of one round at one feature width.
struct RoundData {
  RoundPlan plan;
  std::size_t ssf = 0;
  std::vector<episodes::TaskDataset> sources;
  episodes::TaskDataset validation;
  std::optional<episodes::TaskDataset> test;
};

RoundData prepare_round(const episodes::Metaset& metaset, const RoundPlan& plan, std::size_t ssf,
                        double target_fps);

struct RunResult {
  std::size_t rep = 0;
  std::uint64_t seed = 0;
  std::size_t best_epoch = 0;
  std::size_t epochs = 0;
  // One entry per requested k; empty when the validation task is too small.
  std::map<std::size_t, std::optional<metalearn::EvalResult>> validation;
  std::optional<metalearn::EvalResult> test;
  // From the k=1 validation predictions.
  std::optional<metrics::TrustReport> trust;
};

// Seed of repetition rep in round `round` at width ssf.
std::uint64_t rep_seed(std::uint64_t master, std::size_t ssf, std::size_t round, std::size_t rep);

// ---- aggregation ---------------------------------------------------------------

struct MetricSummary {
  std::optional<double> mean;
  double std = 0.0;
  std::size_t n_kept = 0;
  std::size_t n_removed = 0;
  std::vector<std::size_t> removed_reps;
  std::optional<double> auc_mean;

  friend bool operator==(const MetricSummary&, const MetricSummary&) = default;
};

struct TestSummary {
  std::optional<double> mean;
  double std = 0.0;
  std::optional<double> best;
  std::optional<double> auc_best;
  std::optional<std::size_t> best_rep;

  friend bool operator==(const TestSummary&, const TestSummary&) = default;
};

struct RunRow {
  std::size_t rep = 0;
  std::uint64_t seed = 0;
  std::size_t best_epoch = 0;
  std::map<std::size_t, std::optional<double>> validation;  // k -> accuracy
  std::optional<double> test;

  friend bool operator==(const RunRow&, const RunRow&) = default;
};

struct RoundReport {
  std::size_t ssf = 0;
  std::size_t index = 0;
  std::string validation_task;
  std::vector<std::string> source_tasks;
  std::optional<std::string> test_task;
  std::map<std::size_t, MetricSummary> per_k;
  std::optional<TestSummary> test;
  std::map<std::string, std::optional<double>> nts;
  std::map<std::string, double> nts_smoothed;  // only where it differs from nts
  std::vector<RunRow> runs;

  friend bool operator==(const RoundReport&, const RoundReport&) = default;
};

struct OverallReport {
  std::map<std::size_t, std::optional<double>> per_k;  // unweighted mean of round means
  std::optional<double> test_mean;
  std::optional<double> test_best;

  friend bool operator==(const OverallReport&, const OverallReport&) = default;
};

struct Report {
  std::string learner;
  std::uint64_t seed = 0;
  std::size_t reps = 0;
  std::vector<std::size_t> k;
  bool retrain_per_rep = true;
  std::optional<std::size_t> max_epochs;
  std::vector<RoundReport> rounds;
  std::map<std::size_t, OverallReport> overall;  // keyed by ssf

  friend bool operator==(const Report&, const Report&) = default;
};

// Tukey-filtered mean and sample std of the metric over runs; runs without a
// value are ignored.
MetricSummary summarize(const std::vector<std::optional<double>>& values,
                        const std::vector<std::optional<double>>& aucs = {});
TestSummary summarize_test(const std::vector<std::optional<double>>& accuracies,
                           const std::vector<std::optional<double>>& aucs);

RoundReport aggregate_round(const RoundData& round, std::size_t round_index,
                            const std::vector<RunResult>& runs, const std::vector<std::size_t>& ks);
OverallReport aggregate_overall(const std::vector<const RoundReport*>& rounds,
                                const std::vector<std::size_t>& ks);

std::string to_json(const Report& report);
Report report_from_json(const std::string& text);

// ---- execution -----------------------------------------------------------------

struct RunOutput {
  Report report;
  std::vector<RoundData> rounds;
  std::vector<std::vector<RunResult>> results;  // parallel to rounds
  std::vector<std::string> log;
};

// Number of worker threads: explicit request, else MSKL_WORKERS, else the
// hardware concurrency; never more than jobs.
std::size_t resolve_workers(std::size_t requested, std::size_t jobs);

RunOutput run(const episodes::Metaset& metaset, const RunConfig& config);

// Writes report.json, tables.csv, spectra/, predictions/ and run.log.
void emit_report(const RunOutput& output, const std::filesystem::path& dir);

// File-name safe version of a label: runs of characters outside [A-Za-z0-9._-]
// become a single underscore.
std::string sanitize(const std::string& label);

// Prediction CSV: id, actual, predicted, p_<class>...
void write_predictions(const std::filesystem::path& file, const std::vector<std::string>& ids,
                       const std::vector<metrics::PredictionRecord>& records,
                       const std::vector<std::string>& class_names);
struct PredictionLog {
  std::vector<std::string> ids;
  std::vector<std::string> class_names;
  std::vector<metrics::PredictionRecord> records;
};
PredictionLog read_predictions(const std::filesystem::path& file);

void write_spectrum(const std::filesystem::path& file, const metrics::DensityCurve& curve);

}  // namespace mskl::harness
