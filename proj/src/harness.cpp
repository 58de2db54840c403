#include "mskl/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "mskl/error.hpp"
#include "mskl/seed.hpp"

namespace mskl::harness {

using episodes::Metaset;
using episodes::TaskDataset;
using json = nlohmann::ordered_json;

std::vector<RoundPlan> plan_round_robin(const Metaset& metaset, const std::optional<std::string>& test_task) {
  if (test_task) metaset.task(*test_task);  // throws when unknown
  std::vector<std::string> pool;
  for (const TaskDataset& t : metaset.tasks) {
    if (!test_task || t.name != *test_task) pool.push_back(t.name);
  }
  if (pool.size() < 2) {
    throw ValidationError("round-robin needs at least 2 non-test tasks, got " + std::to_string(pool.size()));
  }
  std::vector<RoundPlan> plans;
  for (const std::string& v : pool) {
    RoundPlan p{v, {}, test_task};
    for (const std::string& s : pool) {
      if (s != v) p.sources.push_back(s);
    }
    plans.push_back(std::move(p));
  }
  return plans;
}

void RunConfig::validate() const {
  if (reps == 0) throw ValidationError("--reps must be at least 1");
  for (std::size_t kk : k) {
    if (kk == 0) throw ValidationError("k values must be at least 1");
  }
  for (std::size_t s : ssf) seqnet::BackboneConfig::for_input_width(s);
  if (!(target_fps > 0.0)) throw ValidationError("target fps must be positive");
}

RoundData prepare_round(const Metaset& metaset, const RoundPlan& plan, std::size_t ssf, double target_fps) {
  RoundData round;
  round.plan = plan;
  round.ssf = ssf;
  auto prep = [&](const std::string& name, episodes::Role role) {
    TaskDataset t = episodes::preprocess_task(metaset.task(name), ssf, target_fps);
    t.role = role;
    return t;
  };
  std::vector<TaskDataset> sources;
  for (const std::string& s : plan.sources) sources.push_back(prep(s, episodes::Role::Source));
  round.sources = episodes::normalize_split(sources);
  std::vector<TaskDataset> val{prep(plan.validation, episodes::Role::Validation)};
  round.validation = std::move(episodes::normalize_split(val).front());
  if (plan.test) {
    std::vector<TaskDataset> test{prep(*plan.test, episodes::Role::Test)};
    round.test = std::move(episodes::normalize_split(test).front());
  }
  return round;
}

std::uint64_t rep_seed(std::uint64_t master, std::size_t ssf, std::size_t round, std::size_t rep) {
  return derive_seed(master, {ssf, round, rep});
}

// ---- aggregation ---------------------------------------------------------------

MetricSummary summarize(const std::vector<std::optional<double>>& values,
                        const std::vector<std::optional<double>>& aucs) {
  MetricSummary out;
  std::vector<double> present;
  std::vector<std::size_t> rep_of;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i]) {
      present.push_back(*values[i]);
      rep_of.push_back(i);
    }
  }
  if (present.empty()) return out;
  const metrics::TukeyResult t = metrics::tukey_filter(present);
  out.mean = metrics::mean(t.kept);
  out.std = metrics::stddev(t.kept);
  out.n_kept = t.kept.size();
  out.n_removed = t.removed.size();
  for (std::size_t i : t.removed_index) out.removed_reps.push_back(rep_of[i]);
  std::vector<double> kept_auc;
  for (std::size_t i : t.kept_index) {
    const std::size_t rep = rep_of[i];
    if (rep < aucs.size() && aucs[rep]) kept_auc.push_back(*aucs[rep]);
  }
  if (!kept_auc.empty()) out.auc_mean = metrics::mean(kept_auc);
  return out;
}

TestSummary summarize_test(const std::vector<std::optional<double>>& accuracies,
                           const std::vector<std::optional<double>>& aucs) {
  TestSummary out;
  const MetricSummary m = summarize(accuracies);
  out.mean = m.mean;
  out.std = m.std;
  for (std::size_t i = 0; i < accuracies.size(); ++i) {
    if (accuracies[i] && (!out.best || *accuracies[i] > *out.best)) {
      out.best = accuracies[i];
      out.best_rep = i;
      out.auc_best = i < aucs.size() ? aucs[i] : std::nullopt;
    }
  }
  return out;
}

RoundReport aggregate_round(const RoundData& round, std::size_t round_index, const std::vector<RunResult>& runs,
                            const std::vector<std::size_t>& ks) {
  RoundReport r;
  r.ssf = round.ssf;
  r.index = round_index;
  r.validation_task = round.plan.validation;
  r.source_tasks = round.plan.sources;
  r.test_task = round.plan.test;

  for (std::size_t k : ks) {
    std::vector<std::optional<double>> acc, auc;
    for (const RunResult& run : runs) {
      const auto it = run.validation.find(k);
      if (it != run.validation.end() && it->second) {
        acc.push_back(it->second->accuracy);
        auc.push_back(it->second->auc);
      } else {
        acc.push_back(std::nullopt);
        auc.push_back(std::nullopt);
      }
    }
    r.per_k[k] = summarize(acc, auc);
  }

  if (round.plan.test) {
    std::vector<std::optional<double>> acc, auc;
    for (const RunResult& run : runs) {
      acc.push_back(run.test ? std::optional<double>(run.test->accuracy) : std::nullopt);
      auc.push_back(run.test ? run.test->auc : std::nullopt);
    }
    r.test = summarize_test(acc, auc);
  }

  std::map<std::string, std::vector<double>> scores, smoothed;
  std::vector<std::string> order;
  for (const RunResult& run : runs) {
    if (!run.trust) continue;
    for (const metrics::TrustCondition& c : run.trust->conditions) {
      if (!scores.count(c.name)) order.push_back(c.name);
      auto& s = scores[c.name];
      if (c.score) {
        s.push_back(*c.score);
        smoothed[c.name].push_back(c.density->first_moment());
      }
    }
  }
  for (const std::string& name : order) {
    const auto& s = scores[name];
    if (s.empty()) {
      r.nts[name] = std::nullopt;
      continue;
    }
    const double m = metrics::mean(s);
    r.nts[name] = m;
    const double sm = metrics::mean(smoothed[name]);
    if (std::abs(sm - m) > 1e-3) r.nts_smoothed[name] = sm;
  }

  for (const RunResult& run : runs) {
    RunRow row{run.rep, run.seed, run.best_epoch, {}, std::nullopt};
    for (std::size_t k : ks) {
      const auto it = run.validation.find(k);
      row.validation[k] = it != run.validation.end() && it->second ? std::optional<double>(it->second->accuracy)
                                                                    : std::nullopt;
    }
    if (run.test) row.test = run.test->accuracy;
    r.runs.push_back(std::move(row));
  }
  return r;
}

OverallReport aggregate_overall(const std::vector<const RoundReport*>& rounds, const std::vector<std::size_t>& ks) {
  OverallReport o;
  auto mean_of = [](const std::vector<double>& v) -> std::optional<double> {
    if (v.empty()) return std::nullopt;
    return metrics::mean(v);
  };
  for (std::size_t k : ks) {
    std::vector<double> means;
    for (const RoundReport* r : rounds) {
      const auto it = r->per_k.find(k);
      if (it != r->per_k.end() && it->second.mean) means.push_back(*it->second.mean);
    }
    o.per_k[k] = mean_of(means);
  }
  std::vector<double> test_means, test_bests;
  for (const RoundReport* r : rounds) {
    if (r->test && r->test->mean) test_means.push_back(*r->test->mean);
    if (r->test && r->test->best) test_bests.push_back(*r->test->best);
  }
  o.test_mean = mean_of(test_means);
  o.test_best = mean_of(test_bests);
  return o;
}

// ---- JSON ----------------------------------------------------------------------

namespace {

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> get_opt(const json& j, const char* key) {
  const auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return it->get<double>();
}

json summary_json(const MetricSummary& m) {
  return json{{"mean", opt(m.mean)},       {"std", m.std},
              {"n_kept", m.n_kept},        {"n_removed", m.n_removed},
              {"removed_reps", m.removed_reps}, {"auc_mean", opt(m.auc_mean)}};
}

MetricSummary summary_from(const json& j) {
  MetricSummary m;
  m.mean = get_opt(j, "mean");
  m.std = j.at("std").get<double>();
  m.n_kept = j.at("n_kept").get<std::size_t>();
  m.n_removed = j.at("n_removed").get<std::size_t>();
  m.removed_reps = j.at("removed_reps").get<std::vector<std::size_t>>();
  m.auc_mean = get_opt(j, "auc_mean");
  return m;
}

}  // namespace

std::string to_json(const Report& report) {
  json root;
  root["schema"] = "report_v1";
  root["learner"] = report.learner;
  root["seed"] = report.seed;
  root["reps"] = report.reps;
  root["k"] = report.k;
  root["retrain_per_rep"] = report.retrain_per_rep;
  root["max_epochs"] = report.max_epochs ? json(*report.max_epochs) : json(nullptr);
  json rounds = json::array();
  for (const RoundReport& r : report.rounds) {
    json jr;
    jr["ssf"] = r.ssf;
    jr["index"] = r.index;
    jr["validation_task"] = r.validation_task;
    jr["source_tasks"] = r.source_tasks;
    jr["test_task"] = r.test_task ? json(*r.test_task) : json(nullptr);
    json per_k = json::object();
    for (const auto& [k, m] : r.per_k) per_k[std::to_string(k)] = summary_json(m);
    jr["per_k"] = per_k;
    if (r.test) {
      const TestSummary& t = *r.test;
      jr["test"] = json{{"mean", opt(t.mean)},
                        {"std", t.std},
                        {"best", opt(t.best)},
                        {"auc_best", opt(t.auc_best)},
                        {"best_rep", t.best_rep ? json(*t.best_rep) : json(nullptr)}};
    } else {
      jr["test"] = nullptr;
    }
    json nts = json::object();
    for (const auto& [name, v] : r.nts) nts[name] = opt(v);
    jr["nts"] = nts;
    json nts_s = json::object();
    for (const auto& [name, v] : r.nts_smoothed) nts_s[name] = v;
    jr["nts_smoothed"] = nts_s;
    json runs = json::array();
    for (const RunRow& row : r.runs) {
      json val = json::object();
      for (const auto& [k, v] : row.validation) val[std::to_string(k)] = opt(v);
      runs.push_back(json{{"rep", row.rep},
                          {"seed", row.seed},
                          {"best_epoch", row.best_epoch},
                          {"validation", val},
                          {"test", opt(row.test)}});
    }
    jr["runs"] = runs;
    rounds.push_back(std::move(jr));
  }
  root["rounds"] = rounds;
  json overall = json::object();
  for (const auto& [ssf, o] : report.overall) {
    json per_k = json::object();
    for (const auto& [k, v] : o.per_k) per_k[std::to_string(k)] = opt(v);
    overall[std::to_string(ssf)] = json{{"per_k", per_k}, {"test", {{"mean", opt(o.test_mean)}, {"best", opt(o.test_best)}}}};
  }
  root["overall"] = overall;
  return root.dump(2) + "\n";
}

Report report_from_json(const std::string& text) {
  Report report;
  try {
    const json root = json::parse(text);
    if (root.at("schema") != "report_v1") throw ValidationError("unsupported report schema");
    report.learner = root.at("learner").get<std::string>();
    report.seed = root.at("seed").get<std::uint64_t>();
    report.reps = root.at("reps").get<std::size_t>();
    report.k = root.at("k").get<std::vector<std::size_t>>();
    report.retrain_per_rep = root.at("retrain_per_rep").get<bool>();
    if (!root.at("max_epochs").is_null()) report.max_epochs = root.at("max_epochs").get<std::size_t>();
    for (const json& jr : root.at("rounds")) {
      RoundReport r;
      r.ssf = jr.at("ssf").get<std::size_t>();
      r.index = jr.at("index").get<std::size_t>();
      r.validation_task = jr.at("validation_task").get<std::string>();
      r.source_tasks = jr.at("source_tasks").get<std::vector<std::string>>();
      if (!jr.at("test_task").is_null()) r.test_task = jr.at("test_task").get<std::string>();
      for (const auto& [k, m] : jr.at("per_k").items()) r.per_k[std::stoul(k)] = summary_from(m);
      if (!jr.at("test").is_null()) {
        const json& t = jr.at("test");
        TestSummary s;
        s.mean = get_opt(t, "mean");
        s.std = t.at("std").get<double>();
        s.best = get_opt(t, "best");
        s.auc_best = get_opt(t, "auc_best");
        if (!t.at("best_rep").is_null()) s.best_rep = t.at("best_rep").get<std::size_t>();
        r.test = s;
      }
      for (const auto& [name, v] : jr.at("nts").items()) {
        r.nts[name] = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
      }
      for (const auto& [name, v] : jr.at("nts_smoothed").items()) r.nts_smoothed[name] = v.get<double>();
      for (const json& jrow : jr.at("runs")) {
        RunRow row;
        row.rep = jrow.at("rep").get<std::size_t>();
        row.seed = jrow.at("seed").get<std::uint64_t>();
        row.best_epoch = jrow.at("best_epoch").get<std::size_t>();
        for (const auto& [k, v] : jrow.at("validation").items()) {
          row.validation[std::stoul(k)] = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
        }
        row.test = get_opt(jrow, "test");
        r.runs.push_back(std::move(row));
      }
      report.rounds.push_back(std::move(r));
    }
    for (const auto& [ssf, jo] : root.at("overall").items()) {
      OverallReport o;
      for (const auto& [k, v] : jo.at("per_k").items()) {
        o.per_k[std::stoul(k)] = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
      }
      o.test_mean = get_opt(jo.at("test"), "mean");
      o.test_best = get_opt(jo.at("test"), "best");
      report.overall[std::stoul(ssf)] = o;
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed report: ") + e.what());
  }
  return report;
}

// ---- execution -----------------------------------------------------------------

std::size_t resolve_workers(std::size_t requested, std::size_t jobs) {
  std::size_t n = requested;
  if (n == 0) {
    if (const char* env = std::getenv("MSKL_WORKERS"); env && *env) {
      char* end = nullptr;
      const long v = std::strtol(env, &end, 10);
      if (*end != '\0' || v < 1) {
        throw ValidationError(std::string("MSKL_WORKERS must be a positive integer, got '") + env + "'");
      }
      n = static_cast<std::size_t>(v);
    } else {
      n = std::max(1u, std::thread::hardware_concurrency());
    }
  }
  return std::max<std::size_t>(1, std::min(n, jobs));
}

namespace {

// Runs fn(i) for i in [0, n) on up to `workers` threads. Exceptions are
// rethrown in index order after all threads finish.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto body = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers <= 1) {
    body();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(body);
    for (std::thread& t : threads) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::size_t task_classes(const RoundData& round) {
  const std::size_t c = round.validation.n_classes();
  if (round.plan.test && round.test->n_classes() != c) return 0;
  for (const TaskDataset& s : round.sources) {
    if (s.n_classes() != c) return 0;
  }
  return c;
}

metalearn::Learner initial_learner(const RoundData& round, metalearn::LearnerKind kind, std::uint64_t seed) {
  std::size_t classes = round.validation.n_classes();
  if (kind == metalearn::LearnerKind::FoMaml) {
    classes = task_classes(round);
    if (classes == 0) {
      throw ValidationError("fo-MAML needs the same number of classes in every task of round '" +
                            round.plan.validation + "'");
    }
  }
  return metalearn::make_learner(kind, seqnet::BackboneConfig::for_input_width(round.ssf), classes,
                                 derive_seed(seed, {0x1417}));
}

void evaluate(RunResult& out, const metalearn::Learner& learner, const RoundData& round,
              const RunConfig& config, std::uint64_t seed) {
  const std::size_t smallest = round.validation.smallest_class();
  for (std::size_t k : config.k) {
    if (k >= smallest) {
      out.validation[k] = std::nullopt;
      continue;
    }
    out.validation[k] = metalearn::adapt_and_evaluate(learner, round.validation, k, derive_seed(seed, {0x5a1, k}),
                                                      config.meta.inner_test);
  }
  if (round.test && round.test->smallest_class() > 1) {
    out.test = metalearn::adapt_and_evaluate(learner, *round.test, 1, derive_seed(seed, {0x7e57}),
                                             config.meta.inner_test);
  }
  const auto it = out.validation.find(1);
  if (it != out.validation.end() && it->second) {
    out.trust = metrics::trust_report(it->second->records, round.validation.class_names);
  }
}

std::string round_label(const RoundData& r, std::size_t index) {
  return "ssf" + std::to_string(r.ssf) + "_r" + std::to_string(index) + "_" + sanitize(r.plan.validation);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

RunOutput run(const Metaset& metaset, const RunConfig& input) {
  RunConfig config = input;
  if (config.k.empty()) config.k = {1};
  std::sort(config.k.begin(), config.k.end());
  config.k.erase(std::unique(config.k.begin(), config.k.end()), config.k.end());
  config.validate();
  metaset.validate();
  std::vector<std::size_t> widths = config.ssf;
  if (widths.empty()) widths.push_back(metaset.tasks.front().width());

  RunOutput out;
  const std::vector<RoundPlan> plans = plan_round_robin(metaset, config.test_task);
  for (std::size_t w : widths) {
    for (const RoundPlan& p : plans) out.rounds.push_back(prepare_round(metaset, p, w, config.target_fps));
  }
  const std::size_t per_width = plans.size();

  // Shared-model mode trains once per round; reps only redraw the evaluation.
  std::vector<std::optional<metalearn::TrainResult>> shared(out.rounds.size());
  const std::size_t n_rounds = out.rounds.size();
  const std::size_t n_jobs = n_rounds * config.reps;
  const std::size_t workers = resolve_workers(config.workers, n_jobs);

  auto train = [&](std::size_t r, std::uint64_t seed) {
    const RoundData& round = out.rounds[r];
    metalearn::MetaConfig meta = config.meta;
    metalearn::TrainResult tr = metalearn::meta_train(initial_learner(round, meta.kind, seed), round.sources,
                                                      round.validation, meta, seed);
    if (config.checkpoint_dir) {
      std::filesystem::create_directories(*config.checkpoint_dir);
      json meta_json{{"round", round.plan.validation}, {"ssf", round.ssf}, {"seed", seed}};
      metalearn::save_checkpoint(*config.checkpoint_dir / (round_label(round, r % per_width) + "_" +
                                                           std::to_string(seed) + ".mskl"),
                                 tr.best, meta_json.dump());
    }
    return tr;
  };

  if (!config.retrain_per_rep) {
    parallel_for(n_rounds, resolve_workers(config.workers, n_rounds), [&](std::size_t r) {
      const std::size_t w = widths[r / per_width];
      shared[r] = train(r, derive_seed(config.seed, {w, r % per_width, 0x5ba7ed}));
    });
  }

  out.results.assign(n_rounds, std::vector<RunResult>(config.reps));
  parallel_for(n_jobs, workers, [&](std::size_t job) {
    const std::size_t r = job / config.reps, rep = job % config.reps;
    const RoundData& round = out.rounds[r];
    RunResult& res = out.results[r][rep];
    res.rep = rep;
    res.seed = rep_seed(config.seed, round.ssf, r % per_width, rep);
    std::optional<metalearn::TrainResult> own;
    if (config.retrain_per_rep) own = train(r, res.seed);
    const metalearn::TrainResult& tr = config.retrain_per_rep ? *own : *shared[r];
    res.best_epoch = tr.best_epoch;
    res.epochs = tr.history.size();
    evaluate(res, tr.best, round, config, res.seed);
  });

  Report& report = out.report;
  report.learner = metalearn::to_string(config.meta.kind);
  report.seed = config.seed;
  report.reps = config.reps;
  report.k = config.k;
  report.retrain_per_rep = config.retrain_per_rep;
  if (config.meta.outer.max_epochs) report.max_epochs = config.meta.outer.max_epochs;
  for (std::size_t r = 0; r < n_rounds; ++r) {
    report.rounds.push_back(aggregate_round(out.rounds[r], r % per_width, out.results[r], config.k));
  }
  for (std::size_t wi = 0; wi < widths.size(); ++wi) {
    std::vector<const RoundReport*> rs;
    for (std::size_t r = wi * per_width; r < (wi + 1) * per_width; ++r) rs.push_back(&report.rounds[r]);
    report.overall[widths[wi]] = aggregate_overall(rs, config.k);
  }

  for (std::size_t r = 0; r < n_rounds; ++r) {
    const RoundReport& rr = report.rounds[r];
    out.log.push_back("round " + round_label(out.rounds[r], rr.index) + ": sources " +
                      std::to_string(rr.source_tasks.size()) + ", validation " + rr.validation_task +
                      (rr.test_task ? ", test " + *rr.test_task : std::string()));
    for (const RunResult& res : out.results[r]) {
      std::string line = "  rep " + std::to_string(res.rep) + " seed " + std::to_string(res.seed) + " epochs " +
                         std::to_string(res.epochs) + " best_epoch " + std::to_string(res.best_epoch);
      for (const auto& [k, ev] : res.validation) {
        line += " k" + std::to_string(k) + "=" + (ev ? fmt(ev->accuracy) : std::string("NA"));
      }
      if (res.test) line += " test=" + fmt(res.test->accuracy);
      out.log.push_back(line);
    }
    for (const auto& [k, m] : rr.per_k) {
      if (!m.mean) {
        out.log.push_back("  k" + std::to_string(k) + ": N/A (validation task has too few trials per class)");
        continue;
      }
      for (std::size_t rep : m.removed_reps) {
        out.log.push_back("  k" + std::to_string(k) + ": Tukey removed rep " + std::to_string(rep) + " (seed " +
                          std::to_string(out.results[r][rep].seed) + ")");
      }
    }
  }
  return out;
}

// ---- files ---------------------------------------------------------------------

std::string sanitize(const std::string& label) {
  std::string out;
  bool gap = false;
  for (char c : label) {
    const bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_' || c == '-';
    if (ok) {
      out.push_back(c);
      gap = false;
    } else if (!gap) {
      out.push_back('_');
      gap = true;
    }
  }
  return out.empty() ? "_" : out;
}

void write_predictions(const std::filesystem::path& file, const std::vector<std::string>& ids,
                       const std::vector<metrics::PredictionRecord>& records,
                       const std::vector<std::string>& class_names) {
  if (ids.size() != records.size()) throw ValidationError("write_predictions: ids and records differ in length");
  std::ofstream out(file);
  if (!out) throw RuntimeFailure(file.string() + ": cannot write");
  out << "id,actual,predicted";
  for (const std::string& c : class_names) out << ",p_" << c;
  out << "\n";
  char buf[32];
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    out << ids[i] << "," << r.actual << "," << r.predicted;
    for (double p : r.softmax) {
      std::snprintf(buf, sizeof buf, "%.17g", p);
      out << "," << buf;
    }
    out << "\n";
  }
}

PredictionLog read_predictions(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ValidationError(file.string() + ": cannot open predictions");
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    return cells;
  };
  PredictionLog log;
  std::string line;
  if (!std::getline(in, line)) throw ValidationError(file.string() + ": empty predictions file");
  const auto header = split(line);
  if (header.size() < 5 || header[0] != "id" || header[1] != "actual" || header[2] != "predicted") {
    throw ValidationError(file.string() + ":1: expected header id,actual,predicted,p_<class>,...");
  }
  for (std::size_t i = 3; i < header.size(); ++i) {
    if (header[i].rfind("p_", 0) != 0) throw ValidationError(file.string() + ":1: column '" + header[i] + "'");
    log.class_names.push_back(header[i].substr(2));
  }
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split(line);
    const std::string where = file.string() + ":" + std::to_string(line_no);
    if (cells.size() != header.size()) throw ValidationError(where + ": expected " + std::to_string(header.size()) + " cells");
    metrics::PredictionRecord r;
    try {
      r.actual = std::stoul(cells[1]);
      r.predicted = std::stoul(cells[2]);
      for (std::size_t i = 3; i < cells.size(); ++i) r.softmax.push_back(std::stod(cells[i]));
    } catch (const std::exception&) {
      throw ValidationError(where + ": malformed number");
    }
    try {
      metrics::validate_record(r);
    } catch (const ValidationError& e) {
      throw ValidationError(where + ": " + e.what());
    }
    log.ids.push_back(cells[0]);
    log.records.push_back(std::move(r));
  }
  if (log.records.empty()) throw ValidationError(file.string() + ": no prediction rows");
  return log;
}

void write_spectrum(const std::filesystem::path& file, const metrics::DensityCurve& curve) {
  std::ofstream out(file);
  if (!out) throw RuntimeFailure(file.string() + ": cannot write");
  out << "grid_point,density\n";
  char buf[64];
  for (std::size_t i = 0; i < curve.grid.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g\n", curve.grid[i], curve.density[i]);
    out << buf;
  }
}

void emit_report(const RunOutput& output, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "spectra", ec);
  fs::create_directories(dir / "predictions", ec);
  if (ec || !fs::is_directory(dir)) throw ValidationError(dir.string() + ": cannot create output directory");

  auto write_text = [](const fs::path& file, const std::string& text) {
    std::ofstream out(file, std::ios::binary);
    if (!out || !(out << text)) throw ValidationError(file.string() + ": cannot write");
  };
  const Report& report = output.report;
  write_text(dir / "report.json", to_json(report));

  // tables.csv: one row per validation task and per test task and width.
  std::ostringstream t;
  t << "task,role,ssf";
  for (std::size_t k : report.k) t << ",k" << k << "_mean,k" << k << "_std";
  t << ",best,auc_best\n";
  auto cell = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string(); };
  for (const RoundReport& r : report.rounds) {
    t << r.validation_task << ",validation," << r.ssf;
    for (std::size_t k : report.k) {
      const MetricSummary& m = r.per_k.at(k);
      t << "," << cell(m.mean) << "," << (m.mean ? fmt(m.std) : std::string());
    }
    t << ",,\n";
    if (r.test) {
      t << *r.test_task << ",test," << r.ssf;
      for (std::size_t k : report.k) {
        if (k == 1) {
          t << "," << cell(r.test->mean) << "," << (r.test->mean ? fmt(r.test->std) : std::string());
        } else {
          t << ",,";
        }
      }
      t << "," << cell(r.test->best) << "," << cell(r.test->auc_best) << "\n";
    }
  }
  for (const auto& [ssf, o] : report.overall) {
    t << "overall,validation," << ssf;
    for (std::size_t k : report.k) t << "," << cell(o.per_k.at(k)) << ",";
    t << ",\n";
    if (o.test_mean) t << "overall,test," << ssf << "," << cell(o.test_mean) << std::string(2 * report.k.size() - 1, ',')
                       << "," << cell(o.test_best) << ",\n";
  }
  write_text(dir / "tables.csv", t.str());

  for (std::size_t r = 0; r < output.rounds.size(); ++r) {
    const RoundData& round = output.rounds[r];
    const std::string label = round_label(round, report.rounds[r].index);
    std::map<std::string, std::vector<double>> pooled;
    std::vector<std::string> order;
    for (const RunResult& res : output.results[r]) {
      for (const auto& [k, ev] : res.validation) {
        if (!ev) continue;
        write_predictions(dir / "predictions" / (label + "_rep" + std::to_string(res.rep) + "_k" + std::to_string(k) + ".csv"),
                          ev->query_ids, ev->records, round.validation.class_names);
      }
      if (res.test) {
        write_predictions(dir / "predictions" / (label + "_rep" + std::to_string(res.rep) + "_test_" +
                                                 sanitize(*round.plan.test) + ".csv"),
                          res.test->query_ids, res.test->records, round.test->class_names);
      }
      if (!res.trust) continue;
      for (const metrics::TrustCondition& c : res.trust->conditions) {
        if (!pooled.count(c.name)) order.push_back(c.name);
        auto& v = pooled[c.name];
        v.insert(v.end(), c.values.begin(), c.values.end());
      }
    }
    for (const std::string& name : order) {
      if (pooled[name].empty()) continue;
      write_spectrum(dir / "spectra" / (label + "_" + sanitize(name) + ".csv"), metrics::trust_density(pooled[name]));
    }
  }

  std::string log;
  for (const std::string& line : output.log) log += line + "\n";
  write_text(dir / "run.log", log);
}

}  // namespace mskl::harness
