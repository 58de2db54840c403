#include "mskl/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mskl/episodes.hpp"
#include "mskl/error.hpp"
#include "mskl/gradsuite.hpp"
#include "mskl/harness.hpp"
#include "mskl/metalearn.hpp"
#include "mskl/seed.hpp"

namespace mskl {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v, int digits = 4) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : "N/A"; }

struct TrainOptions {
  std::string learner = "protomaml";
  std::size_t max_epochs = 0;
  double target_fps = 1.0;
  double inner_clip = 0.0;
  std::size_t inner_backtracks = 8;

  metalearn::MetaConfig meta() const {
    if (!(inner_clip >= 0.0)) throw ValidationError("--inner-clip must be >= 0");
    metalearn::MetaConfig m;
    m.kind = metalearn::parse_learner(learner);
    m.outer.max_epochs = max_epochs;
    m.inner_train.max_grad_norm = inner_clip;
    m.inner_test.max_grad_norm = inner_clip;
    m.inner_train.max_backtracks = inner_backtracks;
    m.inner_test.max_backtracks = inner_backtracks;
    return m;
  }
};

void add_train_options(CLI::App* cmd, TrainOptions& o) {
  cmd->add_option("--learner", o.learner, "protonet, fomaml or protomaml")->capture_default_str();
  cmd->add_option("--max-epochs", o.max_epochs,
                  "Cap on meta-training epochs, 0 for none. Values below 40 shorten the standard recipe")
      ->capture_default_str();
  cmd->add_option("--target-fps", o.target_fps, "Frame rate after subsampling")->capture_default_str();
  cmd->add_option("--inner-clip", o.inner_clip, "Global gradient-norm cap for inner-loop steps, 0 disables")
      ->capture_default_str();
  cmd->add_option("--inner-backtracks", o.inner_backtracks,
                  "Halvings of an inner step that would raise the support loss, 0 disables")
      ->capture_default_str();
}

// Preprocesses one task to the given width and normalizes it as its own split.
episodes::TaskDataset prepare_single(const episodes::TaskDataset& task, std::size_t width, double fps,
                                     episodes::Role role) {
  std::vector<episodes::TaskDataset> one{episodes::preprocess_task(task, width, fps)};
  one.front().role = role;
  return episodes::normalize_split(one).front();
}

int cmd_run(const std::string& manifest, const harness::RunConfig& config, const fs::path& out_dir,
            std::ostream& out) {
  const episodes::Metaset metaset = episodes::load_metaset(manifest);
  const harness::RunOutput result = harness::run(metaset, config);
  harness::emit_report(result, out_dir);
  for (const harness::RoundReport& r : result.report.rounds) {
    out << "ssf " << r.ssf << " round " << r.index << " (" << r.validation_task << ")";
    for (const auto& [k, m] : r.per_k) out << "  k=" << k << ": " << fmt(m.mean) << " +- " << fmt(m.std);
    if (r.test) out << "  test " << *r.test_task << ": mean " << fmt(r.test->mean) << " best " << fmt(r.test->best);
    out << "\n";
  }
  for (const auto& [ssf, o] : result.report.overall) {
    out << "overall ssf " << ssf;
    for (const auto& [k, v] : o.per_k) out << "  k=" << k << ": " << fmt(v);
    out << "\n";
  }
  out << "wrote " << (out_dir / "report.json").string() << "\n";
  return kExitOk;
}

int cmd_train(const std::string& manifest, const std::string& validation, const std::string& test,
              std::size_t ssf, std::uint64_t seed, const TrainOptions& opts, const fs::path& out_file,
              std::ostream& out) {
  const episodes::Metaset metaset = episodes::load_metaset(manifest);
  metaset.validate();
  std::optional<std::string> test_task;
  if (!test.empty()) test_task = test;
  const std::vector<harness::RoundPlan> plans = harness::plan_round_robin(metaset, test_task);
  const auto plan = std::find_if(plans.begin(), plans.end(),
                                 [&](const harness::RoundPlan& p) { return p.validation == validation; });
  if (plan == plans.end()) throw ValidationError("validation task '" + validation + "' is not a round-robin task");
  const std::size_t width = ssf ? ssf : metaset.tasks.front().width();
  const harness::RoundData round = harness::prepare_round(metaset, *plan, width, opts.target_fps);
  const metalearn::MetaConfig meta = opts.meta();
  std::size_t classes = round.validation.n_classes();
  const metalearn::Learner init = metalearn::make_learner(
      meta.kind, seqnet::BackboneConfig::for_input_width(width), classes, derive_seed(seed, {0x1417}));
  const metalearn::TrainResult tr = metalearn::meta_train(init, round.sources, round.validation, meta, seed);
  nlohmann::json metadata{{"validation_task", validation}, {"ssf", width}, {"seed", seed},
                          {"best_epoch", tr.best_epoch}, {"best_validation", tr.best_validation}};
  metalearn::save_checkpoint(out_file, tr.best, metadata.dump());
  out << "trained " << tr.history.size() << " epochs, best epoch " << tr.best_epoch << " validation accuracy "
      << fmt(tr.best_validation) << "\nwrote " << out_file.string() << "\n";
  return kExitOk;
}

int cmd_adapt(const fs::path& checkpoint, const std::string& manifest, const std::string& task, std::size_t k,
              std::uint64_t seed, double fps, double inner_clip, std::size_t inner_backtracks,
              const std::string& out_file, std::ostream& out) {
  const metalearn::Learner learner = metalearn::load_checkpoint(checkpoint);
  const episodes::Metaset metaset = episodes::load_metaset(manifest);
  const episodes::TaskDataset target =
      prepare_single(metaset.task(task), learner.backbone.d_in, fps, episodes::Role::Test);
  metalearn::InnerLoopConfig inner = metalearn::MetaConfig{}.inner_test;
  inner.max_grad_norm = inner_clip;
  inner.max_backtracks = inner_backtracks;
  const metalearn::EvalResult ev = metalearn::adapt_and_evaluate(learner, target, k, seed, inner);
  out << "task " << task << " k=" << k << " accuracy " << fmt(ev.accuracy);
  if (ev.auc) out << " auc " << fmt(*ev.auc);
  out << "\n";
  if (!out_file.empty()) {
    harness::write_predictions(out_file, ev.query_ids, ev.records, target.class_names);
    out << "wrote " << out_file << "\n";
  }
  return kExitOk;
}

int cmd_trust(const fs::path& predictions, const fs::path& out_dir, std::ostream& out) {
  const harness::PredictionLog log = harness::read_predictions(predictions);
  const metrics::TrustReport report = metrics::trust_report(log.records, log.class_names);
  std::error_code ec;
  fs::create_directories(out_dir / "spectra", ec);
  if (ec) throw ValidationError(out_dir.string() + ": cannot create output directory");
  nlohmann::ordered_json j;
  j["accuracy"] = metrics::micro_accuracy(log.records);
  j["n"] = log.records.size();
  nlohmann::ordered_json conds = nlohmann::ordered_json::object();
  for (const metrics::TrustCondition& c : report.conditions) {
    nlohmann::ordered_json jc;
    jc["n"] = c.values.size();
    jc["nts"] = c.score ? nlohmann::ordered_json(*c.score) : nlohmann::ordered_json(nullptr);
    if (c.smoothed_score) jc["nts_smoothed"] = *c.smoothed_score;
    conds[c.name] = jc;
    out << c.name << ": " << fmt(c.score) << " (n=" << c.values.size() << ")\n";
    if (c.density) harness::write_spectrum(out_dir / "spectra" / (harness::sanitize(c.name) + ".csv"), *c.density);
  }
  j["conditions"] = conds;
  std::ofstream f(out_dir / "nts.json");
  if (!f || !(f << j.dump(2) << "\n")) throw ValidationError((out_dir / "nts.json").string() + ": cannot write");
  return kExitOk;
}

int cmd_synth(const episodes::SynthConfig& config, const fs::path& out_dir, std::ostream& out) {
  const episodes::Metaset m = episodes::synth_metaset(config);
  episodes::write_metaset(m, out_dir);
  std::size_t trials = 0;
  for (const auto& t : m.tasks) trials += t.trials.size();
  out << "wrote " << m.tasks.size() << " tasks, " << trials << " trials to " << (out_dir / "manifest.json").string()
      << "\n";
  return kExitOk;
}

int cmd_gradcheck(const gradsuite::SuiteConfig& config, std::ostream& out) {
  const gradsuite::SuiteReport r = gradsuite::run_suite(config);
  out << "configs " << r.configs << ", cases " << r.cases.size() << ", coordinates " << r.coords_checked
      << " (" << r.coords_nonsmooth << " at ReLU kinks skipped)\n"
      << "max relative error " << r.max_rel_error << " at " << r.worst_case << "\n"
      << (r.passed ? "PASS" : "FAIL") << "\n";
  return r.passed ? kExitOk : kExitRuntime;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot skill assessment: meta-learning, evaluation and trust metrics", "mskl"};
  app.require_subcommand(1);

  std::string manifest, out_path, test_task, validation_task, task, checkpoint, predictions;
  std::uint64_t seed = 0;
  TrainOptions train_opts;

  harness::RunConfig run_config;
  std::vector<std::size_t> ssf_list, k_list;
  bool save_checkpoints = false;
  auto* run = app.add_subcommand("run", "Round-robin meta-training and evaluation");
  run->add_option("--manifest", manifest, "Metaset manifest.json")->required();
  run->add_option("--ssf", ssf_list, "Feature widths to pool to (2,4,8,16,32,64); default: data width")
      ->delimiter(',');
  run->add_option("--k", k_list, "Test shots evaluated on the validation task")->delimiter(',');
  run->add_option("--reps", run_config.reps, "Repetitions per round")->capture_default_str();
  run->add_option("--seed", seed, "Master seed")->capture_default_str();
  run->add_option("--out", out_path, "Output directory")->required();
  run->add_option("--test-task", test_task, "Task held out of the round-robin, evaluated every round");
  run->add_flag("--retrain-per-rep,!--no-retrain-per-rep", run_config.retrain_per_rep,
                "Retrain the meta-learner for every repetition (default) or once per round");
  run->add_flag("--save-checkpoints", save_checkpoints, "Write the best learner of every training run");
  run->add_option("--workers", run_config.workers, "Worker threads (default: MSKL_WORKERS or all cores)");
  add_train_options(run, train_opts);

  std::size_t train_ssf = 0;
  auto* train = app.add_subcommand("train", "Meta-train one round and write a checkpoint");
  train->add_option("--manifest", manifest, "Metaset manifest.json")->required();
  train->add_option("--validation-task", validation_task, "Task used for validation")->required();
  train->add_option("--test-task", test_task, "Task excluded from training");
  train->add_option("--ssf", train_ssf, "Feature width; default: data width");
  train->add_option("--seed", seed, "Seed")->capture_default_str();
  train->add_option("--out", out_path, "Checkpoint file")->required();
  add_train_options(train, train_opts);

  std::size_t adapt_k = 1;
  double adapt_fps = 1.0;
  auto* adapt = app.add_subcommand("adapt", "Adapt a checkpoint to a target task and score it");
  adapt->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  adapt->add_option("--manifest", manifest, "Metaset manifest.json")->required();
  adapt->add_option("--task", task, "Target task")->required();
  adapt->add_option("--k", adapt_k, "Support trials per class")->capture_default_str();
  adapt->add_option("--seed", seed, "Seed for the support draw")->capture_default_str();
  adapt->add_option("--target-fps", adapt_fps, "Frame rate after subsampling")->capture_default_str();
  adapt->add_option("--out", out_path, "Prediction CSV to write");
  adapt->add_option("--inner-clip", train_opts.inner_clip, "Global gradient-norm cap for inner-loop steps, 0 disables")
      ->capture_default_str();
  adapt->add_option("--inner-backtracks", train_opts.inner_backtracks,
                    "Halvings of an inner step that would raise the support loss, 0 disables")
      ->capture_default_str();

  auto* trust = app.add_subcommand("trust", "Trust scores and spectra from a prediction log");
  trust->add_option("--predictions", predictions, "Prediction CSV (id,actual,predicted,p_<class>...)")->required();
  trust->add_option("--out", out_path, "Output directory")->required();

  episodes::SynthConfig synth_config;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic metaset");
  synth->add_option("--tasks", synth_config.n_tasks, "Task families")->capture_default_str();
  synth->add_option("--classes", synth_config.n_classes, "Classes per task")->capture_default_str();
  synth->add_option("--dims", synth_config.width, "Feature width")->capture_default_str();
  synth->add_option("--sep", synth_config.separation, "Distance between class offsets")->capture_default_str();
  synth->add_option("--noise", synth_config.noise, "Frame noise standard deviation")->capture_default_str();
  synth->add_option("--min-length", synth_config.min_length, "Shortest sequence")->capture_default_str();
  synth->add_option("--max-length", synth_config.max_length, "Longest sequence")->capture_default_str();
  synth->add_option("--min-trials", synth_config.min_trials, "Fewest trials per class")->capture_default_str();
  synth->add_option("--max-trials", synth_config.max_trials, "Most trials per class")->capture_default_str();
  synth->add_option("--seed", seed, "Seed")->capture_default_str();
  synth->add_option("--out", out_path, "Output directory")->required();

  gradsuite::SuiteConfig grad_config;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gradcheck->add_option("--configs", grad_config.n_configs, "Random configurations")->capture_default_str();
  gradcheck->add_option("--seed", seed, "Seed")->capture_default_str();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const CLI::App* sub = nullptr;
    for (const CLI::App* s : app.get_subcommands()) sub = s;
    err << (sub ? sub->help() : app.help());
    return kExitValidation;
  }

  try {
    if (*run) {
      run_config.seed = seed;
      run_config.ssf = ssf_list;
      run_config.k = k_list.empty() ? std::vector<std::size_t>{1} : k_list;
      run_config.meta = train_opts.meta();
      run_config.target_fps = train_opts.target_fps;
      if (!test_task.empty()) run_config.test_task = test_task;
      if (save_checkpoints) run_config.checkpoint_dir = fs::path(out_path) / "checkpoints";
      return cmd_run(manifest, run_config, out_path, out);
    }
    if (*train) return cmd_train(manifest, validation_task, test_task, train_ssf, seed, train_opts, out_path, out);
    if (*adapt) return cmd_adapt(checkpoint, manifest, task, adapt_k, seed, adapt_fps, train_opts.inner_clip, train_opts.inner_backtracks, out_path, out);
    if (*trust) return cmd_trust(predictions, out_path, out);
    if (*synth) {
      synth_config.seed = seed;
      return cmd_synth(synth_config, out_path, out);
    }
    if (*gradcheck) {
      grad_config.seed = seed;
      return cmd_gradcheck(grad_config, out);
    }
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "failure: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitValidation;
}

}  // namespace mskl
