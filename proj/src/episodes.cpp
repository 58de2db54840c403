#include "mskl/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mskl/error.hpp"
#include "mskl/seed.hpp"

namespace mskl::episodes {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- TaskDataset / Metaset ---------------------------------------------------

std::vector<std::size_t> TaskDataset::class_counts() const {
  std::vector<std::size_t> counts(class_names.size(), 0);
  for (const Trial& t : trials) {
    if (t.label < counts.size()) ++counts[t.label];
  }
  return counts;
}

std::size_t TaskDataset::smallest_class() const {
  auto counts = class_counts();
  return counts.empty() ? 0 : *std::min_element(counts.begin(), counts.end());
}

std::size_t TaskDataset::width() const {
  return trials.empty() ? 0 : trials.front().sequence.shape.at(1);
}

void TaskDataset::validate() const {
  if (class_names.size() < 2) {
    throw ValidationError("task '" + name + "' needs at least 2 classes");
  }
  std::set<std::string> ids;
  for (const Trial& t : trials) {
    if (t.label >= class_names.size()) {
      throw ValidationError("task '" + name + "' trial '" + t.id + "' has label " +
                            std::to_string(t.label) + " outside its class set");
    }
    if (t.sequence.rank() != 2 || t.sequence.shape[0] == 0) {
      throw ValidationError("task '" + name + "' trial '" + t.id + "' has an empty sequence");
    }
    if (t.sequence.shape[1] != width()) {
      throw ValidationError("task '" + name + "' trial '" + t.id + "' has width " +
                            std::to_string(t.sequence.shape[1]) + ", expected " +
                            std::to_string(width()));
    }
    if (!ids.insert(t.id).second) {
      throw ValidationError("task '" + name + "' has duplicate trial id '" + t.id + "'");
    }
  }
  const auto counts = class_counts();
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) {
      throw ValidationError("task '" + name + "' class '" + class_names[c] + "' has no trials");
    }
  }
}

const TaskDataset& Metaset::task(const std::string& name) const {
  for (const TaskDataset& t : tasks) {
    if (t.name == name) return t;
  }
  throw ValidationError("unknown task '" + name + "'");
}

void Metaset::validate() const {
  if (tasks.empty()) throw ValidationError("metaset has no tasks");
  std::set<std::string> names;
  for (const TaskDataset& t : tasks) {
    if (!names.insert(t.name).second) throw ValidationError("duplicate task name '" + t.name + "'");
    t.validate();
  }
}

std::vector<std::size_t> Episode::support_labels() const {
  std::vector<std::size_t> out;
  out.reserve(support.size());
  for (const Trial* t : support) out.push_back(t->label);
  return out;
}

std::vector<std::size_t> Episode::query_labels() const {
  std::vector<std::size_t> out;
  out.reserve(query.size());
  for (const Trial* t : query) out.push_back(t->label);
  return out;
}

// ---- ingestion ---------------------------------------------------------------

Array read_feature_csv(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw ValidationError(file.string() + ": cannot open feature file");
  std::vector<double> values;
  std::size_t width = 0, rows = 0, line_no = 0;
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::size_t cols = 0;
    const char* p = line.c_str();
    while (true) {
      char* end = nullptr;
      const double v = std::strtod(p, &end);
      if (end == p || !std::isfinite(v)) {
        throw ValidationError(file.string() + ":" + std::to_string(line_no) + ": column " +
                              std::to_string(cols + 1) + " is not a finite number");
      }
      values.push_back(v);
      ++cols;
      p = end;
      while (*p == ' ' || *p == '\t') ++p;
      if (*p == '\0') break;
      if (*p != ',') {
        throw ValidationError(file.string() + ":" + std::to_string(line_no) +
                              ": expected ',' after column " + std::to_string(cols));
      }
      ++p;
    }
    if (rows == 0) {
      width = cols;
    } else if (cols != width) {
      throw ValidationError(file.string() + ":" + std::to_string(line_no) + ": row has " +
                            std::to_string(cols) + " columns, expected " + std::to_string(width));
    }
    ++rows;
  }
  if (rows == 0) throw ValidationError(file.string() + ": feature file has no rows (T=0)");
  return Array(Shape{rows, width}, std::move(values));
}

void write_feature_csv(const fs::path& file, const Array& sequence) {
  if (sequence.rank() != 2) throw ValidationError("write_feature_csv: expected [T x D]");
  std::ofstream out(file, std::ios::binary);
  if (!out) throw RuntimeFailure(file.string() + ": cannot write feature file");
  char buf[40];
  const std::size_t T = sequence.shape[0], D = sequence.shape[1];
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t d = 0; d < D; ++d) {
      std::snprintf(buf, sizeof buf, "%.17g", sequence.at(t, d));
      if (d) out << ',';
      out << buf;
    }
    out << '\n';
  }
}

Metaset load_metaset(const fs::path& manifest) {
  std::ifstream in(manifest, std::ios::binary);
  if (!in) throw ValidationError(manifest.string() + ": cannot open manifest");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError(manifest.string() + ": invalid JSON: " + e.what());
  }
  const fs::path root = manifest.parent_path();
  if (!doc.is_object() || !doc.contains("tasks") || !doc["tasks"].is_array()) {
    throw ValidationError(manifest.string() + ": expected an object with a 'tasks' array");
  }
  Metaset ms;
  try {
    for (const json& jt : doc["tasks"]) {
      TaskDataset task;
      task.name = jt.at("name").get<std::string>();
      task.class_names = jt.at("classes").get<std::vector<std::string>>();
      const double fps = jt.value("fps", 1.0);
      if (!(fps > 0.0)) throw ValidationError(manifest.string() + ": task '" + task.name + "' fps must be positive");
      std::map<std::string, std::size_t> class_index;
      for (std::size_t c = 0; c < task.class_names.size(); ++c) class_index[task.class_names[c]] = c;
      for (const json& jr : jt.at("trials")) {
        Trial trial;
        trial.id = jr.at("id").get<std::string>();
        trial.fps = fps;
        const json& jl = jr.at("label");
        if (jl.is_string()) {
          auto it = class_index.find(jl.get<std::string>());
          if (it == class_index.end()) {
            throw ValidationError(manifest.string() + ": task '" + task.name + "' trial '" +
                                  trial.id + "' has unknown label '" + jl.get<std::string>() + "'");
          }
          trial.label = it->second;
        } else {
          const auto idx = jl.get<long long>();
          if (idx < 0 || static_cast<std::size_t>(idx) >= task.class_names.size()) {
            throw ValidationError(manifest.string() + ": task '" + task.name + "' trial '" +
                                  trial.id + "' has unknown label " + std::to_string(idx));
          }
          trial.label = static_cast<std::size_t>(idx);
        }
        const fs::path file = root / jr.at("file").get<std::string>();
        if (!fs::exists(file)) {
          throw ValidationError(manifest.string() + ": task '" + task.name + "' trial '" +
                                trial.id + "' references missing file " + file.string());
        }
        trial.sequence = read_feature_csv(file);
        task.trials.push_back(std::move(trial));
      }
      ms.tasks.push_back(std::move(task));
    }
  } catch (const json::exception& e) {
    throw ValidationError(manifest.string() + ": malformed manifest: " + e.what());
  }
  ms.validate();
  return ms;
}

namespace {

std::string safe_component(const std::string& s) {
  std::string out = s;
  for (char& c : out) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                    c == '-' || c == '_' || c == '.';
    if (!ok) c = '_';
  }
  return out;
}

}  // namespace

void write_metaset(const Metaset& metaset, const fs::path& dir) {
  metaset.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw RuntimeFailure(dir.string() + ": cannot create directory: " + ec.message());
  json doc;
  doc["tasks"] = json::array();
  for (const TaskDataset& task : metaset.tasks) {
    const fs::path rel_dir = fs::path("features") / safe_component(task.name);
    fs::create_directories(dir / rel_dir, ec);
    if (ec) throw RuntimeFailure((dir / rel_dir).string() + ": " + ec.message());
    json jt;
    jt["name"] = task.name;
    jt["classes"] = task.class_names;
    jt["fps"] = task.trials.empty() ? 1.0 : task.trials.front().fps;
    jt["trials"] = json::array();
    for (const Trial& t : task.trials) {
      const fs::path rel = rel_dir / (safe_component(t.id) + ".csv");
      write_feature_csv(dir / rel, t.sequence);
      jt["trials"].push_back({{"id", t.id}, {"label", task.class_names[t.label]}, {"file", rel.generic_string()}});
    }
    doc["tasks"].push_back(std::move(jt));
  }
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  if (!out) throw RuntimeFailure((dir / "manifest.json").string() + ": cannot write manifest");
  out << doc.dump(2) << '\n';
}

// ---- preprocessing -----------------------------------------------------------

Trial subsample_fps(const Trial& trial, double target_fps) {
  if (!(target_fps > 0.0)) throw ValidationError("subsample_fps: target fps must be positive");
  if (trial.fps < target_fps) {
    throw ValidationError("subsample_fps: trial '" + trial.id + "' at " + std::to_string(trial.fps) +
                          " fps is below the target " + std::to_string(target_fps));
  }
  const auto stride = static_cast<std::size_t>(std::llround(trial.fps / target_fps));
  const std::size_t T = trial.sequence.shape.at(0), D = trial.sequence.shape.at(1);
  Trial out;
  out.id = trial.id;
  out.label = trial.label;
  out.fps = trial.fps / static_cast<double>(stride);
  std::vector<double> values;
  std::size_t kept = 0;
  for (std::size_t t = 0; t < T; t += stride, ++kept) {
    values.insert(values.end(), trial.sequence.data.begin() + static_cast<long>(t * D),
                  trial.sequence.data.begin() + static_cast<long>((t + 1) * D));
  }
  out.sequence = Array(Shape{kept, D}, std::move(values));
  return out;
}

Trial pool_to_ssf(const Trial& trial, std::size_t width) {
  Trial out = trial;
  out.sequence = ad::avg_pool_channels(trial.sequence, width);
  return out;
}

std::vector<Trial> minmax_normalize(std::span<const Trial> split) {
  if (split.empty()) throw ValidationError("minmax_normalize: empty split");
  const std::size_t D = split.front().sequence.shape.at(1);
  std::vector<double> lo(D, std::numeric_limits<double>::infinity());
  std::vector<double> hi(D, -std::numeric_limits<double>::infinity());
  for (const Trial& t : split) {
    if (t.sequence.shape.at(1) != D) throw ValidationError("minmax_normalize: mixed widths in split");
    for (std::size_t i = 0; i < t.sequence.size(); ++i) {
      const std::size_t d = i % D;
      lo[d] = std::min(lo[d], t.sequence[i]);
      hi[d] = std::max(hi[d], t.sequence[i]);
    }
  }
  std::vector<Trial> out(split.begin(), split.end());
  for (Trial& t : out) {
    for (std::size_t i = 0; i < t.sequence.size(); ++i) {
      const std::size_t d = i % D;
      const double range = hi[d] - lo[d];
      t.sequence[i] = range > 0.0 ? (t.sequence[i] - lo[d]) / range : 0.0;
    }
  }
  return out;
}

TaskDataset preprocess_task(const TaskDataset& task, std::size_t width, double target_fps) {
  TaskDataset out = task;
  for (Trial& t : out.trials) t = pool_to_ssf(subsample_fps(t, target_fps), width);
  return out;
}

std::vector<TaskDataset> normalize_split(std::span<const TaskDataset> tasks) {
  std::vector<Trial> pooled;
  for (const TaskDataset& t : tasks) pooled.insert(pooled.end(), t.trials.begin(), t.trials.end());
  std::vector<Trial> normalized = minmax_normalize(pooled);
  std::vector<TaskDataset> out(tasks.begin(), tasks.end());
  std::size_t next = 0;
  for (TaskDataset& t : out) {
    for (Trial& trial : t.trials) trial = std::move(normalized[next++]);
  }
  return out;
}

// ---- sampling ----------------------------------------------------------------

std::size_t support_share(std::size_t n, double support_ratio) {
  const auto s = static_cast<std::size_t>(std::ceil(static_cast<double>(n) * support_ratio - 1e-12));
  return std::clamp<std::size_t>(s, 1, n);
}

Episode sample_episode(const TaskDataset& task, std::size_t per_class, double support_ratio,
                       std::uint64_t seed) {
  if (per_class == 0) throw ValidationError("sample_episode: per-class count must be >= 1");
  if (!(support_ratio > 0.0 && support_ratio <= 1.0)) {
    throw ValidationError("sample_episode: support ratio must be in (0, 1]");
  }
  const std::size_t C = task.n_classes();
  std::vector<std::vector<const Trial*>> by_class(C);
  for (const Trial& t : task.trials) by_class.at(t.label).push_back(&t);
  for (std::size_t c = 0; c < C; ++c) {
    if (by_class[c].size() < per_class) {
      throw ValidationError("sample_episode: task '" + task.name + "' class '" + task.class_names[c] +
                            "' has " + std::to_string(by_class[c].size()) + " trials, need " +
                            std::to_string(per_class));
    }
  }
  std::mt19937_64 rng(seed);
  Episode ep;
  ep.task = task.name;
  ep.n_classes = C;
  const std::size_t n_support = support_share(per_class, support_ratio);
  for (std::size_t c = 0; c < C; ++c) {
    std::shuffle(by_class[c].begin(), by_class[c].end(), rng);
    for (std::size_t i = 0; i < per_class; ++i) {
      (i < n_support ? ep.support : ep.query).push_back(by_class[c][i]);
    }
  }
  return ep;
}

seqnet::PaddedBatch pad_batch(std::span<const Array> sequences) {
  if (sequences.empty()) throw ValidationError("pad_batch: empty batch");
  const std::size_t D = sequences.front().shape.at(1);
  std::size_t T = 0;
  for (const Array& s : sequences) {
    if (s.rank() != 2 || s.shape[1] != D) {
      throw ValidationError("pad_batch: mixed feature widths (" + shape_string(s.shape) + " vs width " +
                            std::to_string(D) + ")");
    }
    T = std::max(T, s.shape[0]);
  }
  seqnet::PaddedBatch batch{Array(Shape{sequences.size(), T, D}, 0.0), {}};
  for (std::size_t b = 0; b < sequences.size(); ++b) {
    const Array& s = sequences[b];
    std::copy(s.data.begin(), s.data.end(), batch.data.data.begin() + static_cast<long>(b * T * D));
    ad::Mask mask(T, false);
    std::fill_n(mask.begin(), s.shape[0], true);
    batch.masks.push_back(std::move(mask));
  }
  return batch;
}

seqnet::PaddedBatch pad_batch(std::span<const Trial* const> trials) {
  std::vector<Array> seqs;
  seqs.reserve(trials.size());
  for (const Trial* t : trials) seqs.push_back(t->sequence);
  return pad_batch(seqs);
}

// ---- synthetic tasks ---------------------------------------------------------

namespace {

// Random orthogonal matrix via Gram-Schmidt on a Gaussian matrix.
std::vector<double> random_rotation(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> q(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    while (true) {
      for (std::size_t j = 0; j < n; ++j) q[i * n + j] = normal(rng);
      for (std::size_t k = 0; k < i; ++k) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += q[i * n + j] * q[k * n + j];
        for (std::size_t j = 0; j < n; ++j) q[i * n + j] -= dot * q[k * n + j];
      }
      double norm = 0.0;
      for (std::size_t j = 0; j < n; ++j) norm += q[i * n + j] * q[i * n + j];
      norm = std::sqrt(norm);
      if (norm < 1e-6) continue;
      for (std::size_t j = 0; j < n; ++j) q[i * n + j] /= norm;
      break;
    }
  }
  return q;
}

// Class offsets with pairwise distance equal to `separation` when C <= D
// (scaled basis vectors); otherwise random directions rescaled so the closest
// pair sits at `separation`.
std::vector<std::vector<double>> class_offsets(std::size_t C, std::size_t D, double separation,
                                               std::mt19937_64& rng) {
  std::vector<std::vector<double>> out(C, std::vector<double>(D, 0.0));
  if (C <= D) {
    for (std::size_t c = 0; c < C; ++c) out[c][c] = separation / std::sqrt(2.0);
    return out;
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : out) {
    for (double& x : v) x = normal(rng);
  }
  double closest = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < C; ++a) {
    for (std::size_t b = a + 1; b < C; ++b) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < D; ++j) d2 += (out[a][j] - out[b][j]) * (out[a][j] - out[b][j]);
      closest = std::min(closest, std::sqrt(d2));
    }
  }
  const double factor = closest > 0.0 ? separation / closest : 0.0;
  for (auto& v : out) {
    for (double& x : v) x *= factor;
  }
  return out;
}

}  // namespace

Metaset synth_metaset(const SynthConfig& cfg) {
  if (cfg.separation < 0.0) throw ValidationError("synth_metaset: separation must be >= 0");
  if (cfg.n_tasks == 0) throw ValidationError("synth_metaset: need at least one task");
  if (cfg.n_classes < 2) throw ValidationError("synth_metaset: need at least 2 classes");
  if (cfg.width == 0) throw ValidationError("synth_metaset: width must be positive");
  if (cfg.min_length == 0 || cfg.min_length > cfg.max_length) {
    throw ValidationError("synth_metaset: invalid length range");
  }
  if (cfg.min_trials == 0 || cfg.min_trials > cfg.max_trials) {
    throw ValidationError("synth_metaset: invalid trial-count range");
  }
  constexpr double kPi = 3.14159265358979323846;
  const std::size_t D = cfg.width;
  Metaset ms;
  for (std::size_t task_idx = 0; task_idx < cfg.n_tasks; ++task_idx) {
    std::mt19937_64 rng(derive_seed(cfg.seed, {task_idx}));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    const std::vector<double> rotation = random_rotation(D, rng);
    const auto offsets = class_offsets(cfg.n_classes, D, cfg.separation, rng);
    // Shared smooth temporal profile: one sinusoid per channel.
    std::vector<double> amp(D), period(D), phase(D), shift(D);
    for (std::size_t d = 0; d < D; ++d) {
      amp[d] = 0.5 + 0.5 * unit(rng);
      period[d] = 10.0 + 30.0 * unit(rng);
      phase[d] = 2.0 * kPi * unit(rng);
      shift[d] = normal(rng);
    }

    TaskDataset task;
    task.name = "task" + std::to_string(task_idx);
    for (std::size_t c = 0; c < cfg.n_classes; ++c) task.class_names.push_back("class" + std::to_string(c));
    std::uniform_int_distribution<std::size_t> n_trials(cfg.min_trials, cfg.max_trials);
    std::uniform_int_distribution<std::size_t> length(cfg.min_length, cfg.max_length);
    std::vector<double> mean(D);
    for (std::size_t c = 0; c < cfg.n_classes; ++c) {
      const std::size_t count = n_trials(rng);
      for (std::size_t i = 0; i < count; ++i) {
        const std::size_t T = length(rng);
        const double start = unit(rng) * 40.0;
        Array seq(Shape{T, D}, 0.0);
        for (std::size_t t = 0; t < T; ++t) {
          const double time = start + static_cast<double>(t);
          for (std::size_t d = 0; d < D; ++d) {
            mean[d] = offsets[c][d] + amp[d] * std::sin(2.0 * kPi * time / period[d] + phase[d]);
          }
          for (std::size_t r = 0; r < D; ++r) {
            double acc = shift[r];
            for (std::size_t d = 0; d < D; ++d) acc += rotation[r * D + d] * mean[d];
            seq.at(t, r) = acc + cfg.noise * normal(rng);
          }
        }
        Trial trial;
        trial.id = task.name + "_c" + std::to_string(c) + "_" + std::to_string(i);
        trial.sequence = std::move(seq);
        trial.label = c;
        trial.fps = 1.0;
        task.trials.push_back(std::move(trial));
      }
    }
    ms.tasks.push_back(std::move(task));
  }
  return ms;
}

}  // namespace mskl::episodes
