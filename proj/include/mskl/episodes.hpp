#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mskl/array.hpp"
#include "mskl/seqnet.hpp"

namespace mskl::episodes {

struct Trial {
  std::string id;
  Array sequence;  // [T x D]
  std::size_t label = 0;
  double fps = 1.0;
};

enum class Role { Source, Validation, Test };

struct TaskDataset {
  std::string name;
  std::vector<std::string> class_names;
  std::vector<Trial> trials;
  Role role = Role::Source;

  std::size_t n_classes() const { return class_names.size(); }
  std::vector<std::size_t> class_counts() const;
  std::size_t smallest_class() const;
  std::size_t width() const;
  void validate() const;
};

struct Metaset {
  std::vector<TaskDataset> tasks;

  const TaskDataset& task(const std::string& name) const;
  void validate() const;
};

// One meta-learning unit drawn from a single task.
struct Episode {
  std::string task;
  std::size_t n_classes = 0;
  std::vector<const Trial*> support;
  std::vector<const Trial*> query;

  std::vector<std::size_t> support_labels() const;
  std::vector<std::size_t> query_labels() const;
};

// ---- ingestion ---------------------------------------------------------------

// Manifest: {"tasks": [{"name", "classes": [..], "fps", "trials": [{"id","label","file"}]}]}
// Feature files are headerless CSV, one frame per row. Paths are relative to
// the manifest's directory.
Metaset load_metaset(const std::filesystem::path& manifest);
Array read_feature_csv(const std::filesystem::path& file);
void write_feature_csv(const std::filesystem::path& file, const Array& sequence);
// Writes manifest.json plus features/<task>/<trial>.csv under dir.
void write_metaset(const Metaset& metaset, const std::filesystem::path& dir);

// ---- preprocessing -----------------------------------------------------------

// Keeps frames 0, s, 2s, ... with s = round(fps / target_fps).
Trial subsample_fps(const Trial& trial, double target_fps = 1.0);
// Channel pooling D -> width via non-overlapping window means.
Trial pool_to_ssf(const Trial& trial, std::size_t width);
// Per-dimension min-max over every frame of every trial in the split.
// Constant dimensions map to 0.
std::vector<Trial> minmax_normalize(std::span<const Trial> split);
// subsample -> pool -> (no normalization); normalization is per split and is
// applied by the caller once splits are known.
TaskDataset preprocess_task(const TaskDataset& task, std::size_t width, double target_fps = 1.0);
// Normalizes the union of the given tasks' trials as one split.
std::vector<TaskDataset> normalize_split(std::span<const TaskDataset> tasks);

// ---- sampling ----------------------------------------------------------------

// Number of support samples out of n per class: ceil(n * ratio), at least 1.
std::size_t support_share(std::size_t n, double support_ratio);

// Draws exactly n trials per class without replacement, then splits each
// class into support/query.
Episode sample_episode(const TaskDataset& task, std::size_t per_class, double support_ratio,
                       std::uint64_t seed);

seqnet::PaddedBatch pad_batch(std::span<const Array> sequences);
seqnet::PaddedBatch pad_batch(std::span<const Trial* const> trials);

// ---- synthetic tasks ---------------------------------------------------------

struct SynthConfig {
  std::size_t n_tasks = 4;
  std::size_t n_classes = 3;
  std::size_t width = 4;
  std::size_t min_length = 20;
  std::size_t max_length = 60;
  std::size_t min_trials = 8;  // per class
  std::size_t max_trials = 12;
  double separation = 2.0;
  double noise = 1.0;
  std::uint64_t seed = 0;
};

// Each task: class-conditional mean sequences (a shared smooth temporal
// profile plus a class offset; offsets are pairwise `separation` apart),
// Gaussian frame noise, and a task-specific random rotation of feature space.
Metaset synth_metaset(const SynthConfig& config);

}  // namespace mskl::episodes
