#pragma once

// ProtoNet, first-order MAML and ProtoMAML learners over the sequence
// backbone: prototype heads, inner-loop SGD adaptation, first-order outer
// updates with Adam, the meta-training loop and k-shot evaluation.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mskl/array.hpp"
#include "mskl/autodiff.hpp"
#include "mskl/episodes.hpp"
#include "mskl/metrics.hpp"
#include "mskl/seqnet.hpp"

namespace mskl::metalearn {

enum class LearnerKind { ProtoNet, FoMaml, ProtoMaml };

std::string to_string(LearnerKind kind);
LearnerKind parse_learner(const std::string& name);

struct InnerLoopConfig {
  double lr = 0.1;
  std::size_t n_updates = 1;
  // Rescales a step's gradient to this global L2 norm when it is larger;
  // 0 disables clipping.
  double max_grad_norm = 0.0;
  // When positive, a step that would raise the support loss is halved up to
  // this many times and skipped if it still does. Plain steps at lr 0.1 over
  // all parameters can diverge within a few of the 20 test-time updates.
  std::size_t max_backtracks = 8;
};

// Step multiplier lr * min(1, max_grad_norm / ||g||) for one inner update.
double inner_step_size(const ad::GradMap& grads, const InnerLoopConfig& config);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OuterLoopConfig {
  double lr = 0.01;
  AdamConfig adam;
  double lr_factor = 0.6;
  std::size_t lr_patience = 10;  // epochs without validation improvement
  std::size_t min_epochs = 40;
  std::size_t patience = 10;  // early stopping
  bool early_stopping = true;
  // Hard cap on epochs, 0 for none. Setting it below min_epochs shortens
  // training below the standard recipe (CI-scale runs).
  std::size_t max_epochs = 0;
  std::size_t episodes_per_batch = 8;
  double support_ratio = 0.5;
  std::size_t validation_draws = 5;
  std::size_t validation_k = 1;
};

struct MetaConfig {
  LearnerKind kind = LearnerKind::ProtoMaml;
  InnerLoopConfig inner_train{0.1, 1, 0.0, 8};
  InnerLoopConfig inner_test{0.1, 20, 0.0, 8};
  OuterLoopConfig outer;
};

// Meta-parameters of one learner. fo-MAML additionally owns a head of
// n_classes outputs; ProtoNet and ProtoMAML heads are built per episode.
struct Learner {
  LearnerKind kind = LearnerKind::ProtoMaml;
  seqnet::BackboneConfig backbone;
  std::size_t n_classes = 0;
  ad::ParamSet params;

  friend bool operator==(const Learner&, const Learner&) = default;
};

Learner make_learner(LearnerKind kind, const seqnet::BackboneConfig& backbone, std::size_t n_classes,
                     std::uint64_t seed);

// ---- prototypes and heads -----------------------------------------------------

struct PrototypeSet {
  Array centers;  // [C x D_o], row c is the mean embedding of class c

  std::size_t n_classes() const { return centers.shape.at(0); }
};

struct Head {
  Array weights;  // [C x D_o]
  Array bias;     // [C]
};

PrototypeSet compute_prototypes(const Array& embeddings, std::span<const std::size_t> labels,
                                std::size_t n_classes);
// W_c = 2 v_c, b_c = -||v_c||^2
Head init_head(const PrototypeSet& prototypes);
// softmax over classes of -||e - v_c||^2
Array protonet_posterior(const Array& embeddings, const PrototypeSet& prototypes);

// ---- optimizers ----------------------------------------------------------------

void sgd_step(ad::ParamSet& params, const ad::GradMap& grads, double lr);

struct AdamState {
  std::map<std::string, Array> m;
  std::map<std::string, Array> v;
  std::size_t step = 0;
};

void adam_step(ad::ParamSet& params, const ad::GradMap& grads, AdamState& state, double lr,
               const AdamConfig& config = {});

// ---- adaptation ---------------------------------------------------------------

using TrialRefs = std::span<const episodes::Trial* const>;

struct Adapted {
  LearnerKind kind = LearnerKind::ProtoMaml;
  seqnet::BackboneConfig backbone;
  std::size_t n_classes = 0;
  ad::ParamSet params;                     // adapted backbone (+ head)
  std::optional<PrototypeSet> prototypes;  // ProtoNet only
};

// Copies the meta-parameters and runs n_updates SGD steps on the support
// loss. ProtoMAML first attaches a head initialized from support prototypes;
// ProtoNet has no inner loop and only records prototypes.
Adapted inner_adapt(const Learner& learner, TrialRefs support, std::size_t n_classes,
                    const InnerLoopConfig& config);

// Class posteriors [B x C] for the given trials.
Array predict(const Adapted& adapted, TrialRefs trials);

struct EpisodeGradient {
  ad::GradMap grads;  // w.r.t. meta-parameter names only
  double query_loss = 0.0;
};

// First-order meta-gradient of one episode: the query-loss gradient taken at
// the adapted parameters. With retain_inner_graph the whole inner loop is
// recorded on one graph (each step's gradient enters as a constant) and the
// query loss is differentiated back to the meta-parameter leaves.
EpisodeGradient episode_gradient(const Learner& learner, const episodes::Episode& episode,
                                 const InnerLoopConfig& inner, bool retain_inner_graph = false);

// Sums episode gradients in batch order and applies one Adam step.
// Returns the mean query loss over the batch.
double outer_step(Learner& learner, AdamState& adam, std::span<const episodes::Episode> batch,
                  const MetaConfig& config, double lr, bool retain_inner_graph = false);

// ---- evaluation ---------------------------------------------------------------

struct EvalResult {
  std::size_t k = 0;
  std::vector<std::string> support_ids;
  std::vector<std::string> query_ids;
  std::vector<metrics::PredictionRecord> records;
  double accuracy = 0.0;
  std::optional<double> auc;  // binary tasks only
};

// Draws k support trials per class (seeded), adapts, and scores every other
// trial of the task.
EvalResult adapt_and_evaluate(const Learner& learner, const episodes::TaskDataset& target,
                              std::size_t k, std::uint64_t seed, const InnerLoopConfig& inner);

// ---- meta-training ------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double query_loss = 0.0;
  double validation_accuracy = 0.0;
  bool improved = false;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainResult {
  Learner best;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_validation = 0.0;
  bool early_stopped = false;
};

// Records which tasks supplied training episodes.
struct DataAccessLog {
  std::set<std::string> training_tasks;
};

// ceil(total source trials / (mean episode size * episodes per batch)), at
// least 1, so that one epoch sees roughly the whole training split once.
std::size_t outer_steps_per_epoch(std::span<const episodes::TaskDataset> sources,
                                  std::size_t episodes_per_batch);

TrainResult meta_train(const Learner& init, std::span<const episodes::TaskDataset> sources,
                       const episodes::TaskDataset& validation, const MetaConfig& config,
                       std::uint64_t seed, DataAccessLog* log = nullptr);

// ---- checkpoints --------------------------------------------------------------

// Binary layout, little-endian: "MSKL1", u32 header length, JSON header
// (learner kind, backbone config, head width, caller metadata), u32 parameter
// count, then per parameter: u32 name length, name, u8 trainable, u32 rank,
// u64 dims[rank], f64 values.
void save_checkpoint(const std::filesystem::path& file, const Learner& learner,
                     const std::string& metadata_json = "{}");
Learner load_checkpoint(const std::filesystem::path& file, std::string* metadata_json = nullptr);

}  // namespace mskl::metalearn
