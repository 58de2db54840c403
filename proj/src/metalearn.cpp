#include "mskl/metalearn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "json.hpp"
#include "mskl/error.hpp"
#include "mskl/seed.hpp"

namespace mskl::metalearn {

using episodes::Episode;
using episodes::TaskDataset;
using episodes::Trial;
using seqnet::VarMap;
namespace names = seqnet::names;

std::string to_string(LearnerKind kind) {
  switch (kind) {
    case LearnerKind::ProtoNet:
      return "protonet";
    case LearnerKind::FoMaml:
      return "fomaml";
    case LearnerKind::ProtoMaml:
      return "protomaml";
  }
  return "unknown";
}

LearnerKind parse_learner(const std::string& name) {
  if (name == "protonet") return LearnerKind::ProtoNet;
  if (name == "fomaml") return LearnerKind::FoMaml;
  if (name == "protomaml") return LearnerKind::ProtoMaml;
  throw ValidationError("unknown learner '" + name + "' (expected protonet, fomaml or protomaml)");
}

Learner make_learner(LearnerKind kind, const seqnet::BackboneConfig& backbone, std::size_t n_classes,
                     std::uint64_t seed) {
  seqnet::Backbone b = seqnet::build_backbone(backbone, seed);
  Learner learner{kind, b.config, n_classes, std::move(b.params)};
  if (kind == LearnerKind::FoMaml) {
    if (n_classes < 2) throw ValidationError("fo-MAML needs a head of at least 2 classes");
    std::mt19937_64 rng(derive_seed(seed, {0x4ead}));
    const double limit = std::sqrt(6.0 / static_cast<double>(backbone.d_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Array w(Shape{n_classes, backbone.d_out}, 0.0);
    for (double& v : w.data) v = dist(rng);
    learner.params.add({names::kHeadW, std::move(w)});
    learner.params.add({names::kHeadB, Array(Shape{n_classes}, 0.0)});
  }
  return learner;
}

// ---- prototypes and heads -----------------------------------------------------

PrototypeSet compute_prototypes(const Array& embeddings, std::span<const std::size_t> labels,
                                std::size_t n_classes) {
  ad::Graph g;
  return PrototypeSet{ad::class_means(g.constant(embeddings), labels, n_classes).value()};
}

namespace {

struct HeadVars {
  ad::Var weights;
  ad::Var bias;
};

// W = 2 v and b = -||v||^2 as graph ops, so that the head can carry gradient
// back to the prototypes.
HeadVars head_from_prototypes(ad::Graph& g, ad::Var prototypes) {
  const std::size_t C = prototypes.shape().at(0), D = prototypes.shape().at(1);
  ad::Var w = ad::scale(prototypes, 2.0);
  ad::Var b = ad::reshape(ad::neg_sq_dist(g.constant(Array(Shape{1, D}, 0.0)), prototypes), Shape{C});
  return {w, b};
}

}  // namespace

Head init_head(const PrototypeSet& prototypes) {
  ad::Graph g;
  const HeadVars h = head_from_prototypes(g, g.constant(prototypes.centers));
  return Head{h.weights.value(), h.bias.value()};
}

Array protonet_posterior(const Array& embeddings, const PrototypeSet& prototypes) {
  ad::Graph g;
  return ad::softmax(ad::neg_sq_dist(g.constant(embeddings), g.constant(prototypes.centers))).value();
}

// ---- optimizers ----------------------------------------------------------------

void sgd_step(ad::ParamSet& params, const ad::GradMap& grads, double lr) {
  for (const auto& [name, g] : grads) {
    Array& value = params.at(name).value;
    if (value.shape != g.shape) {
      throw ValidationError("sgd_step: gradient shape mismatch for '" + name + "'");
    }
    for (std::size_t i = 0; i < value.size(); ++i) value[i] = value[i] - lr * g[i];
  }
}

void adam_step(ad::ParamSet& params, const ad::GradMap& grads, AdamState& state, double lr,
               const AdamConfig& config) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (const auto& [name, g] : grads) {
    Array& value = params.at(name).value;
    if (value.shape != g.shape) {
      throw ValidationError("adam_step: gradient shape mismatch for '" + name + "'");
    }
    Array& m = state.m.try_emplace(name, value.shape, 0.0).first->second;
    Array& v = state.v.try_emplace(name, value.shape, 0.0).first->second;
    if (m.shape != value.shape || v.shape != value.shape) {
      throw ValidationError("adam_step: moment shape mismatch for '" + name + "'");
    }
    for (std::size_t i = 0; i < value.size(); ++i) {
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      value[i] -= lr * m_hat / (std::sqrt(v_hat) + config.eps);
    }
  }
}

double inner_step_size(const ad::GradMap& grads, const InnerLoopConfig& config) {
  if (!(config.max_grad_norm > 0.0)) return config.lr;
  double norm2 = 0.0;
  for (const auto& [name, g] : grads) {
    for (double v : g.data) norm2 += v * v;
  }
  const double norm = std::sqrt(norm2);
  return norm > config.max_grad_norm ? config.lr * (config.max_grad_norm / norm) : config.lr;
}

// ---- losses -------------------------------------------------------------------

namespace {

const ad::Var& var(const VarMap& vars, const std::string& name) {
  auto it = vars.find(name);
  if (it == vars.end()) throw ValidationError("missing parameter '" + name + "'");
  return it->second;
}

// Head-based loss used by fo-MAML and ProtoMAML on both support and query.
ad::Var head_loss(ad::Graph& g, const VarMap& vars, const seqnet::BackboneConfig& cfg,
                  const seqnet::PaddedBatch& batch, std::span<const std::size_t> labels) {
  ad::Var emb = seqnet::forward_embed(g, batch, vars, cfg);
  ad::Var logits = seqnet::head_logits(emb, var(vars, names::kHeadW), var(vars, names::kHeadB));
  return ad::softmax_cross_entropy(logits, labels);
}

// ProtoNet loss: query posteriors from -d^2 to support prototypes.
ad::Var protonet_loss(ad::Graph& g, const VarMap& vars, const seqnet::BackboneConfig& cfg,
                      const seqnet::PaddedBatch& support, std::span<const std::size_t> support_labels,
                      const seqnet::PaddedBatch& query, std::span<const std::size_t> query_labels,
                      std::size_t n_classes) {
  ad::Var protos = ad::class_means(seqnet::forward_embed(g, support, vars, cfg), support_labels, n_classes);
  ad::Var logits = ad::neg_sq_dist(seqnet::forward_embed(g, query, vars, cfg), protos);
  return ad::softmax_cross_entropy(logits, query_labels);
}

double loss_at(const ad::ParamSet& params, const seqnet::BackboneConfig& cfg, const seqnet::PaddedBatch& batch,
               std::span<const std::size_t> labels) {
  ad::Graph g;
  const VarMap vars = g.bind(params);
  return head_loss(g, vars, cfg, batch, labels).value()[0];
}

// Step size of one inner update taken from `params` whose support loss is
// loss0. Identical inputs give identical decisions, so the retained-graph
// path reproduces the detached path exactly.
double guarded_step(const ad::ParamSet& params, const ad::GradMap& grads, double loss0,
                    const InnerLoopConfig& config, const seqnet::BackboneConfig& cfg,
                    const seqnet::PaddedBatch& batch, std::span<const std::size_t> labels) {
  double step = inner_step_size(grads, config);
  if (config.max_backtracks == 0) return step;
  for (std::size_t b = 0; b <= config.max_backtracks; ++b, step *= 0.5) {
    ad::ParamSet trial = params;
    sgd_step(trial, grads, step);
    if (loss_at(trial, cfg, batch, labels) <= loss0) return step;
  }
  return 0.0;
}

std::vector<std::size_t> labels_of(TrialRefs trials) {
  std::vector<std::size_t> out;
  out.reserve(trials.size());
  for (const Trial* t : trials) out.push_back(t->label);
  return out;
}

void check_episode_classes(const Learner& learner, std::size_t n_classes) {
  if (n_classes < 2) throw ValidationError("episode needs at least 2 classes");
  if (learner.kind == LearnerKind::FoMaml && n_classes != learner.n_classes) {
    throw ValidationError("fo-MAML head has " + std::to_string(learner.n_classes) +
                          " outputs but the task has " + std::to_string(n_classes) + " classes");
  }
}

// Head parameters are episode-local and always trainable.
bool is_trainable(const Learner& learner, const std::string& name) {
  return !learner.params.contains(name) || learner.params.at(name).trainable;
}

void attach_head(ad::ParamSet& params, const Head& head) {
  params.erase(names::kHeadW);
  params.erase(names::kHeadB);
  params.add({names::kHeadW, head.weights});
  params.add({names::kHeadB, head.bias});
}

}  // namespace

// ---- adaptation ---------------------------------------------------------------

Adapted inner_adapt(const Learner& learner, TrialRefs support, std::size_t n_classes,
                    const InnerLoopConfig& config) {
  if (support.empty()) throw ValidationError("inner_adapt: empty support set");
  check_episode_classes(learner, n_classes);
  Adapted out{learner.kind, learner.backbone, n_classes, learner.params, std::nullopt};
  const seqnet::PaddedBatch batch = episodes::pad_batch(support);
  const std::vector<std::size_t> labels = labels_of(support);

  if (learner.kind == LearnerKind::ProtoNet) {
    out.prototypes = compute_prototypes(seqnet::embed(out.params, out.backbone, batch), labels, n_classes);
    return out;
  }
  if (learner.kind == LearnerKind::ProtoMaml) {
    const PrototypeSet protos =
        compute_prototypes(seqnet::embed(out.params, out.backbone, batch), labels, n_classes);
    attach_head(out.params, init_head(protos));
  }
  for (std::size_t step = 0; step < config.n_updates; ++step) {
    ad::Graph g;
    VarMap vars = g.bind(out.params);
    const ad::Var loss = head_loss(g, vars, out.backbone, batch, labels);
    g.backward(loss);
    const ad::GradMap grads = g.param_grads();
    const double step_size =
        guarded_step(out.params, grads, loss.value()[0], config, out.backbone, batch, labels);
    sgd_step(out.params, grads, step_size);
  }
  return out;
}

Array predict(const Adapted& adapted, TrialRefs trials) {
  if (trials.empty()) return Array(Shape{0, adapted.n_classes}, 0.0);
  const seqnet::PaddedBatch batch = episodes::pad_batch(trials);
  const Array emb = seqnet::embed(adapted.params, adapted.backbone, batch);
  if (adapted.kind == LearnerKind::ProtoNet) return protonet_posterior(emb, *adapted.prototypes);
  const Array logits = seqnet::head_logits(emb, adapted.params.at(names::kHeadW).value,
                                           adapted.params.at(names::kHeadB).value);
  return ad::softmax_rows(logits);
}

namespace {

// ProtoMAML meta-gradient: the query gradient at the adapted parameters plus
// the adapted head's gradient carried back through W = 2v, b = -||v||^2 to the
// backbone that embedded the support set. Nodes are created in the same order
// as in gradient_retained so both paths accumulate identically.
ad::GradMap protomaml_meta_gradient(const Learner& learner, const seqnet::PaddedBatch& support,
                                    std::span<const std::size_t> support_labels, std::size_t n_classes,
                                    const ad::GradMap& at_adapted) {
  ad::Graph g;
  const VarMap leaves = g.bind(learner.params);
  const HeadVars head = head_from_prototypes(
      g, ad::class_means(seqnet::forward_embed(g, support, leaves, learner.backbone), support_labels, n_classes));
  const auto contract = [&g](ad::Var x, const Array& weights) { return ad::sum(ad::mul(x, g.constant(weights))); };
  ad::Var total = ad::add(contract(head.weights, at_adapted.at(names::kHeadW)),
                          contract(head.bias, at_adapted.at(names::kHeadB)));
  for (const auto& [name, leaf] : leaves) {
    if (learner.params.at(name).trainable) total = ad::add(total, contract(leaf, at_adapted.at(name)));
  }
  g.backward(total);
  ad::GradMap out;
  for (const auto& [name, leaf] : leaves) {
    if (learner.params.at(name).trainable) out.emplace(name, g.grad(leaf));
  }
  return out;
}

EpisodeGradient gradient_detached(const Learner& learner, const Episode& ep,
                                  const InnerLoopConfig& inner) {
  const seqnet::PaddedBatch query = episodes::pad_batch(ep.query);
  const std::vector<std::size_t> query_labels = ep.query_labels();
  EpisodeGradient out;
  ad::Graph g;
  if (learner.kind == LearnerKind::ProtoNet) {
    const seqnet::PaddedBatch support = episodes::pad_batch(ep.support);
    VarMap vars = g.bind(learner.params);
    ad::Var loss = protonet_loss(g, vars, learner.backbone, support, ep.support_labels(), query,
                                 query_labels, ep.n_classes);
    g.backward(loss);
    out.query_loss = loss.value()[0];
  } else {
    const Adapted adapted = inner_adapt(learner, ep.support, ep.n_classes, inner);
    VarMap vars = g.bind(adapted.params);
    ad::Var loss = head_loss(g, vars, learner.backbone, query, query_labels);
    g.backward(loss);
    out.query_loss = loss.value()[0];
    if (learner.kind == LearnerKind::ProtoMaml) {
      out.grads = protomaml_meta_gradient(learner, episodes::pad_batch(ep.support), ep.support_labels(),
                                          ep.n_classes, g.param_grads());
      return out;
    }
  }
  for (auto& [name, grad] : g.param_grads()) {
    if (learner.params.contains(name)) out.grads.emplace(name, std::move(grad));
  }
  return out;
}

EpisodeGradient gradient_retained(const Learner& learner, const Episode& ep,
                                  const InnerLoopConfig& inner) {
  const seqnet::PaddedBatch support = episodes::pad_batch(ep.support);
  const seqnet::PaddedBatch query = episodes::pad_batch(ep.query);
  const std::vector<std::size_t> support_labels = ep.support_labels();
  const std::vector<std::size_t> query_labels = ep.query_labels();
  ad::Graph g;
  const VarMap leaves = g.bind(learner.params);
  EpisodeGradient out;
  if (learner.kind == LearnerKind::ProtoNet) {
    ad::Var loss = protonet_loss(g, leaves, learner.backbone, support, support_labels, query,
                                 query_labels, ep.n_classes);
    g.backward(loss);
    out.query_loss = loss.value()[0];
  } else {
    check_episode_classes(learner, ep.n_classes);
    VarMap current;
    std::optional<HeadVars> head;
    if (learner.kind == LearnerKind::ProtoMaml) {
      head = head_from_prototypes(g, ad::class_means(seqnet::forward_embed(g, support, leaves, learner.backbone),
                                                     support_labels, ep.n_classes));
    }
    // Working copies of the leaves: inner-step gradients are read here, so
    // they exclude the route through the prototypes into the leaves.
    for (const auto& [name, leaf] : leaves) {
      current.emplace(name, learner.params.at(name).trainable ? ad::add(leaf, g.constant(Array(leaf.shape(), 0.0)))
                                                              : leaf);
    }
    if (head) {
      current[names::kHeadW] = head->weights;
      current[names::kHeadB] = head->bias;
    }
    for (std::size_t step = 0; step < inner.n_updates; ++step) {
      const ad::Var loss = head_loss(g, current, learner.backbone, support, support_labels);
      g.backward(loss);
      ad::GradMap grads;
      ad::ParamSet snapshot;
      for (const auto& [name, v] : current) {
        const bool trainable = is_trainable(learner, name);
        if (trainable) grads.emplace(name, g.grad(v));
        snapshot.add({name, v.value(), trainable});
      }
      const double step_size = guarded_step(snapshot, grads, loss.value()[0], inner, learner.backbone, support,
                                            support_labels);
      for (auto& [name, delta] : grads) {
        for (double& x : delta.data) x = step_size * x;
        current[name] = ad::sub(current[name], g.constant(std::move(delta)));
      }
    }
    ad::Var loss = head_loss(g, current, learner.backbone, query, query_labels);
    g.backward(loss);
    out.query_loss = loss.value()[0];
  }
  for (const auto& [name, leaf] : leaves) {
    if (learner.params.at(name).trainable) out.grads.emplace(name, g.grad(leaf));
  }
  return out;
}

}  // namespace

EpisodeGradient episode_gradient(const Learner& learner, const Episode& episode,
                                 const InnerLoopConfig& inner, bool retain_inner_graph) {
  if (episode.support.empty() || episode.query.empty()) {
    throw ValidationError("episode_gradient: episode needs non-empty support and query sets");
  }
  return retain_inner_graph ? gradient_retained(learner, episode, inner)
                            : gradient_detached(learner, episode, inner);
}

double outer_step(Learner& learner, AdamState& adam, std::span<const Episode> batch,
                  const MetaConfig& config, double lr, bool retain_inner_graph) {
  if (batch.empty()) throw ValidationError("outer_step: empty episode batch");
  ad::GradMap total;
  double loss = 0.0;
  for (const Episode& ep : batch) {
    EpisodeGradient eg = episode_gradient(learner, ep, config.inner_train, retain_inner_graph);
    loss += eg.query_loss;
    for (auto& [name, g] : eg.grads) {
      auto [it, inserted] = total.try_emplace(name, std::move(g));
      if (!inserted) {
        for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
      }
    }
  }
  adam_step(learner.params, total, adam, lr, config.outer.adam);
  return loss / static_cast<double>(batch.size());
}

// ---- evaluation ---------------------------------------------------------------

EvalResult adapt_and_evaluate(const Learner& learner, const TaskDataset& target, std::size_t k,
                              std::uint64_t seed, const InnerLoopConfig& inner) {
  if (k == 0) throw ValidationError("adapt_and_evaluate: k must be >= 1");
  const std::size_t C = target.n_classes();
  std::vector<std::vector<std::size_t>> by_class(C);
  for (std::size_t i = 0; i < target.trials.size(); ++i) by_class.at(target.trials[i].label).push_back(i);
  for (std::size_t c = 0; c < C; ++c) {
    if (by_class[c].size() <= k) {
      throw ValidationError("adapt_and_evaluate: task '" + target.name + "' class '" +
                            target.class_names[c] + "' has " + std::to_string(by_class[c].size()) +
                            " trials; k=" + std::to_string(k) + " needs at least " +
                            std::to_string(k + 1));
    }
  }
  std::mt19937_64 rng(seed);
  std::vector<bool> in_support(target.trials.size(), false);
  std::vector<const Trial*> support;
  for (std::size_t c = 0; c < C; ++c) {
    std::shuffle(by_class[c].begin(), by_class[c].end(), rng);
    for (std::size_t i = 0; i < k; ++i) {
      in_support[by_class[c][i]] = true;
      support.push_back(&target.trials[by_class[c][i]]);
    }
  }
  std::vector<const Trial*> query;
  for (std::size_t i = 0; i < target.trials.size(); ++i) {
    if (!in_support[i]) query.push_back(&target.trials[i]);
  }

  const Adapted adapted = inner_adapt(learner, support, C, inner);
  const Array probs = predict(adapted, query);

  EvalResult out;
  out.k = k;
  for (const Trial* t : support) out.support_ids.push_back(t->id);
  for (std::size_t q = 0; q < query.size(); ++q) {
    std::vector<double> row(probs.data.begin() + static_cast<long>(q * C),
                            probs.data.begin() + static_cast<long>((q + 1) * C));
    out.records.push_back(metrics::make_record(std::move(row), query[q]->label));
    out.query_ids.push_back(query[q]->id);
  }
  out.accuracy = metrics::micro_accuracy(out.records);
  out.auc = metrics::binary_auc(out.records);
  return out;
}

// ---- meta-training ------------------------------------------------------------

std::size_t outer_steps_per_epoch(std::span<const TaskDataset> sources, std::size_t episodes_per_batch) {
  if (sources.empty() || episodes_per_batch == 0) return 1;
  std::size_t total = 0, episode_sizes = 0;
  for (const TaskDataset& t : sources) {
    total += t.trials.size();
    episode_sizes += t.smallest_class() * t.n_classes();
  }
  const double mean_episode = static_cast<double>(episode_sizes) / static_cast<double>(sources.size());
  const double steps = std::ceil(static_cast<double>(total) /
                                 (mean_episode * static_cast<double>(episodes_per_batch)));
  return std::max<std::size_t>(1, static_cast<std::size_t>(steps));
}

TrainResult meta_train(const Learner& init, std::span<const TaskDataset> sources,
                       const TaskDataset& validation, const MetaConfig& config, std::uint64_t seed,
                       DataAccessLog* log) {
  if (sources.empty()) throw ValidationError("meta_train: need at least one source task");
  for (const TaskDataset& t : sources) {
    if (t.smallest_class() < 2) {
      throw ValidationError("meta_train: source task '" + t.name +
                            "' needs at least 2 trials per class to form support and query sets");
    }
  }
  const OuterLoopConfig& outer = config.outer;
  if (!(outer.lr > 0.0) || !(config.inner_train.lr >= 0.0)) {
    throw ValidationError("meta_train: learning rates must be positive");
  }
  std::size_t epoch_limit = outer.max_epochs;
  if (!outer.early_stopping) {
    epoch_limit = epoch_limit ? std::min(epoch_limit, outer.min_epochs) : outer.min_epochs;
  }
  const std::size_t steps = outer_steps_per_epoch(sources, outer.episodes_per_batch);
  std::vector<std::uint64_t> validation_seeds;
  for (std::size_t j = 0; j < outer.validation_draws; ++j) {
    validation_seeds.push_back(derive_seed(seed, {0x7a11d, j}));
  }

  std::mt19937_64 rng(derive_seed(seed, {0x7e4a1}));
  std::uniform_int_distribution<std::size_t> pick_task(0, sources.size() - 1);

  TrainResult result;
  Learner current = init;
  result.best = init;
  result.best_validation = -std::numeric_limits<double>::infinity();
  AdamState adam;
  double lr = outer.lr;
  std::size_t since_improvement = 0, since_lr_change = 0;

  for (std::size_t epoch = 1; epoch_limit == 0 || epoch <= epoch_limit; ++epoch) {
    double loss = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
      std::vector<Episode> batch;
      batch.reserve(outer.episodes_per_batch);
      for (std::size_t e = 0; e < outer.episodes_per_batch; ++e) {
        const TaskDataset& task = sources[pick_task(rng)];
        if (log) log->training_tasks.insert(task.name);
        batch.push_back(episodes::sample_episode(task, task.smallest_class(), outer.support_ratio, rng()));
      }
      loss += outer_step(current, adam, batch, config, lr);
    }
    double val = 0.0;
    for (std::uint64_t vs : validation_seeds) {
      val += adapt_and_evaluate(current, validation, outer.validation_k, vs, config.inner_train).accuracy;
    }
    val /= static_cast<double>(std::max<std::size_t>(1, validation_seeds.size()));

    EpochRecord rec{epoch, lr, loss / static_cast<double>(steps), val, val > result.best_validation};
    result.history.push_back(rec);
    if (rec.improved) {
      result.best = current;
      result.best_validation = val;
      result.best_epoch = epoch;
      since_improvement = 0;
      since_lr_change = 0;
    } else {
      ++since_improvement;
      if (++since_lr_change >= outer.lr_patience) {
        lr *= outer.lr_factor;
        since_lr_change = 0;
      }
    }
    if (outer.early_stopping && epoch >= outer.min_epochs && since_improvement >= outer.patience) {
      result.early_stopped = true;
      break;
    }
  }
  return result;
}

// ---- checkpoints --------------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void put_le(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& in, const std::filesystem::path& file) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
    throw ValidationError(file.string() + ": truncated checkpoint");
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

constexpr char kMagic[5] = {'M', 'S', 'K', 'L', '1'};

}  // namespace

void save_checkpoint(const std::filesystem::path& file, const Learner& learner,
                     const std::string& metadata_json) {
  using nlohmann::json;
  json header;
  header["learner"] = to_string(learner.kind);
  header["n_classes"] = learner.n_classes;
  const auto& b = learner.backbone;
  header["backbone"] = {{"d_in", b.d_in},         {"k_mid", b.k_mid},         {"d_out", b.d_out},
                        {"filter1", b.filter1},   {"filter2", b.filter2},     {"dilation1", b.dilation1},
                        {"dilation2", b.dilation2}, {"se_reduction", b.se_reduction}};
  try {
    header["metadata"] = json::parse(metadata_json);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  const std::string text = header.dump();

  std::ofstream out(file, std::ios::binary);
  if (!out) throw RuntimeFailure(file.string() + ": cannot write checkpoint");
  out.write(kMagic, sizeof kMagic);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(learner.params.size()));
  for (const auto& [name, p] : learner.params) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_le<std::uint8_t>(out, p.trainable ? 1 : 0);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t d : p.value.shape) put_le<std::uint64_t>(out, d);
    for (double v : p.value.data) put_le<double>(out, v);
  }
  if (!out) throw RuntimeFailure(file.string() + ": write failed");
}

Learner load_checkpoint(const std::filesystem::path& file, std::string* metadata_json) {
  using nlohmann::json;
  std::ifstream in(file, std::ios::binary);
  if (!in) throw ValidationError(file.string() + ": cannot open checkpoint");
  char magic[sizeof kMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw ValidationError(file.string() + ": not an MSKL1 checkpoint");
  }
  const auto header_len = get_le<std::uint32_t>(in, file);
  std::string text(header_len, '\0');
  if (!in.read(text.data(), header_len)) throw ValidationError(file.string() + ": truncated header");
  Learner learner;
  try {
    const json header = json::parse(text);
    learner.kind = parse_learner(header.at("learner").get<std::string>());
    learner.n_classes = header.at("n_classes").get<std::size_t>();
    const json& b = header.at("backbone");
    auto& cfg = learner.backbone;
    cfg.d_in = b.at("d_in");
    cfg.k_mid = b.at("k_mid");
    cfg.d_out = b.at("d_out");
    cfg.filter1 = b.at("filter1");
    cfg.filter2 = b.at("filter2");
    cfg.dilation1 = b.at("dilation1");
    cfg.dilation2 = b.at("dilation2");
    cfg.se_reduction = b.at("se_reduction");
    cfg.validate();
    if (metadata_json) *metadata_json = header.value("metadata", json::object()).dump();
  } catch (const json::exception& e) {
    throw ValidationError(file.string() + ": malformed checkpoint header: " + e.what());
  }
  const auto count = get_le<std::uint32_t>(in, file);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = get_le<std::uint32_t>(in, file);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw ValidationError(file.string() + ": truncated name");
    const bool trainable = get_le<std::uint8_t>(in, file) != 0;
    const auto rank = get_le<std::uint32_t>(in, file);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(get_le<std::uint64_t>(in, file));
    std::vector<double> values(shape_size(shape));
    for (double& v : values) v = get_le<double>(in, file);
    learner.params.add({name, Array(std::move(shape), std::move(values)), trainable});
  }
  return learner;
}

}  // namespace mskl::metalearn
