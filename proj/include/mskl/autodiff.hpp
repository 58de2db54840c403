#pragma once

// Reverse-mode differentiation over dense double arrays. A Graph records
// every op as it runs (define-by-run); backward() sweeps the recorded nodes
// in reverse creation order, which is a valid topological order because
// inputs always precede the node that consumes them.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mskl/array.hpp"

namespace mskl::ad {

using Mask = std::vector<bool>;

struct Parameter {
  std::string name;
  Array value;
  bool trainable = true;
};

// Named parameter collection. Ordered by name so that iteration order (and
// anything serialized from it) is deterministic.
class ParamSet {
 public:
  using Storage = std::map<std::string, Parameter>;

  void add(Parameter p);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  const Parameter& at(const std::string& name) const;
  Parameter& at(const std::string& name);
  void erase(const std::string& name) { params_.erase(name); }
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;

  Storage::const_iterator begin() const { return params_.begin(); }
  Storage::const_iterator end() const { return params_.end(); }
  Storage::iterator begin() { return params_.begin(); }
  Storage::iterator end() { return params_.end(); }

  friend bool operator==(const ParamSet& a, const ParamSet& b);

 private:
  Storage params_;
};

bool operator==(const Parameter& a, const Parameter& b);

using GradMap = std::map<std::string, Array>;

class Graph;

struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Array& value() const;
  const Shape& shape() const { return value().shape; }
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Array value);
  // Leaf bound to a named parameter. Requesting the same name twice returns
  // the same node.
  Var param(const Parameter& p);
  std::map<std::string, Var> bind(const ParamSet& params);

  // Zeroes all gradients, then accumulates d(loss)/d(node) for every node
  // the loss depends on. Rejects non-scalar losses.
  void backward(Var loss);

  const Array& value(std::size_t id) const { return nodes_[id].value; }
  // Gradient of the last backward() loss w.r.t. this node. Nodes that the
  // loss does not depend on report zeros.
  Array grad(Var v) const;
  // Gradients of trainable parameter leaves, keyed by parameter name.
  GradMap param_grads() const;

  std::size_t size() const { return nodes_.size(); }
  const std::string& op_tag(std::size_t id) const { return nodes_[id].op; }

  // Used by op implementations.
  Var record(std::string op, std::vector<std::size_t> inputs, Array value, BackwardFn fn);
  Array* grad_sink(std::size_t id);
  const Array& grad_of(std::size_t id) const { return nodes_[id].grad; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }

 private:
  struct Node {
    std::string op;
    std::vector<std::size_t> inputs;
    Array value;
    Array grad;
    BackwardFn backward;
    std::string param_name;
    bool is_param = false;
    bool trainable = false;
    bool requires_grad = false;
    bool active = false;  // reached by the current backward pass
  };
  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> param_nodes_;
};

// ---- ops -------------------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var square(Var a);
Var sum(Var a);
// Stops gradient flow: returns a constant node holding a's current value.
Var detach(Var a);
Var reshape(Var a, Shape shape);

// input [T x Cin], kernels [Cout x Cin x k], k odd. Same-length output with
// symmetric zero padding of (k-1)*dilation/2.
Var conv1d(Var input, Var kernels, std::size_t dilation);
// input [B x Din] (or [Din], treated as one row), weights [Dout x Din], bias [Dout].
Var dense(Var input, Var weights, Var bias);
Var relu(Var a);
Var sigmoid(Var a);
// Row-wise softmax over the last axis of a [B x C] (or [C]) array.
Var softmax(Var a);
// Per-channel mean of [T x C] over timesteps whose mask entry is true.
Var gap_time(Var input, const Mask& mask);
// Mean over non-overlapping contiguous channel windows: [T x D] -> [T x target].
Var avg_pool_channels(Var input, std::size_t target);
// Zeroes rows whose mask entry is false.
Var mask_rows(Var input, const Mask& mask);
// out[t, c] = input[t, c] * gate[c]
Var channel_gate(Var input, Var gate);
// Stacks equally shaped [D] vectors into [B x D].
Var stack_rows(std::span<const Var> rows);
// Per-class mean of the rows of [B x D]: returns [C x D].
Var class_means(Var rows, std::span<const std::size_t> labels, std::size_t n_classes);
// out[b, c] = -||rows[b] - centers[c]||^2
Var neg_sq_dist(Var rows, Var centers);
// Mean over rows of -ln max(p[label], 1e-12).
Var cross_entropy(Var probabilities, std::span<const std::size_t> labels);
// Mean over rows of logsumexp(z) - z[label]. Equals cross_entropy(softmax(z))
// away from the clamp, but keeps the gradient p - onehot when the softmax
// saturates on a wrong class.
Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels);

// ---- plain-array forward helpers (no graph) ---------------------------------

Array softmax_rows(const Array& logits);
Array avg_pool_channels(const Array& input, std::size_t target);

// ---- gradient checking ------------------------------------------------------

using LossFn = std::function<Var(Graph&, const std::map<std::string, Var>&)>;

struct GradCheckOptions {
  double step = 1e-5;
  double rtol = 1e-4;
  // Magnitude below which errors are measured absolutely rather than relative
  // to the gradient size.
  double abs_floor = 1e-3;
  // 0 checks every coordinate; otherwise a seeded sample of this many
  // coordinates per parameter.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  bool passed = true;
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t coords_checked = 0;
  // Coordinates where the loss is not differentiable within +-step (a ReLU
  // kink inside the stencil). Central differences are not a valid oracle there.
  std::size_t coords_nonsmooth = 0;
};

GradCheckReport finite_diff_check(const LossFn& fn, const ParamSet& params,
                                  const GradCheckOptions& options = {});

}  // namespace mskl::ad
