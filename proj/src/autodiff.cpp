#include "mskl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "mskl/error.hpp"

namespace mskl::ad {

// ---- ParamSet ---------------------------------------------------------------

void ParamSet::add(Parameter p) {
  if (p.name.empty()) throw ValidationError("parameter name must be non-empty");
  const std::string name = p.name;
  if (!params_.emplace(name, std::move(p)).second) {
    throw ValidationError("duplicate parameter name '" + name + "'");
  }
}

const Parameter& ParamSet::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ValidationError("unknown parameter '" + name + "'");
  return it->second;
}

Parameter& ParamSet::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ValidationError("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += p.value.size();
  return n;
}

bool operator==(const Parameter& a, const Parameter& b) {
  return a.name == b.name && a.trainable == b.trainable && a.value == b.value;
}

bool operator==(const ParamSet& a, const ParamSet& b) { return a.params_ == b.params_; }

// ---- Graph ------------------------------------------------------------------

const Array& Var::value() const { return graph->value(id); }

Var Graph::constant(Array value) {
  return record("const", {}, std::move(value), nullptr);
}

Var Graph::param(const Parameter& p) {
  if (auto it = param_nodes_.find(p.name); it != param_nodes_.end()) return Var{this, it->second};
  Var v = record("param", {}, p.value, nullptr);
  Node& n = nodes_[v.id];
  n.param_name = p.name;
  n.is_param = true;
  n.trainable = p.trainable;
  n.requires_grad = p.trainable;
  param_nodes_.emplace(p.name, v.id);
  return v;
}

std::map<std::string, Var> Graph::bind(const ParamSet& params) {
  std::map<std::string, Var> out;
  for (const auto& [name, p] : params) out.emplace(name, param(p));
  return out;
}

Var Graph::record(std::string op, std::vector<std::size_t> inputs, Array value, BackwardFn fn) {
  Node n;
  n.op = std::move(op);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [this](std::size_t i) { return nodes_[i].requires_grad; });
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Array* Graph::grad_sink(std::size_t id) {
  Node& n = nodes_[id];
  return n.active ? &n.grad : nullptr;
}

void Graph::backward(Var loss) {
  if (loss.graph != this) throw ValidationError("backward: loss belongs to another graph");
  if (nodes_[loss.id].value.size() != 1) {
    throw ValidationError("backward: loss must be scalar, got shape " +
                          shape_string(nodes_[loss.id].value.shape));
  }
  for (Node& n : nodes_) {
    n.active = false;
    n.grad = Array();
  }
  // Mark the nodes the loss depends on and that lead to a trainable leaf.
  nodes_[loss.id].active = nodes_[loss.id].requires_grad;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    if (!nodes_[i].active) continue;
    for (std::size_t in : nodes_[i].inputs) {
      if (nodes_[in].requires_grad) nodes_[in].active = true;
    }
  }
  for (Node& n : nodes_) {
    if (n.active) n.grad = Array(n.value.shape, 0.0);
  }
  if (!nodes_[loss.id].active) return;
  nodes_[loss.id].grad.data[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    if (nodes_[i].active && nodes_[i].backward) nodes_[i].backward(*this, i);
  }
}

Array Graph::grad(Var v) const {
  const Node& n = nodes_[v.id];
  return n.active ? n.grad : Array(n.value.shape, 0.0);
}

GradMap Graph::param_grads() const {
  GradMap out;
  for (const auto& [name, id] : param_nodes_) {
    const Node& n = nodes_[id];
    if (!n.trainable) continue;
    out.emplace(name, n.active ? n.grad : Array(n.value.shape, 0.0));
  }
  return out;
}

// ---- helpers ----------------------------------------------------------------

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

void same_graph(Var a, Var b, const char* op) {
  require(a.graph == b.graph, std::string(op) + ": operands belong to different graphs");
}

void same_shape(Var a, Var b, const char* op) {
  same_graph(a, b, op);
  require(a.shape() == b.shape(), std::string(op) + ": shape " + shape_string(a.shape()) +
                                      " vs " + shape_string(b.shape()));
}

// Views a rank-1 or rank-2 array as rows x cols.
std::pair<std::size_t, std::size_t> as_matrix(const Shape& s, const char* op) {
  if (s.size() == 1) return {1, s[0]};
  require(s.size() == 2, std::string(op) + ": expected rank 1 or 2, got " + shape_string(s));
  return {s[0], s[1]};
}

void check_mask(const Shape& s, const Mask& mask, const char* op) {
  require(s.size() == 2, std::string(op) + ": expected [T x C], got " + shape_string(s));
  require(mask.size() == s[0], std::string(op) + ": mask length " + std::to_string(mask.size()) +
                                   " != T " + std::to_string(s[0]));
}

constexpr double kLogClamp = 1e-12;

}  // namespace

// ---- elementwise ------------------------------------------------------------

Var add(Var a, Var b) {
  same_shape(a, b, "add");
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.graph->record("add", {a.id, b.id}, std::move(out), [](Graph& g, std::size_t self) {
    const Array& go = g.grad_of(self);
    for (std::size_t in : g.inputs(self)) {
      if (Array* gi = g.grad_sink(in)) {
        for (std::size_t i = 0; i < go.size(); ++i) (*gi)[i] += go[i];
      }
    }
  });
}

Var sub(Var a, Var b) {
  same_shape(a, b, "sub");
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.graph->record("sub", {a.id, b.id}, std::move(out), [](Graph& g, std::size_t self) {
    const Array& go = g.grad_of(self);
    if (Array* ga = g.grad_sink(g.inputs(self)[0])) {
      for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i];
    }
    if (Array* gb = g.grad_sink(g.inputs(self)[1])) {
      for (std::size_t i = 0; i < go.size(); ++i) (*gb)[i] -= go[i];
    }
  });
}

Var mul(Var a, Var b) {
  same_shape(a, b, "mul");
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.graph->record("mul", {a.id, b.id}, std::move(out), [](Graph& g, std::size_t self) {
    const Array& go = g.grad_of(self);
    const std::size_t ia = g.inputs(self)[0];
    const std::size_t ib = g.inputs(self)[1];
    if (Array* ga = g.grad_sink(ia)) {
      const Array& bv = g.value(ib);
      for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] * bv[i];
    }
    if (Array* gb = g.grad_sink(ib)) {
      const Array& av = g.value(ia);
      for (std::size_t i = 0; i < go.size(); ++i) (*gb)[i] += go[i] * av[i];
    }
  });
}

Var scale(Var a, double factor) {
  Array out = a.value();
  for (double& v : out.data) v *= factor;
  return a.graph->record("scale", {a.id}, std::move(out), [factor](Graph& g, std::size_t self) {
    if (Array* ga = g.grad_sink(g.inputs(self)[0])) {
      const Array& go = g.grad_of(self);
      for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] * factor;
    }
  });
}

Var square(Var a) {
  Array out = a.value();
  for (double& v : out.data) v *= v;
  return a.graph->record("square", {a.id}, std::move(out), [](Graph& g, std::size_t self) {
    const std::size_t ia = g.inputs(self)[0];
    if (Array* ga = g.grad_sink(ia)) {
      const Array& go = g.grad_of(self);
      const Array& av = g.value(ia);
      for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += 2.0 * av[i] * go[i];
    }
  });
}

Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().data) total += v;
  return a.graph->record("sum", {a.id}, Array::scalar(total), [](Graph& g, std::size_t self) {
    if (Array* ga = g.grad_sink(g.inputs(self)[0])) {
      const double go = g.grad_of(self)[0];
      for (double& v : ga->data) v += go;
    }
  });
}

Var detach(Var a) { return a.graph->constant(a.value()); }

Var reshape(Var a, Shape shape) {
  Array out = a.value().reshaped(std::move(shape));
  return a.graph->record("reshape", {a.id}, std::move(out), [](Graph& g, std::size_t self) {
    if (Array* ga = g.grad_sink(g.inputs(self)[0])) {
      const Array& go = g.grad_of(self);
      for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i];
    }
  });
}

Var relu(Var a) {
  Array out = a.value();
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return a.graph->record("relu", {a.id}, std::move(out), [](Graph& g, std::size_t self) {
    if (Array* ga = g.grad_sink(g.inputs(self)[0])) {
      const Array& go = g.grad_of(self);
      const Array& y = g.value(self);
      // Subgradient at 0 is 0.
      for (std::size_t i = 0; i < go.size(); ++i) {
        if (y[i] > 0.0) (*ga)[i] += go[i];
      }
    }
  });
}

Var sigmoid(Var a) {
  Array out = a.value();
  for (double& v : out.data) {
    v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return a.graph->record("sigmoid", {a.id}, std::move(out), [](Graph& g, std::size_t self) {
    if (Array* ga = g.grad_sink(g.inputs(self)[0])) {
      const Array& go = g.grad_of(self);
      const Array& y = g.value(self);
      for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] * y[i] * (1.0 - y[i]);
    }
  });
}

// ---- softmax / loss ---------------------------------------------------------

Array softmax_rows(const Array& logits) {
  const auto [rows, cols] = as_matrix(logits.shape, "softmax");
  require(cols >= 1, "softmax: need at least one class");
  Array out = logits;
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.data.data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      row[c] = std::exp(row[c] - mx);
      total += row[c];
    }
    for (std::size_t c = 0; c < cols; ++c) row[c] /= total;
  }
  return out;
}

Var softmax(Var a) {
  Array out = softmax_rows(a.value());
  return a.graph->record("softmax", {a.id}, std::move(out), [](Graph& g, std::size_t self) {
    Array* ga = g.grad_sink(g.inputs(self)[0]);
    if (!ga) return;
    const Array& y = g.value(self);
    const Array& go = g.grad_of(self);
    const auto [rows, cols] = as_matrix(y.shape, "softmax");
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += go[base + c] * y[base + c];
      for (std::size_t c = 0; c < cols; ++c) (*ga)[base + c] += y[base + c] * (go[base + c] - dot);
    }
  });
}

Var cross_entropy(Var probabilities, std::span<const std::size_t> labels) {
  const auto [rows, cols] = as_matrix(probabilities.shape(), "cross_entropy");
  require(labels.size() == rows, "cross_entropy: " + std::to_string(labels.size()) +
                                     " labels for " + std::to_string(rows) + " rows");
  require(rows > 0, "cross_entropy: empty batch");
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  const Array& p = probabilities.value();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    require(lab[r] < cols, "cross_entropy: label " + std::to_string(lab[r]) + " >= classes " +
                               std::to_string(cols));
    total -= std::log(std::max(p[r * cols + lab[r]], kLogClamp));
  }
  const double loss = total / static_cast<double>(rows);
  return probabilities.graph->record(
      "cross_entropy", {probabilities.id}, Array::scalar(loss),
      [lab = std::move(lab), cols = cols](Graph& g, std::size_t self) {
        const std::size_t ip = g.inputs(self)[0];
        Array* gp = g.grad_sink(ip);
        if (!gp) return;
        const Array& p = g.value(ip);
        const double go = g.grad_of(self)[0] / static_cast<double>(lab.size());
        for (std::size_t r = 0; r < lab.size(); ++r) {
          const double pr = p[r * cols + lab[r]];
          // Clamped region is flat.
          if (pr > kLogClamp) (*gp)[r * cols + lab[r]] -= go / pr;
        }
      });
}

Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels) {
  const auto [rows, cols] = as_matrix(logits.shape(), "softmax_cross_entropy");
  require(labels.size() == rows, "softmax_cross_entropy: " + std::to_string(labels.size()) +
                                     " labels for " + std::to_string(rows) + " rows");
  require(rows > 0, "softmax_cross_entropy: empty batch");
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  const Array& z = logits.value();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    require(lab[r] < cols, "softmax_cross_entropy: label " + std::to_string(lab[r]) + " >= classes " +
                               std::to_string(cols));
    const double* row = z.data.data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sum += std::exp(row[c] - mx);
    total += mx + std::log(sum) - row[lab[r]];
  }
  const double loss = total / static_cast<double>(rows);
  return logits.graph->record(
      "softmax_cross_entropy", {logits.id}, Array::scalar(loss),
      [lab = std::move(lab), cols = cols](Graph& g, std::size_t self) {
        const std::size_t iz = g.inputs(self)[0];
        Array* gz = g.grad_sink(iz);
        if (!gz) return;
        const Array p = softmax_rows(g.value(iz));
        const double go = g.grad_of(self)[0] / static_cast<double>(lab.size());
        for (std::size_t r = 0; r < lab.size(); ++r) {
          for (std::size_t c = 0; c < cols; ++c) {
            (*gz)[r * cols + c] += go * (p[r * cols + c] - (c == lab[r] ? 1.0 : 0.0));
          }
        }
      });
}

// ---- layers -----------------------------------------------------------------

Var conv1d(Var input, Var kernels, std::size_t dilation) {
  same_graph(input, kernels, "conv1d");
  const Shape& xs = input.shape();
  const Shape& ks = kernels.shape();
  require(xs.size() == 2, "conv1d: input must be [T x Cin], got " + shape_string(xs));
  require(ks.size() == 3, "conv1d: kernels must be [Cout x Cin x k], got " + shape_string(ks));
  require(ks[1] == xs[1], "conv1d: kernel expects " + std::to_string(ks[1]) +
                              " input channels, input has " + std::to_string(xs[1]));
  require(ks[2] % 2 == 1, "conv1d: kernel size must be odd, got " + std::to_string(ks[2]));
  require(dilation >= 1, "conv1d: dilation must be >= 1");
  const std::size_t T = xs[0], cin = xs[1], cout = ks[0], k = ks[2];
  const long half = static_cast<long>(k / 2);
  const long dil = static_cast<long>(dilation);

  const Array& x = input.value();
  const Array& w = kernels.value();
  Array out(Shape{T, cout}, 0.0);
  for (std::size_t j = 0; j < k; ++j) {
    const long offset = (static_cast<long>(j) - half) * dil;
    const long t0 = std::max(0L, -offset);
    const long t1 = std::min(static_cast<long>(T), static_cast<long>(T) - offset);
    for (long t = t0; t < t1; ++t) {
      const double* xr = &x.data[static_cast<std::size_t>(t + offset) * cin];
      double* orow = &out.data[static_cast<std::size_t>(t) * cout];
      for (std::size_t co = 0; co < cout; ++co) {
        const double* wr = &w.data[(co * cin) * k + j];
        double acc = 0.0;
        for (std::size_t ci = 0; ci < cin; ++ci) acc += wr[ci * k] * xr[ci];
        orow[co] += acc;
      }
    }
  }
  return input.graph->record(
      "conv1d", {input.id, kernels.id}, std::move(out),
      [T, cin, cout, k, half, dil](Graph& g, std::size_t self) {
        const std::size_t ix = g.inputs(self)[0];
        const std::size_t iw = g.inputs(self)[1];
        const Array& go = g.grad_of(self);
        const Array& x = g.value(ix);
        const Array& w = g.value(iw);
        Array* gx = g.grad_sink(ix);
        Array* gw = g.grad_sink(iw);
        for (std::size_t j = 0; j < k; ++j) {
          const long offset = (static_cast<long>(j) - half) * dil;
          const long t0 = std::max(0L, -offset);
          const long t1 = std::min(static_cast<long>(T), static_cast<long>(T) - offset);
          for (long t = t0; t < t1; ++t) {
            const std::size_t src = static_cast<std::size_t>(t + offset) * cin;
            const double* grow = &go.data[static_cast<std::size_t>(t) * cout];
            for (std::size_t co = 0; co < cout; ++co) {
              const double gv = grow[co];
              if (gv == 0.0) continue;
              const std::size_t wbase = (co * cin) * k + j;
              if (gx) {
                for (std::size_t ci = 0; ci < cin; ++ci) gx->data[src + ci] += w.data[wbase + ci * k] * gv;
              }
              if (gw) {
                for (std::size_t ci = 0; ci < cin; ++ci) gw->data[wbase + ci * k] += x.data[src + ci] * gv;
              }
            }
          }
        }
      });
}

Var dense(Var input, Var weights, Var bias) {
  same_graph(input, weights, "dense");
  same_graph(input, bias, "dense");
  const auto [rows, din] = as_matrix(input.shape(), "dense");
  const Shape& ws = weights.shape();
  require(ws.size() == 2 && ws[1] == din, "dense: weights " + shape_string(ws) +
                                              " do not accept input " +
                                              shape_string(input.shape()));
  const std::size_t dout = ws[0];
  require(bias.shape() == Shape{dout},
          "dense: bias " + shape_string(bias.shape()) + " != [" + std::to_string(dout) + "]");
  const Array& x = input.value();
  const Array& w = weights.value();
  const Array& b = bias.value();
  Shape out_shape = input.shape().size() == 1 ? Shape{dout} : Shape{rows, dout};
  Array out(std::move(out_shape), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = &x.data[r * din];
    for (std::size_t o = 0; o < dout; ++o) {
      const double* wr = &w.data[o * din];
      double acc = b.data[o];
      for (std::size_t i = 0; i < din; ++i) acc += xr[i] * wr[i];
      out.data[r * dout + o] = acc;
    }
  }
  return input.graph->record(
      "dense", {input.id, weights.id, bias.id}, std::move(out),
      [rows = rows, din = din, dout](Graph& g, std::size_t self) {
        const auto& ins = g.inputs(self);
        const Array& go = g.grad_of(self);
        const Array& x = g.value(ins[0]);
        const Array& w = g.value(ins[1]);
        Array* gx = g.grad_sink(ins[0]);
        Array* gw = g.grad_sink(ins[1]);
        Array* gb = g.grad_sink(ins[2]);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t o = 0; o < dout; ++o) {
            const double gv = go.data[r * dout + o];
            if (gb) gb->data[o] += gv;
            if (gv == 0.0) continue;
            if (gx) {
              for (std::size_t i = 0; i < din; ++i) gx->data[r * din + i] += w.data[o * din + i] * gv;
            }
            if (gw) {
              for (std::size_t i = 0; i < din; ++i) gw->data[o * din + i] += x.data[r * din + i] * gv;
            }
          }
        }
      });
}

Var gap_time(Var input, const Mask& mask) {
  check_mask(input.shape(), mask, "gap_time");
  const std::size_t T = input.shape()[0], C = input.shape()[1];
  const std::size_t n = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
  require(n > 0, "gap_time: mask selects no timesteps (empty sequence)");
  const Array& x = input.value();
  Array out(Shape{C}, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    if (!mask[t]) continue;
    for (std::size_t c = 0; c < C; ++c) out.data[c] += x.data[t * C + c];
  }
  const double inv = 1.0 / static_cast<double>(n);
  for (double& v : out.data) v *= inv;
  return input.graph->record("gap_time", {input.id}, std::move(out),
                             [mask, T, C, inv](Graph& g, std::size_t self) {
                               Array* gx = g.grad_sink(g.inputs(self)[0]);
                               if (!gx) return;
                               const Array& go = g.grad_of(self);
                               for (std::size_t t = 0; t < T; ++t) {
                                 if (!mask[t]) continue;
                                 for (std::size_t c = 0; c < C; ++c) {
                                   gx->data[t * C + c] += go.data[c] * inv;
                                 }
                               }
                             });
}

Array avg_pool_channels(const Array& input, std::size_t target) {
  require(input.rank() == 2, "avg_pool_channels: expected [T x D], got " + shape_string(input.shape));
  const std::size_t T = input.shape[0], D = input.shape[1];
  require(target >= 1 && D % target == 0, "avg_pool_channels: D=" + std::to_string(D) +
                                              " not divisible by target " + std::to_string(target));
  const std::size_t win = D / target;
  Array out(Shape{T, target}, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < target; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < win; ++j) acc += input.data[t * D + i * win + j];
      out.data[t * target + i] = acc / static_cast<double>(win);
    }
  }
  return out;
}

Var avg_pool_channels(Var input, std::size_t target) {
  Array out = avg_pool_channels(input.value(), target);
  const std::size_t T = input.shape()[0], D = input.shape()[1];
  return input.graph->record(
      "avg_pool_channels", {input.id}, std::move(out), [T, D, target](Graph& g, std::size_t self) {
        Array* gx = g.grad_sink(g.inputs(self)[0]);
        if (!gx) return;
        const Array& go = g.grad_of(self);
        const std::size_t win = D / target;
        const double inv = 1.0 / static_cast<double>(win);
        for (std::size_t t = 0; t < T; ++t) {
          for (std::size_t d = 0; d < D; ++d) gx->data[t * D + d] += go.data[t * target + d / win] * inv;
        }
      });
}

Var mask_rows(Var input, const Mask& mask) {
  check_mask(input.shape(), mask, "mask_rows");
  const std::size_t T = input.shape()[0], C = input.shape()[1];
  Array out = input.value();
  for (std::size_t t = 0; t < T; ++t) {
    if (!mask[t]) std::fill_n(out.data.begin() + static_cast<long>(t * C), C, 0.0);
  }
  return input.graph->record("mask_rows", {input.id}, std::move(out),
                             [mask, C](Graph& g, std::size_t self) {
                               Array* gx = g.grad_sink(g.inputs(self)[0]);
                               if (!gx) return;
                               const Array& go = g.grad_of(self);
                               for (std::size_t t = 0; t < mask.size(); ++t) {
                                 if (!mask[t]) continue;
                                 for (std::size_t c = 0; c < C; ++c) gx->data[t * C + c] += go.data[t * C + c];
                               }
                             });
}

Var channel_gate(Var input, Var gate) {
  same_graph(input, gate, "channel_gate");
  require(input.shape().size() == 2, "channel_gate: input must be [T x C]");
  const std::size_t T = input.shape()[0], C = input.shape()[1];
  require(gate.shape() == Shape{C}, "channel_gate: gate " + shape_string(gate.shape()) +
                                        " does not match " + std::to_string(C) + " channels");
  Array out = input.value();
  const Array& s = gate.value();
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t c = 0; c < C; ++c) out.data[t * C + c] *= s.data[c];
  }
  return input.graph->record(
      "channel_gate", {input.id, gate.id}, std::move(out), [T, C](Graph& g, std::size_t self) {
        const std::size_t ix = g.inputs(self)[0];
        const std::size_t is = g.inputs(self)[1];
        const Array& go = g.grad_of(self);
        if (Array* gx = g.grad_sink(ix)) {
          const Array& s = g.value(is);
          for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t c = 0; c < C; ++c) gx->data[t * C + c] += go.data[t * C + c] * s.data[c];
          }
        }
        if (Array* gs = g.grad_sink(is)) {
          const Array& x = g.value(ix);
          for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t c = 0; c < C; ++c) gs->data[c] += go.data[t * C + c] * x.data[t * C + c];
          }
        }
      });
}

Var stack_rows(std::span<const Var> rows) {
  require(!rows.empty(), "stack_rows: no rows");
  Graph* graph = rows[0].graph;
  const Shape& s0 = rows[0].shape();
  require(s0.size() == 1, "stack_rows: rows must be rank 1, got " + shape_string(s0));
  const std::size_t D = s0[0];
  Array out(Shape{rows.size(), D}, 0.0);
  std::vector<std::size_t> ids;
  ids.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    require(rows[r].graph == graph, "stack_rows: rows belong to different graphs");
    require(rows[r].shape() == s0, "stack_rows: row " + std::to_string(r) + " has shape " +
                                       shape_string(rows[r].shape()));
    std::copy(rows[r].value().data.begin(), rows[r].value().data.end(),
              out.data.begin() + static_cast<long>(r * D));
    ids.push_back(rows[r].id);
  }
  return graph->record("stack_rows", std::move(ids), std::move(out), [D](Graph& g, std::size_t self) {
    const Array& go = g.grad_of(self);
    const auto& ins = g.inputs(self);
    for (std::size_t r = 0; r < ins.size(); ++r) {
      if (Array* gr = g.grad_sink(ins[r])) {
        for (std::size_t d = 0; d < D; ++d) gr->data[d] += go.data[r * D + d];
      }
    }
  });
}

Var class_means(Var rows, std::span<const std::size_t> labels, std::size_t n_classes) {
  require(rows.shape().size() == 2, "class_means: expected [B x D]");
  const std::size_t B = rows.shape()[0], D = rows.shape()[1];
  require(labels.size() == B, "class_means: label count mismatch");
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  std::vector<std::size_t> counts(n_classes, 0);
  for (std::size_t l : lab) {
    require(l < n_classes, "class_means: label " + std::to_string(l) + " out of range");
    ++counts[l];
  }
  for (std::size_t c = 0; c < n_classes; ++c) {
    require(counts[c] > 0, "class_means: class " + std::to_string(c) + " has no samples");
  }
  const Array& x = rows.value();
  Array out(Shape{n_classes, D}, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t d = 0; d < D; ++d) out.data[lab[b] * D + d] += x.data[b * D + d];
  }
  for (std::size_t c = 0; c < n_classes; ++c) {
    const double inv = 1.0 / static_cast<double>(counts[c]);
    for (std::size_t d = 0; d < D; ++d) out.data[c * D + d] *= inv;
  }
  return rows.graph->record(
      "class_means", {rows.id}, std::move(out),
      [lab = std::move(lab), counts = std::move(counts), D](Graph& g, std::size_t self) {
        Array* gx = g.grad_sink(g.inputs(self)[0]);
        if (!gx) return;
        const Array& go = g.grad_of(self);
        for (std::size_t b = 0; b < lab.size(); ++b) {
          const double inv = 1.0 / static_cast<double>(counts[lab[b]]);
          for (std::size_t d = 0; d < D; ++d) gx->data[b * D + d] += go.data[lab[b] * D + d] * inv;
        }
      });
}

Var neg_sq_dist(Var rows, Var centers) {
  same_graph(rows, centers, "neg_sq_dist");
  require(rows.shape().size() == 2 && centers.shape().size() == 2,
          "neg_sq_dist: expected [B x D] and [C x D]");
  const std::size_t B = rows.shape()[0], D = rows.shape()[1], C = centers.shape()[0];
  require(centers.shape()[1] == D, "neg_sq_dist: dimension mismatch " +
                                       shape_string(rows.shape()) + " vs " +
                                       shape_string(centers.shape()));
  const Array& x = rows.value();
  const Array& v = centers.value();
  Array out(Shape{B, C}, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::size_t d = 0; d < D; ++d) {
        const double diff = x.data[b * D + d] - v.data[c * D + d];
        acc += diff * diff;
      }
      out.data[b * C + c] = -acc;
    }
  }
  return rows.graph->record(
      "neg_sq_dist", {rows.id, centers.id}, std::move(out), [B, C, D](Graph& g, std::size_t self) {
        const std::size_t ix = g.inputs(self)[0];
        const std::size_t iv = g.inputs(self)[1];
        const Array& go = g.grad_of(self);
        const Array& x = g.value(ix);
        const Array& v = g.value(iv);
        Array* gx = g.grad_sink(ix);
        Array* gv = g.grad_sink(iv);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t c = 0; c < C; ++c) {
            const double gval = go.data[b * C + c];
            for (std::size_t d = 0; d < D; ++d) {
              const double diff = x.data[b * D + d] - v.data[c * D + d];
              if (gx) gx->data[b * D + d] -= 2.0 * diff * gval;
              if (gv) gv->data[c * D + d] += 2.0 * diff * gval;
            }
          }
        }
      });
}

// ---- gradient check ---------------------------------------------------------

GradCheckReport finite_diff_check(const LossFn& fn, const ParamSet& params,
                                  const GradCheckOptions& options) {
  GradMap analytic;
  {
    Graph g;
    auto vars = g.bind(params);
    Var loss = fn(g, vars);
    g.backward(loss);
    analytic = g.param_grads();
  }
  auto eval = [&](const ParamSet& ps) {
    Graph g;
    auto vars = g.bind(ps);
    return fn(g, vars).value()[0];
  };

  GradCheckReport report;
  const double h = options.step;
  ParamSet probe = params;
  const double f0 = eval(params);
  std::mt19937_64 rng(options.seed);
  for (const auto& [name, p] : params) {
    if (!p.trainable) continue;
    const Array& ga = analytic.at(name);
    std::vector<std::size_t> coords(p.value.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (options.max_coords_per_param && coords.size() > options.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    Array& slot = probe.at(name).value;
    for (std::size_t i : coords) {
      const double orig = slot[i];
      slot[i] = orig + h;
      const double fp = eval(probe);
      slot[i] = orig - h;
      const double fm = eval(probe);
      slot[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = ga[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.abs_floor});
      const double err = std::abs(a - numeric) / denom;
      ++report.coords_checked;
      if (err > options.rtol) {
        // A kink inside the stencil shows up as a second difference on the
        // order of the central-difference error; the analytic gradient must
        // then agree with one of the one-sided slopes.
        const double second = std::abs(fp - 2.0 * f0 + fm) / (2.0 * h);
        const double right = (fp - f0) / h;
        const double left = (f0 - fm) / h;
        const double one_sided = std::min(std::abs(a - right), std::abs(a - left)) / denom;
        if (second >= 0.5 * std::abs(a - numeric) && one_sided <= 10.0 * options.rtol) {
          ++report.coords_nonsmooth;
          continue;
        }
      }
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_param = name;
        report.worst_index = i;
      }
    }
  }
  report.passed = report.max_rel_error < options.rtol;
  return report;
}

}  // namespace mskl::ad
