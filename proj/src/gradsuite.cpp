#include "mskl/gradsuite.hpp"

#include <algorithm>
#include <functional>
#include <random>

#include "mskl/episodes.hpp"
#include "mskl/seed.hpp"
#include "mskl/seqnet.hpp"

namespace mskl::gradsuite {

using ad::Graph;
using ad::LossFn;
using ad::ParamSet;
using ad::Var;
using VarMap = std::map<std::string, Var>;

namespace {

struct Case {
  std::string name;
  ParamSet params;
  LossFn loss;
  std::size_t max_coords = 0;
};

class Draw {
 public:
  explicit Draw(std::uint64_t seed) : rng_(seed) {}

  Array uniform(Shape shape, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    Array a(std::move(shape), 0.0);
    for (double& v : a.data) v = d(rng_);
    return a;
  }
  std::size_t index(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_);
  }
  ad::Mask mask(std::size_t n) {
    ad::Mask m(n);
    for (std::size_t i = 0; i < n; ++i) m[i] = index(0, 1) == 1;
    m[index(0, n - 1)] = true;
    return m;
  }
  // Labels in [0, classes) with every class present.
  std::vector<std::size_t> labels(std::size_t n, std::size_t classes) {
    std::vector<std::size_t> l(n);
    for (std::size_t i = 0; i < n; ++i) l[i] = i < classes ? i : index(0, classes - 1);
    std::shuffle(l.begin(), l.end(), rng_);
    return l;
  }

 private:
  std::mt19937_64 rng_;
};

// Contracts an op output with fixed random weights so every output
// coordinate receives a distinct upstream gradient.
Var contract(Var out, const Array& weights) {
  return ad::sum(ad::mul(out, out.graph->constant(weights)));
}

ParamSet make_params(std::initializer_list<std::pair<const char*, Array>> values) {
  ParamSet p;
  for (const auto& [name, value] : values) p.add({name, value});
  return p;
}

void op_cases(std::vector<Case>& cases, Draw& d, std::size_t max_len) {
  const std::size_t T = d.index(1, max_len), C = d.index(2, 4), B = d.index(2, 4);
  const Shape tc{T, C};
  const Array r_tc = d.uniform(tc);

  auto binary = [&](const char* name, Var (*op)(Var, Var)) {
    cases.push_back({name, make_params({{"a", d.uniform(tc)}, {"b", d.uniform(tc)}}),
                     [op, r_tc](Graph&, const VarMap& v) { return contract(op(v.at("a"), v.at("b")), r_tc); }});
  };
  binary("add", ad::add);
  binary("sub", ad::sub);
  binary("mul", ad::mul);
  auto unary = [&](const char* name, std::function<Var(Var)> op) {
    cases.push_back({name, make_params({{"a", d.uniform(tc, -2.0, 2.0)}}),
                     [op, r_tc](Graph&, const VarMap& v) { return contract(op(v.at("a")), r_tc); }});
  };
  const double factor = d.uniform({1}, -3.0, 3.0)[0];
  unary("scale", [factor](Var a) { return ad::scale(a, factor); });
  unary("square", ad::square);
  unary("relu", ad::relu);
  unary("sigmoid", ad::sigmoid);
  unary("softmax", ad::softmax);
  const ad::Mask m_rows = d.mask(T);
  unary("mask_rows", [m_rows](Var a) { return ad::mask_rows(a, m_rows); });
  cases.push_back({"sum", make_params({{"a", d.uniform(tc)}}),
                   [factor](Graph&, const VarMap& v) { return ad::scale(ad::sum(v.at("a")), factor); }});
  const Array r_ct = d.uniform({C, T});
  cases.push_back({"reshape", make_params({{"a", d.uniform(tc)}}), [r_ct, C, T](Graph&, const VarMap& v) {
                     return contract(ad::reshape(v.at("a"), Shape{C, T}), r_ct);
                   }});

  const std::size_t k = 2 * d.index(0, 2) + 1, dil = d.index(1, 2), cout = d.index(1, 4);
  const Array r_conv = d.uniform({T, cout});
  cases.push_back({"conv1d", make_params({{"x", d.uniform(tc)}, {"w", d.uniform({cout, C, k})}}),
                   [r_conv, dil](Graph&, const VarMap& v) {
                     return contract(ad::conv1d(v.at("x"), v.at("w"), dil), r_conv);
                   }});

  const std::size_t dout = d.index(1, 4);
  const Array r_dense = d.uniform({B, dout});
  cases.push_back({"dense", make_params({{"x", d.uniform({B, C})}, {"w", d.uniform({dout, C})}, {"b", d.uniform({dout})}}),
                   [r_dense](Graph&, const VarMap& v) {
                     return contract(ad::dense(v.at("x"), v.at("w"), v.at("b")), r_dense);
                   }});
  const Array r_c = d.uniform({C});
  const ad::Mask m_gap = d.mask(T);
  cases.push_back({"gap_time", make_params({{"x", d.uniform(tc)}}), [r_c, m_gap](Graph&, const VarMap& v) {
                     return contract(ad::gap_time(v.at("x"), m_gap), r_c);
                   }});
  const Array r_pool = d.uniform({T, 2});
  cases.push_back({"avg_pool_channels", make_params({{"x", d.uniform({T, 4})}}), [r_pool](Graph&, const VarMap& v) {
                     return contract(ad::avg_pool_channels(v.at("x"), 2), r_pool);
                   }});
  cases.push_back({"channel_gate", make_params({{"x", d.uniform(tc)}, {"g", d.uniform({C})}}),
                   [r_tc](Graph&, const VarMap& v) {
                     return contract(ad::channel_gate(v.at("x"), v.at("g")), r_tc);
                   }});
  const Array r_stack = d.uniform({3, C});
  cases.push_back({"stack_rows", make_params({{"r0", d.uniform({C})}, {"r1", d.uniform({C})}, {"r2", d.uniform({C})}}),
                   [r_stack](Graph&, const VarMap& v) {
                     const std::vector<Var> rows{v.at("r0"), v.at("r1"), v.at("r2")};
                     return contract(ad::stack_rows(rows), r_stack);
                   }});
  const std::size_t classes = std::min<std::size_t>(B, 2);
  const std::vector<std::size_t> labels = d.labels(B, classes);
  const Array r_means = d.uniform({classes, C});
  cases.push_back({"class_means", make_params({{"x", d.uniform({B, C})}}), [labels, classes, r_means](Graph&, const VarMap& v) {
                     return contract(ad::class_means(v.at("x"), labels, classes), r_means);
                   }});
  const Array r_dist = d.uniform({B, 3});
  cases.push_back({"neg_sq_dist", make_params({{"x", d.uniform({B, C})}, {"c", d.uniform({3, C})}}),
                   [r_dist](Graph&, const VarMap& v) {
                     return contract(ad::neg_sq_dist(v.at("x"), v.at("c")), r_dist);
                   }});
  const std::vector<std::size_t> ce_labels = d.labels(B, C);
  cases.push_back({"cross_entropy", make_params({{"p", d.uniform({B, C}, 0.05, 1.0)}}), [ce_labels](Graph&, const VarMap& v) {
                     return ad::cross_entropy(v.at("p"), ce_labels);
                   }});
  cases.push_back({"softmax_cross_entropy", make_params({{"z", d.uniform({B, C}, -3.0, 3.0)}}),
                   [ce_labels](Graph&, const VarMap& v) { return ad::softmax_cross_entropy(v.at("z"), ce_labels); }});
}

seqnet::PaddedBatch random_batch(Draw& d, std::size_t n, std::size_t width, std::size_t max_len) {
  std::vector<Array> seqs;
  for (std::size_t i = 0; i < n; ++i) seqs.push_back(d.uniform({d.index(1, max_len), width}, 0.0, 1.0));
  return episodes::pad_batch(std::span<const Array>(seqs));
}

void backbone_case(std::vector<Case>& cases, Draw& d, std::size_t index, const SuiteConfig& config) {
  const std::size_t width = d.index(0, 1) ? 4 : 2;
  seqnet::BackboneConfig bc = seqnet::BackboneConfig::for_input_width(width);
  std::size_t coords = config.sampled_coords;
  if (index % 2 == 1) {
    // Reduced widths so that every coordinate can be checked.
    bc.k_mid = d.index(3, 6);
    bc.d_out = d.index(4, 8);
    coords = 0;
  }
  ParamSet params = seqnet::build_backbone(bc, derive_seed(config.seed, {index, 0xbb})).params;
  const std::size_t classes = 2;
  const std::string tag = "backbone_d" + std::to_string(width) + "_k" + std::to_string(bc.k_mid) + "_o" +
                          std::to_string(bc.d_out);

  if (index % 4 < 2) {
    params.add({seqnet::names::kHeadW, d.uniform({classes, bc.d_out}, -0.3, 0.3)});
    params.add({seqnet::names::kHeadB, d.uniform({classes}, -0.3, 0.3)});
    const seqnet::PaddedBatch batch = random_batch(d, 4, width, config.max_length);
    const std::vector<std::size_t> labels = d.labels(4, classes);
    cases.push_back({tag + "_head_ce", std::move(params),
                     [batch, labels, bc](Graph& g, const VarMap& v) {
                       Var emb = seqnet::forward_embed(g, batch, v, bc);
                       Var logits = seqnet::head_logits(emb, v.at(seqnet::names::kHeadW), v.at(seqnet::names::kHeadB));
                       return ad::softmax_cross_entropy(logits, labels);
                     },
                     coords});
  } else {
    const seqnet::PaddedBatch support = random_batch(d, 2, width, config.max_length);
    const seqnet::PaddedBatch query = random_batch(d, 2, width, config.max_length);
    const std::vector<std::size_t> s_labels{0, 1};
    const std::vector<std::size_t> q_labels = d.labels(2, classes);
    cases.push_back({tag + "_protonet_ce", std::move(params),
                     [support, query, s_labels, q_labels, bc](Graph& g, const VarMap& v) {
                       Var protos = ad::class_means(seqnet::forward_embed(g, support, v, bc), s_labels, 2);
                       Var logits = ad::neg_sq_dist(seqnet::forward_embed(g, query, v, bc), protos);
                       return ad::softmax_cross_entropy(logits, q_labels);
                     },
                     coords});
  }
}

}  // namespace

const std::vector<std::string>& covered_ops() {
  static const std::vector<std::string> ops{
      "add",     "sub",       "mul",      "scale",     "square",            "sum",          "reshape",
      "conv1d",  "dense",     "relu",     "sigmoid",   "softmax",           "gap_time",     "avg_pool_channels",
      "mask_rows", "channel_gate", "stack_rows", "class_means", "neg_sq_dist", "cross_entropy",
      "softmax_cross_entropy"};
  return ops;
}

SuiteReport run_suite(const SuiteConfig& config) {
  SuiteReport report;
  report.configs = config.n_configs;
  for (std::size_t i = 0; i < config.n_configs; ++i) {
    Draw d(derive_seed(config.seed, {i}));
    std::vector<Case> cases;
    op_cases(cases, d, config.max_length);
    backbone_case(cases, d, i, config);
    for (Case& c : cases) {
      ad::GradCheckOptions opts = config.check;
      opts.max_coords_per_param = c.max_coords;
      opts.seed = derive_seed(config.seed, {i, 0xc0});
      CaseResult res{i, c.name, ad::finite_diff_check(c.loss, c.params, opts)};
      report.coords_checked += res.report.coords_checked;
      report.coords_nonsmooth += res.report.coords_nonsmooth;
      if (res.report.max_rel_error > report.max_rel_error || report.worst_case.empty()) {
        report.max_rel_error = std::max(report.max_rel_error, res.report.max_rel_error);
        report.worst_case = "config " + std::to_string(i) + " " + c.name + " " + res.report.worst_param + "[" +
                            std::to_string(res.report.worst_index) + "]";
      }
      report.passed = report.passed && res.report.passed;
      report.cases.push_back(std::move(res));
    }
  }
  return report;
}

}  // namespace mskl::gradsuite
