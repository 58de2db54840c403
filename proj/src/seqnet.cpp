#include "mskl/seqnet.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "mskl/error.hpp"

namespace mskl::seqnet {

namespace {

const ad::Var& lookup(const VarMap& vars, const std::string& name) {
  auto it = vars.find(name);
  if (it == vars.end()) throw ValidationError("missing parameter '" + name + "'");
  return it->second;
}

// He-uniform: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
Array he_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  Array a(std::move(shape), 0.0);
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (double& v : a.data) v = dist(rng);
  return a;
}

void add_block(ad::ParamSet& params, const std::string& block, std::size_t channels,
               std::size_t filter, std::size_t reduction, std::mt19937_64& rng) {
  const std::size_t hidden = se_hidden_units(channels, reduction);
  params.add({names::conv_a(block), he_uniform({channels, channels, filter}, channels * filter, rng)});
  params.add({names::conv_b(block), he_uniform({channels, channels, filter}, channels * filter, rng)});
  params.add({names::se_fc1_w(block), he_uniform({hidden, channels}, channels, rng)});
  params.add({names::se_fc1_b(block), Array(Shape{hidden}, 0.0)});
  params.add({names::se_fc2_w(block), he_uniform({channels, hidden}, hidden, rng)});
  params.add({names::se_fc2_b(block), Array(Shape{channels}, 0.0)});
}

}  // namespace

BackboneConfig BackboneConfig::for_input_width(std::size_t d_in) {
  BackboneConfig c;
  c.d_in = d_in;
  switch (d_in) {
    case 2:
    case 4:
    case 8:
      c.k_mid = 16;
      break;
    case 16:
    case 32:
      c.k_mid = 64;
      break;
    case 64:
      c.k_mid = 256;
      break;
    default:
      throw ValidationError("unsupported input width " + std::to_string(d_in) +
                            " (expected one of 2, 4, 8, 16, 32, 64)");
  }
  c.d_out = d_in == 64 ? 1024 : 512;
  return c;
}

void BackboneConfig::validate() const {
  if (d_in == 0 || k_mid == 0 || d_out == 0) throw ValidationError("backbone widths must be positive");
  if (filter1 % 2 == 0 || filter2 % 2 == 0) throw ValidationError("backbone filter sizes must be odd");
  if (dilation1 == 0 || dilation2 == 0) throw ValidationError("backbone dilations must be >= 1");
  if (se_reduction == 0) throw ValidationError("se_reduction must be positive");
}

std::size_t se_hidden_units(std::size_t channels, std::size_t reduction) {
  return std::max<std::size_t>(2, channels / reduction);
}

Backbone build_backbone(std::size_t d_in, std::uint64_t seed) {
  return build_backbone(BackboneConfig::for_input_width(d_in), seed);
}

Backbone build_backbone(const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  Backbone b{config, {}};
  add_block(b.params, "block1", config.d_in, config.filter1, config.se_reduction, rng);
  b.params.add({names::kAdapter, he_uniform({config.k_mid, config.d_in, 1}, config.d_in, rng)});
  add_block(b.params, "block2", config.k_mid, config.filter2, config.se_reduction, rng);
  b.params.add({names::kEmbedW, he_uniform({config.d_out, config.k_mid}, config.k_mid, rng)});
  b.params.add({names::kEmbedB, Array(Shape{config.d_out}, 0.0)});
  return b;
}

ad::Var se_attention(ad::Var features, const ad::Mask& mask, const VarMap& vars,
                     const std::string& block) {
  ad::Var squeeze = ad::gap_time(features, mask);
  ad::Var hidden = ad::relu(
      ad::dense(squeeze, lookup(vars, names::se_fc1_w(block)), lookup(vars, names::se_fc1_b(block))));
  ad::Var gate = ad::sigmoid(
      ad::dense(hidden, lookup(vars, names::se_fc2_w(block)), lookup(vars, names::se_fc2_b(block))));
  return ad::channel_gate(features, gate);
}

ad::Var residual_block(ad::Var x, const ad::Mask& mask, const VarMap& vars,
                       const std::string& block, std::size_t dilation) {
  ad::Var h = ad::mask_rows(ad::conv1d(x, lookup(vars, names::conv_a(block)), dilation), mask);
  h = ad::relu(h);
  h = ad::mask_rows(ad::conv1d(h, lookup(vars, names::conv_b(block)), dilation), mask);
  h = se_attention(h, mask, vars, block);
  return ad::relu(ad::add(x, h));
}

ad::Var encode_sequence(ad::Var sequence, const ad::Mask& mask, const VarMap& vars,
                        const BackboneConfig& config) {
  if (sequence.shape().size() != 2 || sequence.shape()[1] != config.d_in) {
    throw ValidationError("encode_sequence: expected [T x " + std::to_string(config.d_in) +
                          "], got " + shape_string(sequence.shape()));
  }
  ad::Var h = residual_block(ad::mask_rows(sequence, mask), mask, vars, "block1", config.dilation1);
  h = ad::conv1d(h, lookup(vars, names::kAdapter), 1);
  return residual_block(h, mask, vars, "block2", config.dilation2);
}

ad::Var forward_embed(ad::Graph& graph, const PaddedBatch& batch, const VarMap& vars,
                      const BackboneConfig& config) {
  if (batch.data.rank() != 3) throw ValidationError("forward_embed: batch must be [B x T x D]");
  const std::size_t B = batch.batch(), T = batch.length(), D = batch.width();
  if (batch.masks.size() != B) throw ValidationError("forward_embed: one mask per sample required");
  if (D != config.d_in) {
    throw ValidationError("forward_embed: batch width " + std::to_string(D) +
                          " != backbone input width " + std::to_string(config.d_in));
  }
  std::vector<ad::Var> pooled;
  pooled.reserve(B);
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<double> rows(batch.data.data.begin() + static_cast<long>(b * T * D),
                             batch.data.data.begin() + static_cast<long>((b + 1) * T * D));
    ad::Var seq = graph.constant(Array(Shape{T, D}, std::move(rows)));
    ad::Var features = encode_sequence(seq, batch.masks[b], vars, config);
    pooled.push_back(ad::gap_time(features, batch.masks[b]));
  }
  ad::Var stacked = ad::stack_rows(pooled);
  return ad::dense(stacked, lookup(vars, names::kEmbedW), lookup(vars, names::kEmbedB));
}

ad::Var head_logits(ad::Var embeddings, ad::Var weights, ad::Var bias) {
  return ad::dense(embeddings, weights, bias);
}

Array embed(const ad::ParamSet& params, const BackboneConfig& config, const PaddedBatch& batch) {
  ad::Graph g;
  VarMap vars;
  for (const auto& [name, p] : params) vars.emplace(name, g.constant(p.value));
  return forward_embed(g, batch, vars, config).value();
}

Array head_logits(const Array& embeddings, const Array& weights, const Array& bias) {
  ad::Graph g;
  return head_logits(g.constant(embeddings), g.constant(weights), g.constant(bias)).value();
}

}  // namespace mskl::seqnet
