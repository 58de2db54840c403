#pragma once

// Sequence encoder: two squeeze-and-excitation residual blocks with dilated
// 1-D convolutions, a 1x1 channel adapter between them, masked temporal
// global average pooling and a dense embedding layer. A linear head maps
// embeddings to class logits.

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mskl/array.hpp"
#include "mskl/autodiff.hpp"

namespace mskl::seqnet {

using VarMap = std::map<std::string, ad::Var>;

struct BackboneConfig {
  std::size_t d_in = 0;   // input channels D'
  std::size_t k_mid = 0;  // adapter / block-2 width K
  std::size_t d_out = 0;  // embedding width D_o
  std::size_t filter1 = 5;
  std::size_t filter2 = 3;
  std::size_t dilation1 = 1;
  std::size_t dilation2 = 2;
  std::size_t se_reduction = 4;

  // Standard configuration for a pooled feature width in {2,4,8,16,32,64}.
  static BackboneConfig for_input_width(std::size_t d_in);
  void validate() const;

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

// SE bottleneck width: channels / reduction, never below 2 units.
std::size_t se_hidden_units(std::size_t channels, std::size_t reduction);

struct Backbone {
  BackboneConfig config;
  ad::ParamSet params;
};

Backbone build_backbone(std::size_t d_in, std::uint64_t seed);
Backbone build_backbone(const BackboneConfig& config, std::uint64_t seed);

// Zero-padded batch [B x T_max x D] and per-sample validity masks.
struct PaddedBatch {
  Array data;
  std::vector<ad::Mask> masks;

  std::size_t batch() const { return data.shape.at(0); }
  std::size_t length() const { return data.shape.at(1); }
  std::size_t width() const { return data.shape.at(2); }
};

// Parameter names used by the graph functions below, relative to a block
// prefix such as "block1".
namespace names {
inline std::string conv_a(const std::string& block) { return block + ".conv_a"; }
inline std::string conv_b(const std::string& block) { return block + ".conv_b"; }
inline std::string se_fc1_w(const std::string& block) { return block + ".se.fc1.w"; }
inline std::string se_fc1_b(const std::string& block) { return block + ".se.fc1.b"; }
inline std::string se_fc2_w(const std::string& block) { return block + ".se.fc2.w"; }
inline std::string se_fc2_b(const std::string& block) { return block + ".se.fc2.b"; }
inline const std::string kAdapter = "adapter.w";
inline const std::string kEmbedW = "embed.w";
inline const std::string kEmbedB = "embed.b";
inline const std::string kHeadW = "head.w";
inline const std::string kHeadB = "head.b";
}  // namespace names

// features [T x C] -> features * sigmoid(fc2(relu(fc1(masked_mean(features)))))
ad::Var se_attention(ad::Var features, const ad::Mask& mask, const VarMap& vars,
                     const std::string& block);

// relu(x + se(conv_b(relu(conv_a(x))))) with padded timesteps held at zero.
ad::Var residual_block(ad::Var x, const ad::Mask& mask, const VarMap& vars,
                       const std::string& block, std::size_t dilation);

// Pre-pooling features [T x K] for one sequence [T x D'].
ad::Var encode_sequence(ad::Var sequence, const ad::Mask& mask, const VarMap& vars,
                        const BackboneConfig& config);

// [B x D_o] embeddings for a padded batch.
ad::Var forward_embed(ad::Graph& graph, const PaddedBatch& batch, const VarMap& vars,
                      const BackboneConfig& config);

// logits = embeddings * W^T + b
ad::Var head_logits(ad::Var embeddings, ad::Var weights, ad::Var bias);

// Graph-free conveniences.
Array embed(const ad::ParamSet& params, const BackboneConfig& config, const PaddedBatch& batch);
Array head_logits(const Array& embeddings, const Array& weights, const Array& bias);

}  // namespace mskl::seqnet
