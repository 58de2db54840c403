#include <cmath>
#include <random>

#include "doctest.h"
#include "mskl/episodes.hpp"
#include "mskl/error.hpp"
#include "mskl/seqnet.hpp"

using namespace mskl;
using namespace mskl::seqnet;

namespace {

Array random_seq(std::size_t T, std::size_t D, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(0.0, 1.0);
  Array a(Shape{T, D}, 0.0);
  for (double& v : a.data) v = d(rng);
  return a;
}

PaddedBatch batch_of(const std::vector<Array>& seqs) { return episodes::pad_batch(std::span<const Array>(seqs)); }

Array row(const Array& m, std::size_t r) {
  const std::size_t C = m.shape[1];
  return Array(Shape{C}, std::vector<double>(m.data.begin() + static_cast<long>(r * C),
                                             m.data.begin() + static_cast<long>((r + 1) * C)));
}

}  // namespace

TEST_CASE("width table") {
  CHECK(BackboneConfig::for_input_width(2).k_mid == 16);
  CHECK(BackboneConfig::for_input_width(8).k_mid == 16);
  CHECK(BackboneConfig::for_input_width(8).d_out == 512);
  CHECK(BackboneConfig::for_input_width(16).k_mid == 64);
  CHECK(BackboneConfig::for_input_width(32).k_mid == 64);
  CHECK(BackboneConfig::for_input_width(32).d_out == 512);
  CHECK(BackboneConfig::for_input_width(64).k_mid == 256);
  CHECK(BackboneConfig::for_input_width(64).d_out == 1024);
  CHECK_THROWS_AS(BackboneConfig::for_input_width(3), ValidationError);
  CHECK_THROWS_AS(build_backbone(12, 1), ValidationError);
}

TEST_CASE("backbone construction is seeded") {
  const Backbone a = build_backbone(4, 42), b = build_backbone(4, 42), c = build_backbone(4, 43);
  CHECK(a.params == b.params);
  CHECK_FALSE(a.params == c.params);
  CHECK(a.params.at(names::conv_a("block1")).value.shape == Shape{4, 4, 5});
  CHECK(a.params.at(names::conv_a("block2")).value.shape == Shape{16, 16, 3});
  CHECK(a.params.at(names::kAdapter).value.shape == Shape{16, 4, 1});
  CHECK(a.params.at(names::kEmbedW).value.shape == Shape{512, 16});
  CHECK(a.params.at(names::se_fc1_w("block1")).value.shape == Shape{2, 4});
  CHECK(a.params.at(names::se_fc1_w("block2")).value.shape == Shape{4, 16});
  for (double v : a.params.at(names::kEmbedB).value.data) CHECK(v == 0.0);
  CHECK(se_hidden_units(4, 4) == 2);
  CHECK(se_hidden_units(256, 4) == 64);
}

TEST_CASE("squeeze-and-excitation gate") {
  ad::Graph g;
  Backbone b = build_backbone(4, 1);
  for (const char* n : {"block1.se.fc1.w", "block1.se.fc1.b", "block1.se.fc2.w", "block1.se.fc2.b"}) {
    for (double& v : b.params.at(n).value.data) v = 0.0;
  }
  const VarMap vars = g.bind(b.params);
  std::mt19937_64 rng(2);
  const Array x = random_seq(6, 4, rng);
  const ad::Mask mask(6, true);
  const Array half = se_attention(g.constant(x), mask, vars, "block1").value();
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(half[i] == doctest::Approx(0.5 * x[i]).epsilon(1e-15));
  const Array zero = se_attention(g.constant(Array(Shape{6, 4}, 0.0)), mask, vars, "block1").value();
  for (double v : zero.data) CHECK(v == 0.0);

  ad::Graph g2;
  for (double& v : b.params.at("block1.se.fc2.b").value.data) v = 60.0;
  const VarMap open = g2.bind(b.params);
  const Array passed = se_attention(g2.constant(x), mask, open, "block1").value();
  CHECK(max_abs_diff(passed, x) < 1e-12);
  CHECK_THROWS_AS(se_attention(g2.constant(x), ad::Mask(6, false), open, "block1"), ValidationError);
}

TEST_CASE("residual block with dead branch is relu of the input") {
  Backbone b = build_backbone(4, 3);
  for (double& v : b.params.at(names::conv_a("block1")).value.data) v = 0.0;
  for (double& v : b.params.at(names::conv_b("block1")).value.data) v = 0.0;
  ad::Graph g;
  const VarMap vars = g.bind(b.params);
  Array x(Shape{5, 4}, 0.0);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  for (double& v : x.data) v = d(rng);
  const Array y = residual_block(g.constant(x), ad::Mask(5, true), vars, "block1", 1).value();
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == std::max(0.0, x[i]));

  const Backbone fresh = build_backbone(4, 3);
  ad::Graph g2;
  const VarMap v2 = g2.bind(fresh.params);
  for (double v : residual_block(g2.constant(Array(Shape{5, 4}, 0.0)), ad::Mask(5, true), v2, "block1", 1).value().data) {
    CHECK(v == 0.0);
  }
}

TEST_CASE("embeddings ignore padding and batch composition") {
  const Backbone b = build_backbone(4, 5);
  std::mt19937_64 rng(6);
  std::vector<Array> seqs;
  for (std::size_t i = 0; i < 8; ++i) seqs.push_back(random_seq(3 + 5 * i, 4, rng));
  const Array all = embed(b.params, b.config, batch_of(seqs));
  CHECK(all.shape == Shape{8, 512});
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const Array alone = embed(b.params, b.config, batch_of({seqs[i]}));
    CHECK(max_abs_diff(alone, row(all, i).reshaped({1, 512})) < 1e-12);
  }
  const Array dup = embed(b.params, b.config, batch_of({seqs[2], seqs[2]}));
  CHECK(row(dup, 0) == row(dup, 1));

  std::vector<Array> reversed(seqs.rbegin(), seqs.rend());
  const Array rev = embed(b.params, b.config, batch_of(reversed));
  for (std::size_t i = 0; i < 8; ++i) CHECK(row(rev, i) == row(all, 7 - i));
}

TEST_CASE("receptive field of the encoder is eight steps") {
  BackboneConfig cfg = BackboneConfig::for_input_width(2);
  const Backbone b = build_backbone(cfg, 8);
  std::mt19937_64 rng(9);
  const std::size_t T = 30, t0 = 15;
  const Array x = random_seq(T, 2, rng);
  Array y = x;
  y.at(t0, 0) += 0.5;
  y.at(t0, 1) -= 0.5;
  // Per-timestep features before pooling. SE gates use the sequence mean, so
  // compare with the gates computed from the unperturbed input by holding the
  // SE parameters at an open gate.
  ad::ParamSet open = b.params;
  for (const char* blk : {"block1", "block2"}) {
    for (double& v : open.at(names::se_fc1_w(blk)).value.data) v = 0.0;
    for (double& v : open.at(names::se_fc2_w(blk)).value.data) v = 0.0;
  }
  ad::Graph g;
  const VarMap vars = g.bind(open);
  const Array fx = encode_sequence(g.constant(x), ad::Mask(T, true), vars, cfg).value();
  const Array fy = encode_sequence(g.constant(y), ad::Mask(T, true), vars, cfg).value();
  bool changed_inside = false;
  for (std::size_t t = 0; t < T; ++t) {
    double diff = 0.0;
    for (std::size_t c = 0; c < fx.shape[1]; ++c) diff = std::max(diff, std::abs(fx.at(t, c) - fy.at(t, c)));
    const std::size_t dist = t > t0 ? t - t0 : t0 - t;
    if (dist > 8) CHECK(diff == 0.0);
    if (dist <= 8 && diff > 0.0) changed_inside = true;
  }
  CHECK(changed_inside);
}

TEST_CASE("head logits") {
  ad::Graph g;
  const Array e = Array::matrix({{1, 2}, {-3, 0.5}});
  const Array uniform = head_logits(e, Array(Shape{3, 2}, 0.0), Array(Shape{3}, 0.0));
  for (double v : ad::softmax_rows(uniform).data) CHECK(v == doctest::Approx(1.0 / 3.0));
  const Array w = Array::matrix({{2, 4}});
  const Array l = head_logits(Array::matrix({{1, 2}}), w, Array::vector({-5}));
  CHECK(l.data == std::vector<double>{5});
  const Array onehot = head_logits(Array::matrix({{0, 3}, {2, 0}}), Array::matrix({{1, 0}, {0, 1}}), Array::vector({0, 0}));
  CHECK(onehot.at(0, 1) > onehot.at(0, 0));
  CHECK(onehot.at(1, 0) > onehot.at(1, 1));
  CHECK_THROWS_AS(head_logits(e, Array(Shape{3, 3}, 0.0), Array(Shape{3}, 0.0)), ValidationError);
}
