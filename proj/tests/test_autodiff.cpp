#include <cmath>
#include <random>

#include "doctest.h"
#include "mskl/autodiff.hpp"
#include "mskl/error.hpp"

using namespace mskl;
using namespace mskl::ad;

namespace {

Array random_array(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Array a(std::move(shape), 0.0);
  for (double& v : a.data) v = d(rng);
  return a;
}

// Direct summation over padded indices, written independently of the op.
Array conv_oracle(const Array& x, const Array& w, std::size_t dil) {
  const long T = static_cast<long>(x.shape[0]);
  const std::size_t cin = x.shape[1], cout = w.shape[0], k = w.shape[2];
  const long half = static_cast<long>(k / 2);
  Array out(Shape{x.shape[0], cout}, 0.0);
  for (long t = 0; t < T; ++t)
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t j = 0; j < k; ++j) {
          const long src = t + (static_cast<long>(j) - half) * static_cast<long>(dil);
          if (src >= 0 && src < T) out.at(t, co) += w.at(co, ci, j) * x.at(src, ci);
        }
  return out;
}

}  // namespace

TEST_CASE("conv1d spec examples") {
  Graph g;
  const Array x(Shape{5, 1}, std::vector<double>{1, 2, 3, 4, 5});
  const Var in = g.constant(x);
  const Var delta = g.constant(Array(Shape{1, 1, 3}, std::vector<double>{0, 1, 0}));
  CHECK(conv1d(in, delta, 1).value().data == x.data);
  const Var ones = g.constant(Array(Shape{1, 1, 3}, 1.0));
  CHECK(conv1d(in, ones, 2).value().data == std::vector<double>{4, 6, 9, 6, 8});
  const Var zeros = g.constant(Array(Shape{5, 1}, 0.0));
  for (double v : conv1d(zeros, ones, 2).value().data) CHECK(v == 0.0);
}

TEST_CASE("conv1d matches direct summation and is linear") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t T = 1 + rng() % 12, cin = 1 + rng() % 4, cout = 1 + rng() % 4, k = 2 * (rng() % 3) + 1,
                      dil = 1 + rng() % 3;
    const Array x = random_array({T, cin}, rng), y = random_array({T, cin}, rng), w = random_array({cout, cin, k}, rng);
    Graph g;
    const Var wv = g.constant(w);
    const Array got = conv1d(g.constant(x), wv, dil).value();
    CHECK(max_abs_diff(got, conv_oracle(x, w, dil)) < 1e-12);
    const double a = 0.7, b = -1.3;
    Array mix = x;
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * x[i] + b * y[i];
    const Array lhs = conv1d(g.constant(mix), wv, dil).value();
    const Array cy = conv1d(g.constant(y), wv, dil).value();
    for (std::size_t i = 0; i < lhs.size(); ++i) CHECK(std::abs(lhs[i] - (a * got[i] + b * cy[i])) < 1e-12);
  }
}

TEST_CASE("conv1d rejects bad shapes") {
  Graph g;
  const Var x = g.constant(Array(Shape{4, 2}, 1.0));
  CHECK_THROWS_AS(conv1d(x, g.constant(Array(Shape{1, 3, 3}, 1.0)), 1), ValidationError);
  CHECK_THROWS_AS(conv1d(x, g.constant(Array(Shape{1, 2, 2}, 1.0)), 1), ValidationError);
}

TEST_CASE("dense spec examples") {
  Graph g;
  const Var x = g.constant(Array::matrix({{1, 2}}));
  CHECK(dense(x, g.constant(Array::matrix({{3, 4}})), g.constant(Array::vector({0}))).value().data ==
        std::vector<double>{11});
  const Var id = g.constant(Array::matrix({{1, 0}, {0, 1}}));
  CHECK(dense(x, id, g.constant(Array::vector({0, 0}))).value().data == std::vector<double>{1, 2});
  const Var zw = g.constant(Array(Shape{2, 2}, 0.0));
  const Array rows = dense(g.constant(Array::matrix({{5, 6}, {7, 8}})), zw, g.constant(Array::vector({1, 2}))).value();
  CHECK(rows.data == std::vector<double>{1, 2, 1, 2});
  CHECK_THROWS_AS(dense(x, g.constant(Array(Shape{2, 3}, 0.0)), g.constant(Array::vector({0, 0}))), ValidationError);
}

TEST_CASE("activations") {
  Graph g;
  CHECK(relu(g.constant(Array::vector({-1, 0, 2}))).value().data == std::vector<double>{0, 0, 2});
  CHECK(sigmoid(g.constant(Array::scalar(0.0))).value()[0] == 0.5);
  CHECK(softmax(g.constant(Array::vector({0, 0}))).value().data == std::vector<double>{0.5, 0.5});

  std::mt19937_64 rng(5);
  const Array logits = random_array({6, 5}, rng, -50.0, 50.0);
  const Array p = softmax(g.constant(logits)).value();
  for (std::size_t r = 0; r < 6; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 5; ++c) {
      CHECK(p.at(r, c) >= 0.0);
      CHECK(p.at(r, c) <= 1.0);
      total += p.at(r, c);
    }
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
  const Array huge = softmax(g.constant(Array::vector({1000, 1000}))).value();
  CHECK(huge.all_finite());
  CHECK(huge[0] == doctest::Approx(0.5));
}

TEST_CASE("gap_time examples and padding invariance") {
  Graph g;
  CHECK(gap_time(g.constant(Array::matrix({{1, 3}, {3, 5}})), {true, true}).value().data == std::vector<double>{2, 4});
  CHECK(gap_time(g.constant(Array::matrix({{1, 3}, {3, 5}, {0, 0}})), {true, true, false}).value().data ==
        std::vector<double>{2, 4});
  CHECK(gap_time(g.constant(Array::matrix({{7, 8}})), {true}).value().data == std::vector<double>{7, 8});
  CHECK_THROWS_AS(gap_time(g.constant(Array::matrix({{1, 2}})), {false}), ValidationError);

  std::mt19937_64 rng(9);
  const Array x = random_array({5, 3}, rng);
  Array padded(Shape{8, 3}, 0.0);
  std::copy(x.data.begin(), x.data.end(), padded.data.begin());
  const Mask m{true, true, true, true, true, false, false, false};
  CHECK(gap_time(g.constant(x), Mask(5, true)).value() == gap_time(g.constant(padded), m).value());
}

TEST_CASE("avg_pool_channels") {
  Graph g;
  CHECK(avg_pool_channels(g.constant(Array::matrix({{1, 2, 3, 4}})), 2).value().data == std::vector<double>{1.5, 3.5});
  const Array x = Array::matrix({{1, 2, 3, 4}, {5, 6, 7, 8}});
  CHECK(avg_pool_channels(g.constant(x), 4).value() == x);
  CHECK(avg_pool_channels(g.constant(Array(Shape{3, 8}, 2.5)), 2).value() == Array(Shape{3, 2}, 2.5));
  CHECK_THROWS_AS(avg_pool_channels(g.constant(x), 3), ValidationError);

  std::mt19937_64 rng(11);
  const Array big = random_array({4, 64}, rng);
  for (std::size_t target : {2, 4, 8, 16, 32, 64}) {
    const Array out = avg_pool_channels(big, target);
    for (std::size_t t = 0; t < 4; ++t) {
      double in_mean = 0.0, out_mean = 0.0;
      for (std::size_t d = 0; d < 64; ++d) in_mean += big.at(t, d) / 64.0;
      for (std::size_t d = 0; d < target; ++d) out_mean += out.at(t, d) / static_cast<double>(target);
      CHECK(std::abs(in_mean - out_mean) < 1e-12);
    }
  }
}

TEST_CASE("cross_entropy examples") {
  Graph g;
  const std::vector<std::size_t> l0{0}, l1{1};
  CHECK(cross_entropy(g.constant(Array::matrix({{1, 0}})), l0).value()[0] == doctest::Approx(0.0));
  CHECK(cross_entropy(g.constant(Array::matrix({{0.5, 0.5}})), l0).value()[0] == doctest::Approx(0.693147).epsilon(1e-6));
  CHECK(cross_entropy(g.constant(Array::matrix({{0.25, 0.75}})), l1).value()[0] ==
        doctest::Approx(-std::log(0.75)).epsilon(1e-12));
  CHECK(cross_entropy(g.constant(Array::matrix({{1, 0}})), l1).value()[0] == doctest::Approx(-std::log(1e-12)));
  const std::vector<std::size_t> l2{2};
  CHECK_THROWS_AS(cross_entropy(g.constant(Array::matrix({{0.5, 0.5}})), l2), ValidationError);
}

TEST_CASE("backward basics") {
  Graph g;
  const Var x = g.param({"x", Array::scalar(3.0)});
  g.backward(square(x));
  CHECK(g.grad(x)[0] == 6.0);

  Graph g2;
  const Var y = g2.param({"y", Array::scalar(-1.0)});
  g2.backward(sum(relu(y)));
  CHECK(g2.grad(y)[0] == 0.0);

  Graph g3;
  const Var z = g3.param({"z", Array::scalar(0.0)});
  g3.backward(sum(relu(z)));
  CHECK(g3.grad(z)[0] == 0.0);

  Graph g4;
  const Var v = g4.param({"v", Array::vector({1, 2})});
  CHECK_THROWS_AS(g4.backward(v), ValidationError);
}

TEST_CASE("non-trainable parameters receive no gradient entry") {
  Graph g;
  const Var a = g.param({"a", Array::vector({1, 2}), true});
  const Var b = g.param({"b", Array::vector({3, 4}), false});
  g.backward(sum(mul(a, b)));
  const GradMap grads = g.param_grads();
  CHECK(grads.count("a") == 1);
  CHECK(grads.count("b") == 0);
  CHECK(grads.at("a").data == std::vector<double>{3, 4});
}

TEST_CASE("detach blocks gradient flow") {
  Graph g;
  const Var a = g.param({"a", Array::vector({1, 2})});
  g.backward(sum(mul(a, detach(a))));
  CHECK(g.grad(a).data == std::vector<double>{1, 2});
}

TEST_CASE("repeated backward passes are bit-identical") {
  std::mt19937_64 rng(21);
  Graph g;
  const Var x = g.param({"x", random_array({6, 3}, rng)});
  const Var w = g.param({"w", random_array({4, 3, 3}, rng)});
  const Var loss = sum(square(relu(conv1d(x, w, 2))));
  g.backward(loss);
  const GradMap first = g.param_grads();
  g.backward(loss);
  CHECK(first == g.param_grads());
}

TEST_CASE("shared inputs accumulate gradients") {
  Graph g;
  const Var a = g.param({"a", Array::vector({2, -3})});
  g.backward(sum(add(mul(a, a), scale(a, 4.0))));
  CHECK(g.grad(a).data == std::vector<double>{8, -2});
}

TEST_CASE("class means and distances") {
  Graph g;
  const std::vector<std::size_t> labels{0, 1, 0};
  const Array m = class_means(g.constant(Array::matrix({{0, 0}, {5, 5}, {2, 2}})), labels, 2).value();
  CHECK(m.data == std::vector<double>{1, 1, 5, 5});
  const std::vector<std::size_t> missing{0, 0};
  CHECK_THROWS_AS(class_means(g.constant(Array::matrix({{0, 0}, {1, 1}})), missing, 2), ValidationError);
  const Array d = neg_sq_dist(g.constant(Array::matrix({{1, 1}})), g.constant(Array::matrix({{1, 1}, {3, 1}}))).value();
  CHECK(d.data == std::vector<double>{0, -4});
}

TEST_CASE("finite-difference checker on simple functions") {
  ParamSet params;
  params.add({"a", Array::vector({0.3, -1.2, 2.0})});
  const LossFn linear = [](Graph&, const std::map<std::string, Var>& v) { return scale(sum(v.at("a")), 2.5); };
  const GradCheckReport lin = finite_diff_check(linear, params);
  CHECK(lin.passed);
  CHECK(lin.max_rel_error < 1e-8);
  const LossFn quad = [](Graph&, const std::map<std::string, Var>& v) { return sum(square(v.at("a"))); };
  const GradCheckReport q = finite_diff_check(quad, params);
  CHECK(q.passed);
  CHECK(q.max_rel_error < 1e-8);
  CHECK(q.coords_checked == 3);
}

TEST_CASE("finite-difference checker catches a wrong gradient") {
  ParamSet params;
  params.add({"a", Array::vector({0.5, 1.5})});
  // Forward computes a^2 but the recorded backward claims 3a.
  const LossFn wrong = [](Graph& g, const std::map<std::string, Var>& v) {
    const Var a = v.at("a");
    Array out = a.value();
    for (double& x : out.data) x = x * x;
    const Var sq = g.record("bad_square", {a.id}, out, [a](Graph& gr, std::size_t self) {
      if (Array* sink = gr.grad_sink(a.id)) {
        for (std::size_t i = 0; i < sink->size(); ++i) (*sink)[i] += 3.0 * a.value()[i] * gr.grad_of(self)[i];
      }
    });
    return sum(sq);
  };
  const GradCheckReport r = finite_diff_check(wrong, params);
  CHECK_FALSE(r.passed);
  CHECK(r.max_rel_error > 0.3);
}

TEST_CASE("parameter sets reject duplicate names") {
  ParamSet p;
  p.add({"w", Array::scalar(1.0)});
  CHECK_THROWS_AS(p.add({"w", Array::scalar(2.0)}), ValidationError);
  CHECK(p.scalar_count() == 1);
}
