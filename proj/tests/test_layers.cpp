#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "docdet/layers.hpp"

using docdet::Rng;
using docdet::nn::Graph;
using docdet::nn::ParamStore;
using docdet::nn::Tape;
using docdet::nn::Tensor;

TEST_CASE("parameter store keeps creation order and rejects duplicates") {
  ParamStore ps;
  const int a = ps.create("a", {2, 3});
  const int b = ps.create("b", {4});
  CHECK(a == 0);
  CHECK(b == 1);
  CHECK(ps.find("a") == 0);
  CHECK(ps.find("missing") == -1);
  CHECK(ps.total_elements() == 10);
  CHECK_THROWS_AS(ps.create("a", {1}), std::invalid_argument);
  CHECK(ps.at(0).value.v.abs().maxCoeff() == 0.0);  // zero until a module fills it
}

TEST_CASE("graph exposes parameters and zero-fills untouched gradients") {
  ParamStore ps;
  ps.create("used", {2});
  ps.create("unused", {3});
  ps.at(0).value = Tensor::from({2}, {1.0, 2.0});

  Graph g(ps);
  const Tape::Id loss = g.tape.sum_all(g.tape.mul(g.p(0), g.p(0)));
  g.tape.backward(loss);
  const auto grads = g.grads();
  REQUIRE(grads.size() == 2);
  CHECK(grads[0].v[0] == 2.0);
  CHECK(grads[0].v[1] == 4.0);
  CHECK(grads[1].shape == std::vector<int>{3});
  CHECK(grads[1].v.abs().maxCoeff() == 0.0);
}

TEST_CASE("linear computes xW + b") {
  ParamStore ps;
  Rng rng(3);
  docdet::nn::Linear lin(ps, "fc", 2, 3, rng);
  ps.at(ps.find("fc.w")).value = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  ps.at(ps.find("fc.b")).value = Tensor::from({3}, {0.5, -0.5, 1.0});

  Graph g(ps);
  const Tape::Id x = g.tape.constant(Tensor::from({1, 2}, {1.0, 2.0}));
  const Tensor& y = g.tape.val(lin.apply(g, x));
  CHECK(y.shape == std::vector<int>{1, 3});
  CHECK(y.v[0] == doctest::Approx(1 + 8 + 0.5).epsilon(1e-12));
  CHECK(y.v[1] == doctest::Approx(2 + 10 - 0.5).epsilon(1e-12));
  CHECK(y.v[2] == doctest::Approx(3 + 12 + 1.0).epsilon(1e-12));
}

TEST_CASE("mlp rectifies between layers but not after the last") {
  ParamStore ps;
  Rng rng(4);
  docdet::nn::Mlp mlp(ps, "head", {1, 1, 1}, rng);
  ps.at(ps.find("head.fc0.w")).value = Tensor::from({1, 1}, {1.0});
  ps.at(ps.find("head.fc1.w")).value = Tensor::from({1, 1}, {1.0});

  Graph g(ps);
  const Tape::Id x = g.tape.constant(Tensor::from({1, 1}, {-2.0}));
  // relu kills the hidden value, so the output is exactly the final bias (0)
  CHECK(g.tape.val(mlp.apply(g, x)).v[0] == 0.0);

  Graph g2(ps);
  const Tape::Id x2 = g2.tape.constant(Tensor::from({1, 1}, {3.0}));
  CHECK(g2.tape.val(mlp.apply(g2, x2)).v[0] == 3.0);  // positive passes both layers
}

namespace {

void set_identity(ParamStore& ps, const std::string& name, int d) {
  Tensor w({d, d});
  for (int i = 0; i < d; ++i) w.at(i, i) = 1.0;
  ps.at(ps.find(name)).value = w;
}

}  // namespace

TEST_CASE("attention with identity projections matches the softmax formula") {
  const int d = 4;
  ParamStore ps;
  Rng rng(5);
  docdet::nn::MultiHeadAttention att(ps, "att", d, 1, rng);
  for (const char* n : {"att.q.w", "att.k.w", "att.v.w", "att.o.w"}) set_identity(ps, n, d);

  const Tensor q = Tensor::from({2, 4}, {1, 0, 0, 0, 0, 1, 0, 0});
  const Tensor k = Tensor::from({2, 4}, {2, 0, 0, 0, 0, 2, 0, 0});
  const Tensor v = Tensor::from({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});

  Graph g(ps);
  const Tape::Id out =
      att.apply(g, g.tape.constant(q), g.tape.constant(k), g.tape.constant(v));
  const Tensor& y = g.tape.val(out);

  // row 0: raw scores (2, 0), scaled by 1/sqrt(4) -> softmax(1, 0)
  const double w0 = std::exp(1.0) / (std::exp(1.0) + 1.0);
  for (int c = 0; c < 4; ++c)
    CHECK(y.at(0, c) == doctest::Approx(w0 * v.at(0, c) + (1 - w0) * v.at(1, c)).epsilon(1e-12));
  // row 1 is the mirror image
  for (int c = 0; c < 4; ++c)
    CHECK(y.at(1, c) == doctest::Approx((1 - w0) * v.at(0, c) + w0 * v.at(1, c)).epsilon(1e-12));
}

TEST_CASE("masked attention weights are exactly zero") {
  const int d = 4;
  ParamStore ps;
  Rng rng(6);
  docdet::nn::MultiHeadAttention att(ps, "att", d, 2, rng);
  for (const char* n : {"att.q.w", "att.k.w", "att.v.w", "att.o.w"}) set_identity(ps, n, d);

  Rng data(7);
  const Tensor q = Tensor::randn({2, 4}, data);
  const Tensor k = Tensor::randn({2, 4}, data);
  const Tensor v = Tensor::randn({2, 4}, data);
  Tensor mask({2, 2});
  mask.at(0, 1) = Tape::kMaskNegInf;  // query 0 may only see key 0

  Graph g(ps);
  const Tape::Id out = att.apply(g, g.tape.constant(q), g.tape.constant(k),
                                 g.tape.constant(v), g.tape.constant(mask));
  const Tensor& y = g.tape.val(out);
  // sole visible key -> attention weight 1 -> row 0 is exactly v row 0
  for (int c = 0; c < 4; ++c) CHECK(y.at(0, c) == v.at(0, c));

  CHECK_THROWS_AS(docdet::nn::MultiHeadAttention(ps, "bad", 6, 4, rng), std::invalid_argument);
}

TEST_CASE("adamw steps match the update formula") {
  ParamStore ps;
  ps.create("p", {1});
  ps.at(0).value.v[0] = 1.0;

  docdet::nn::AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.0;
  docdet::nn::AdamW opt(cfg);

  Tensor g0({1});
  g0.v[0] = 2.0;
  opt.step(ps, {g0});

  // independent scalar recomputation of step 1
  const double m = 0.1 * 2.0, v = 0.001 * 4.0;
  const double mhat = m / (1 - 0.9), vhat = v / (1 - 0.999);
  const double expect = 1.0 - 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
  CHECK(ps.at(0).value.v[0] == doctest::Approx(expect).epsilon(1e-12));
  CHECK(opt.steps_taken() == 1);

  // decoupled decay shrinks the weight beyond the gradient step
  ParamStore ps2;
  ps2.create("p", {1});
  ps2.at(0).value.v[0] = 1.0;
  cfg.weight_decay = 0.5;
  docdet::nn::AdamW opt2(cfg);
  opt2.step(ps2, {g0});
  CHECK(ps2.at(0).value.v[0] == doctest::Approx(expect - 0.1 * 0.5 * 1.0).epsilon(1e-12));

  CHECK_THROWS_AS(opt.step(ps, {g0, g0}), std::invalid_argument);
}

TEST_CASE("gradients flow through attention to every projection") {
  const int d = 8;
  ParamStore ps;
  Rng rng(8);
  docdet::nn::MultiHeadAttention att(ps, "att", d, 2, rng);

  Rng data(9);
  const Tensor x = Tensor::randn({3, d}, data);
  Graph g(ps);
  const Tape::Id xs = g.tape.constant(x);
  const Tape::Id out = att.apply(g, xs, xs, xs);
  g.tape.backward(g.tape.sum_all(g.tape.mul(out, out)));
  const auto grads = g.grads();
  for (int i = 0; i < ps.size(); ++i) {
    CAPTURE(ps.at(i).name);
    CHECK(grads[i].v.abs().maxCoeff() > 0.0);
  }
}
