#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "docdet/query_hybrid.hpp"
#include "docdet/transformer.hpp"

using namespace docdet;
using namespace docdet::nn;

namespace {

bool near(double a, double b, double tol) { return std::abs(a - b) <= tol; }

Tensor ramp_map(int channels, int h, int w, const std::vector<std::array<double, 3>>& abc) {
  Tensor t({channels, h, w});
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        t.v[(c * h + y) * w + x] =
            abc[static_cast<size_t>(c)][0] + abc[static_cast<size_t>(c)][1] * x +
            abc[static_cast<size_t>(c)][2] * y;
  return t;
}

}  // namespace

TEST_CASE("pooling a hand-placed box on ramp maps matches direct interpolation") {
  // On a linear-in-(x, y) map, averaging the four half-pixel sub-samples of a
  // bin equals evaluating the ramp at the bin center, as long as every sample
  // stays strictly inside the map. That gives a closed-form expected value.
  const int h = 24, w = 24;
  std::vector<std::array<double, 3>> abc = {{0.3, 0.11, 0.07}, {-0.2, 0.05, -0.03}};
  Tape t;
  auto fmap = t.constant(ramp_map(2, h, w, abc));

  std::array<double, 4> box = {0.2, 0.25, 0.8, 0.7};
  auto pooled = t.roi_align(fmap, {box}, QueryHybrid::kPool, QueryHybrid::kSamplingRatio);
  REQUIRE(t.val(pooled).rows() == 1);
  REQUIRE(t.val(pooled).cols() == 2 * 7 * 7);

  double x1 = box[0] * w - 0.5, y1 = box[1] * h - 0.5;
  double bw = (box[2] * w - 0.5 - x1) / 7, bh = (box[3] * h - 0.5 - y1) / 7;
  for (int c = 0; c < 2; ++c)
    for (int by = 0; by < 7; ++by)
      for (int bx = 0; bx < 7; ++bx) {
        double cx = x1 + (bx + 0.5) * bw, cy = y1 + (by + 0.5) * bh;
        double want = abc[static_cast<size_t>(c)][0] + abc[static_cast<size_t>(c)][1] * cx +
                      abc[static_cast<size_t>(c)][2] * cy;
        CHECK(near(t.val(pooled).at(0, c * 49 + by * 7 + bx), want, 1e-12));
      }
}

TEST_CASE("region features: cardinality, constant maps, and out-of-extent boxes") {
  ParamStore ps;
  Rng rng(3);
  QueryHybrid qh(ps, "qh", 4, 32, 4, rng);
  Graph g(ps);

  auto constant_map = g.tape.constant(Tensor::full({4, 16, 16}, 0.37));
  std::vector<Box> boxes = {{0.1, 0.1, 0.6, 0.5}, {0.3, 0.4, 0.9, 0.8}, {0.05, 0.6, 0.5, 0.95}};
  Tape::Id feats = qh.extract_query_features(g, constant_map, boxes);
  CHECK(g.tape.val(feats).rows() == 3);
  CHECK(g.tape.val(feats).cols() == 32);

  // constant input: every interior box pools the same region, hence the same vector
  for (int i = 1; i < 3; ++i)
    for (int c = 0; c < 32; ++c)
      CHECK(g.tape.val(feats).at(i, c) == g.tape.val(feats).at(0, c));

  // fully out-of-extent boxes pool zeros, exactly like a zero-valued map
  auto zero_map = g.tape.constant(Tensor::zeros({4, 16, 16}));
  Tape::Id of_zero = qh.extract_query_features(g, zero_map, {{0.2, 0.2, 0.7, 0.7}});
  Tape::Id outside = qh.extract_query_features(g, constant_map, {{1.2, 1.1, 1.8, 1.9}});
  for (int c = 0; c < 32; ++c)
    CHECK(g.tape.val(outside).at(0, c) == g.tape.val(of_zero).at(0, c));

  auto raw = g.tape.roi_align(constant_map, {{-0.9, -0.8, -0.4, -0.3}}, 7, 2);
  for (int64_t i = 0; i < g.tape.val(raw).numel(); ++i) CHECK(g.tape.val(raw).v[i] == 0.0);

  CHECK_THROWS_AS(qh.extract_query_features(g, constant_map, {{0.5, 0.5, 0.2, 0.6}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(QueryHybrid(ps, "qh2", 4, 32, 4, rng, 0.0), std::invalid_argument);
}

TEST_CASE("cosine similarity hits its identities exactly") {
  ParamStore ps;
  Graph g(ps);
  auto a = g.tape.constant(Tensor::from({3, 4}, {1, 0, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0}));
  auto b = g.tape.constant(Tensor::from({2, 4}, {2, 0, 0, 0, 0, 0, 3, 0}));
  Tape::Id s = QueryHybrid::cosine_rows(g, a, b);
  CHECK(g.tape.val(s).at(0, 0) == 1.0);
  CHECK(g.tape.val(s).at(0, 1) == 0.0);
  CHECK(g.tape.val(s).at(1, 0) == 0.0);  // orthogonal
  CHECK(g.tape.val(s).at(2, 0) == 0.0);  // zero-norm row scores 0
  CHECK(g.tape.val(s).at(2, 1) == 0.0);

  Rng rng(5);
  auto x = g.tape.constant(Tensor::randn({6, 8}, rng, 1.0));
  Tape::Id self_sim = QueryHybrid::cosine_rows(g, x, x);
  for (int i = 0; i < 6; ++i) {
    CHECK(g.tape.val(self_sim).at(i, i) == doctest::Approx(1.0).epsilon(1e-12));
    for (int j = 0; j < 6; ++j) CHECK(std::abs(g.tape.val(self_sim).at(i, j)) <= 1.0 + 1e-12);
  }
}

TEST_CASE("aggregation reproduces a hand-composed weighted sum") {
  ParamStore ps;
  Graph g(ps);
  Rng rng(7);
  Tensor sim_t = Tensor::randn({4, 4}, rng, 0.6);
  Tensor val_t = Tensor::randn({4, 5}, rng, 1.0);
  const double tau = 0.07;
  Tape::Id out = QueryHybrid::aggregate(g, g.tape.constant(sim_t), g.tape.constant(val_t), tau);

  for (int i = 0; i < 4; ++i) {
    double denom = 0;
    for (int j = 0; j < 4; ++j) denom += std::exp(sim_t.at(i, j) / tau);
    for (int c = 0; c < 5; ++c) {
      double want = 0;
      for (int j = 0; j < 4; ++j)
        want += std::exp(sim_t.at(i, j) / tau) / denom * val_t.at(j, c);
      CHECK(near(g.tape.val(out).at(i, c), want, 1e-9));
    }
  }
}

TEST_CASE("vanishing temperature collapses aggregation onto the argmax row") {
  ParamStore ps;
  Graph g(ps);
  auto sim = g.tape.constant(Tensor::from({2, 3}, {0.2, 0.9, 0.4, 0.8, 0.1, 0.3}));
  Rng rng(9);
  Tensor val_t = Tensor::randn({3, 6}, rng, 1.0);
  Tape::Id out = QueryHybrid::aggregate(g, sim, g.tape.constant(val_t), 1e-7);
  for (int c = 0; c < 6; ++c) {
    CHECK(near(g.tape.val(out).at(0, c), val_t.at(1, c), 1e-12));
    CHECK(near(g.tape.val(out).at(1, c), val_t.at(0, c), 1e-12));
  }
}

TEST_CASE("enhancement equals the formula recomputed from its own refinements") {
  ParamStore ps;
  Rng rng(11);
  QueryHybrid qh(ps, "qh", 4, 32, 4, rng);
  Graph g(ps);
  Tensor qd_t = Tensor::randn({4, 32}, rng, 0.8);
  Tensor qh_t = Tensor::randn({4, 32}, rng, 0.8);
  auto qd = g.tape.constant(qd_t);
  auto qhh = g.tape.constant(qh_t);

  Tape::Id enhanced = qh.enhance(g, qd, qhh);
  REQUIRE(g.tape.val(enhanced).rows() == 4);

  const Tensor rd = g.tape.val(qh.refine_decoder(g, qd));
  const Tensor rh = g.tape.val(qh.refine_region(g, qhh));
  auto dot = [&](const Tensor& m, int r, const Tensor& n, int s) {
    double acc = 0;
    for (int c = 0; c < 32; ++c) acc += m.at(r, c) * n.at(s, c);
    return acc;
  };
  for (int i = 0; i < 4; ++i) {
    std::vector<double> cos(4);
    for (int j = 0; j < 4; ++j) {
      double na = std::sqrt(dot(rd, i, rd, i)), nb = std::sqrt(dot(rh, j, rh, j));
      cos[static_cast<size_t>(j)] = dot(rd, i, rh, j) / (na * nb);
    }
    double denom = 0;
    for (double csim : cos) denom += std::exp(csim / qh.temperature());
    for (int c = 0; c < 32; ++c) {
      double want = 0;
      for (int j = 0; j < 4; ++j)
        want += std::exp(cos[static_cast<size_t>(j)] / qh.temperature()) / denom * rh.at(j, c);
      CHECK(near(g.tape.val(enhanced).at(i, c), want, 1e-9));
    }
  }
}

TEST_CASE("shuffling the region rows leaves the enhancement unchanged") {
  ParamStore ps;
  Rng rng(13);
  QueryHybrid qh(ps, "qh", 4, 32, 4, rng);
  Graph g(ps);
  Tensor qd_t = Tensor::randn({5, 32}, rng, 0.8);
  Tensor qh_t = Tensor::randn({6, 32}, rng, 0.8);
  Tensor shuffled({6, 32});
  const std::vector<int> perm = {4, 2, 0, 5, 1, 3};
  for (int i = 0; i < 6; ++i)
    for (int c = 0; c < 32; ++c)
      shuffled.at(i, c) = qh_t.at(perm[static_cast<size_t>(i)], c);

  Tape::Id a = qh.enhance(g, g.tape.constant(qd_t), g.tape.constant(qh_t));
  Tape::Id b = qh.enhance(g, g.tape.constant(qd_t), g.tape.constant(shuffled));
  REQUIRE(g.tape.val(a).rows() == 5);  // one enhanced vector per decoder query
  for (int i = 0; i < 5; ++i)
    for (int c = 0; c < 32; ++c)
      CHECK(near(g.tape.val(a).at(i, c), g.tape.val(b).at(i, c), 1e-9));
}

TEST_CASE("assembly switches between stacked and pass-through forms") {
  ParamStore ps;
  Graph g(ps);
  Rng rng(17);
  Tensor base_t = Tensor::randn({3, 16}, rng, 0.5);
  Tensor enh_t = Tensor::randn({2, 16}, rng, 0.5);
  auto base = g.tape.constant(base_t);
  auto enh = g.tape.constant(enh_t);
  std::vector<std::array<double, 4>> bb = {
      {0.2, 0.2, 0.1, 0.1}, {0.5, 0.5, 0.2, 0.2}, {0.8, 0.3, 0.15, 0.25}};
  std::vector<std::array<double, 4>> eb = {{0.4, 0.6, 0.3, 0.2}, {0.6, 0.7, 0.1, 0.3}};

  AssembledQueries many = assemble_queries(g, Regime::one_to_many, base, bb, enh, eb);
  CHECK(many.n_base == 3);
  CHECK(many.n_enhanced == 2);
  REQUIRE(many.boxes.size() == 5);
  CHECK(g.tape.val(many.content).rows() == 5);
  for (int i = 0; i < 3; ++i)
    for (int c = 0; c < 4; ++c) CHECK(many.boxes[static_cast<size_t>(i)][static_cast<size_t>(c)] == bb[static_cast<size_t>(i)][static_cast<size_t>(c)]);
  for (int i = 0; i < 2; ++i)
    for (int c = 0; c < 4; ++c) CHECK(many.boxes[static_cast<size_t>(3 + i)][static_cast<size_t>(c)] == eb[static_cast<size_t>(i)][static_cast<size_t>(c)]);
  for (int i = 0; i < 3; ++i)
    for (int c = 0; c < 16; ++c) CHECK(g.tape.val(many.content).at(i, c) == base_t.at(i, c));
  for (int i = 0; i < 2; ++i)
    for (int c = 0; c < 16; ++c)
      CHECK(g.tape.val(many.content).at(3 + i, c) == enh_t.at(i, c));

  AssembledQueries one = assemble_queries(g, Regime::one_to_one, base, bb, enh, eb);
  CHECK(one.content == base);  // the very same node: bit-identical by construction
  CHECK(one.n_enhanced == 0);
  CHECK(one.boxes.size() == 3);

  CHECK_THROWS_AS(assemble_queries(g, static_cast<Regime>(9), base, bb, enh, eb),
                  std::invalid_argument);
  std::vector<std::array<double, 4>> short_eb = {{0.4, 0.6, 0.3, 0.2}};
  CHECK_THROWS_AS(assemble_queries(g, Regime::one_to_many, base, bb, enh, short_eb),
                  std::invalid_argument);
}

TEST_CASE("zeroed enhanced slots behind a blocking mask do not move the base block") {
  TransformerConfig cfg;
  cfg.dim = 32;
  cfg.heads = 4;
  cfg.points = 2;
  cfg.enc_layers = 1;
  cfg.dec_layers = 2;
  cfg.ffn_dim = 64;
  cfg.num_queries = 8;
  ParamStore ps;
  Rng rng(19);
  Transformer tr(ps, "det", cfg, 5, rng);
  Graph g(ps);
  std::vector<Tape::Id> levels;
  for (int s : {4, 8, 16, 32, 64})
    levels.push_back(g.tape.constant(
        Tensor::randn({cfg.dim, (64 + s - 1) / s, (64 + s - 1) / s}, rng, 0.3)));
  EncoderMemory mem = tr.encode(g, levels);

  const int nb = 4, ne = 3;
  Tensor base_t = Tensor::randn({nb, cfg.dim}, rng, 0.5);
  std::vector<std::array<double, 4>> bb, eb;
  for (int i = 0; i < nb; ++i) bb.push_back({0.15 + 0.2 * i, 0.4, 0.12, 0.2});
  for (int i = 0; i < ne; ++i) eb.push_back({0.2 + 0.2 * i, 0.7, 0.15, 0.18});

  Graph g2(ps);  // fresh pass for the stacked run keeps memory nodes aligned
  std::vector<Tape::Id> levels2;
  for (size_t i = 0; i < levels.size(); ++i)
    levels2.push_back(g2.tape.constant(g.tape.val(levels[i])));
  EncoderMemory mem2 = tr.encode(g2, levels2);

  AssembledQueries stacked = assemble_queries(
      g2, Regime::one_to_many, g2.tape.constant(base_t), bb,
      g2.tape.constant(Tensor::zeros({ne, cfg.dim})), eb);
  // treat the enhanced block like one isolated group: no cross-block attention
  Tensor isolation = build_attention_mask(nb, 1, ne);
  DecodeOutput with_extras =
      tr.decode(g2, mem2, stacked.content, stacked.boxes, isolation);
  DecodeOutput alone = tr.decode(g, mem, g.tape.constant(base_t), bb, Tensor({0}));

  for (size_t l = 0; l < alone.layers.size(); ++l) {
    const Tensor& la = g.tape.val(alone.layers[l].logits);
    const Tensor& lb = g2.tape.val(with_extras.layers[l].logits);
    const Tensor& ba = g.tape.val(alone.layers[l].boxes_cxcywh);
    const Tensor& bx = g2.tape.val(with_extras.layers[l].boxes_cxcywh);
    for (int i = 0; i < nb; ++i) {
      for (int c = 0; c < 5; ++c) CHECK(near(la.at(i, c), lb.at(i, c), 1e-9));
      for (int c = 0; c < 4; ++c) CHECK(near(ba.at(i, c), bx.at(i, c), 1e-9));
    }
  }
}
