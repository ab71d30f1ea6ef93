#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "docdet/assignment.hpp"
#include "docdet/backbone.hpp"
#include "docdet/criterion.hpp"
#include "docdet/transformer.hpp"

using namespace docdet;
using namespace docdet::nn;

namespace {

TransformerConfig small_cfg() {
  TransformerConfig cfg;
  cfg.dim = 32;
  cfg.heads = 4;
  cfg.points = 2;
  cfg.enc_layers = 1;
  cfg.dec_layers = 2;
  cfg.ffn_dim = 64;
  cfg.num_queries = 20;
  return cfg;
}

// [dim, h, w] maps mimicking a pyramid for a square page of the given side
std::vector<Tape::Id> fake_levels(Graph& g, int dim, int side, Rng& rng) {
  std::vector<Tape::Id> out;
  for (int s : {4, 8, 16, 32, 64})
    out.push_back(g.tape.constant(Tensor::randn({dim, (side + s - 1) / s, (side + s - 1) / s},
                                                rng, 0.3)));
  return out;
}

bool near(double a, double b, double tol) { return std::abs(a - b) <= tol; }

}  // namespace

TEST_CASE("flattened memory covers every pyramid cell") {
  TransformerConfig cfg = small_cfg();
  cfg.enc_layers = 0;
  ParamStore ps;
  Rng rng(3);
  Transformer tr(ps, "det", cfg, 5, rng);
  Graph g(ps);
  auto levels = fake_levels(g, cfg.dim, 256, rng);
  EncoderMemory mem = tr.encode(g, levels);

  CHECK(mem.grid.total() == 64 * 64 + 32 * 32 + 16 * 16 + 8 * 8 + 4 * 4);
  CHECK(mem.grid.total() == 5456);
  CHECK(mem.grid.num_levels() == 5);
  CHECK(g.tape.val(mem.tokens).rows() == 5456);
  CHECK(g.tape.val(mem.tokens).cols() == cfg.dim);
  CHECK(mem.anchors.size() == 5456);

  // zero encoder layers: tokens are exactly the flattened inputs
  for (int l = 0; l < 5; ++l) {
    const Tensor& src = g.tape.val(levels[static_cast<size_t>(l)]);
    const auto& lev = mem.grid.levels[static_cast<size_t>(l)];
    for (int y = 0; y < lev.h; y += 7)
      for (int x = 0; x < lev.w; x += 5)
        for (int c = 0; c < cfg.dim; c += 9) {
          int row = lev.start + y * lev.w + x;
          CHECK(g.tape.val(mem.tokens).at(row, c) == src.v[(c * lev.h + y) * lev.w + x]);
        }
  }

  // anchors are the cell centers of their level
  const auto& l1 = mem.grid.levels[1];
  CHECK(mem.anchors[static_cast<size_t>(l1.start + 2 * l1.w + 3)][0] ==
        doctest::Approx((3 + 0.5) / l1.w).epsilon(1e-12));
  CHECK(mem.anchors[static_cast<size_t>(l1.start + 2 * l1.w + 3)][1] ==
        doctest::Approx((2 + 0.5) / l1.h).epsilon(1e-12));
}

TEST_CASE("encoding is deterministic and rejects malformed pyramids") {
  TransformerConfig cfg = small_cfg();
  ParamStore ps;
  Rng rng(4);
  Transformer tr(ps, "det", cfg, 5, rng);

  Rng fixed(9);
  Graph g1(ps);
  EncoderMemory m1 = tr.encode(g1, fake_levels(g1, cfg.dim, 64, fixed));
  Rng fixed2(9);
  Graph g2(ps);
  EncoderMemory m2 = tr.encode(g2, fake_levels(g2, cfg.dim, 64, fixed2));
  REQUIRE(g1.tape.val(m1.tokens).numel() == g2.tape.val(m2.tokens).numel());
  for (int64_t i = 0; i < g1.tape.val(m1.tokens).numel(); ++i)
    CHECK(g1.tape.val(m1.tokens).v[i] == g2.tape.val(m2.tokens).v[i]);

  Graph g3(ps);
  auto four = fake_levels(g3, cfg.dim, 64, rng);
  four.pop_back();
  CHECK_THROWS_AS(tr.encode(g3, four), std::invalid_argument);
  Graph g4(ps);
  auto wrong_dim = fake_levels(g4, cfg.dim, 64, rng);
  wrong_dim[0] = g4.tape.constant(Tensor::randn({cfg.dim + 4, 16, 16}, rng, 0.1));
  CHECK_THROWS_AS(tr.encode(g4, wrong_dim), std::invalid_argument);
}

TEST_CASE("zero offsets sample each token's own reference point") {
  // with offsets forced to zero the sampling locations equal the tiled
  // reference centers, so deformable attention reduces to interpolation at
  // those points -- at exact cell centers that is the cell value itself
  LevelGrid grid = LevelGrid::from_shapes({{2, 2}});
  const int heads = 2, points = 2, m = heads * points;
  std::vector<std::array<double, 2>> refs;
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) refs.push_back({(x + 0.5) / 2, (y + 0.5) / 2});

  Tensor zero_off({4, 2 * m});
  Tensor scale_row = level_cell_scale_row(grid, heads, points);
  CHECK(scale_row.numel() == 2 * m);
  CHECK(scale_row.v[0] == 0.5);

  Tape t;
  auto off = t.constant(zero_off);
  auto locs = t.add(t.mul_rowvec(off, t.constant(scale_row)),
                    t.constant(tile_reference_xy(refs, m)));
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < m; ++j) {
      CHECK(t.val(locs).at(i, 2 * j) == refs[static_cast<size_t>(i)][0]);
      CHECK(t.val(locs).at(i, 2 * j + 1) == refs[static_cast<size_t>(i)][1]);
    }

  Rng rng(5);
  Tensor value = Tensor::randn({4, 8}, rng, 1.0);
  auto weights = t.constant(Tensor::full({4, m}, 1.0 / points));  // uniform per head
  auto out = t.ms_deform_attn(t.constant(value), locs, weights, grid, heads, points);
  for (int i = 0; i < 4; ++i)
    for (int c = 0; c < 8; ++c) CHECK(t.val(out).at(i, c) == value.at(i, c));
}

TEST_CASE("proposals come back score-sorted from valid anchors") {
  TransformerConfig cfg = small_cfg();
  ParamStore ps;
  Rng rng(11);
  Transformer tr(ps, "det", cfg, 5, rng);
  Graph g(ps);
  EncoderMemory mem = tr.encode(g, fake_levels(g, cfg.dim, 64, rng));
  REQUIRE(mem.grid.total() == 16 * 16 + 8 * 8 + 4 * 4 + 2 * 2 + 1);

  Proposals pr = tr.propose(g, mem, 10);
  REQUIRE(pr.boxes.size() == 10);
  REQUIRE(pr.scores.size() == 10);
  REQUIRE(pr.token_index.size() == 10);
  for (size_t i = 1; i < pr.scores.size(); ++i) CHECK(pr.scores[i - 1] > pr.scores[i]);
  for (const auto& b : pr.boxes) {
    CHECK(b[2] > 0.0);
    CHECK(b[3] > 0.0);
    Box corner = box_from_cxcywh(b[0], b[1], b[2], b[3]);
    CHECK(box_ordered(corner));
  }
  CHECK(g.tape.val(pr.topk_logits).rows() == 10);
  CHECK(g.tape.val(pr.topk_boxes).rows() == 10);

  // the box head starts zeroed, so proposals sit exactly on their anchors
  for (size_t i = 0; i < pr.boxes.size(); ++i) {
    const auto& anchor = mem.anchors[static_cast<size_t>(pr.token_index[i])];
    for (int c = 0; c < 4; ++c) CHECK(near(pr.boxes[i][c], anchor[c], 1e-12));
  }

  CHECK_THROWS_AS(tr.propose(g, mem, 0), std::invalid_argument);
  CHECK_THROWS_AS(tr.propose(g, mem, -3), std::invalid_argument);
  CHECK_THROWS_AS(tr.propose(g, mem, mem.grid.total() + 1), std::invalid_argument);
  CHECK(tr.propose(g, mem, mem.grid.total()).boxes.size() ==
        static_cast<size_t>(mem.grid.total()));
}

TEST_CASE("denoising slots count two per ground truth per group") {
  TransformerConfig cfg = small_cfg();
  cfg.num_queries = 100;
  cfg.dn_groups = 3;
  ParamStore ps;
  Rng rng(13);
  Transformer tr(ps, "det", cfg, 5, rng);
  Graph g(ps);

  std::vector<LabeledBox> gts = {{{0.1, 0.1, 0.4, 0.3}, 2}, {{0.5, 0.5, 0.9, 0.8}, 0}};
  Rng noise(21);
  DnQueries dn = tr.build_dn_queries(g, gts, noise);
  CHECK(dn.groups == 3);
  CHECK(dn.group_size == 4);
  REQUIRE(dn.boxes.size() == 12);
  REQUIRE(dn.targets.size() == 12);
  CHECK(g.tape.val(dn.content).rows() == 12);
  CHECK(g.tape.val(dn.content).cols() == cfg.dim);

  for (int grp = 0; grp < 3; ++grp)
    for (int i = 0; i < 2; ++i) {
      const auto& pos = dn.targets[static_cast<size_t>(grp * 4 + i)];
      const auto& neg = dn.targets[static_cast<size_t>(grp * 4 + 2 + i)];
      CHECK(pos.positive);
      CHECK(pos.gt_index == i);
      CHECK(pos.quality > 0.0);
      CHECK(pos.quality <= 1.0);
      CHECK_FALSE(neg.positive);
      CHECK(neg.gt_index == i);
    }
  for (const auto& b : dn.boxes) {
    CHECK(b[2] > 0.0);
    CHECK(b[3] > 0.0);
  }

  // same noise stream, same slots
  Rng noise2(21);
  DnQueries again = tr.build_dn_queries(g, gts, noise2);
  for (size_t i = 0; i < dn.boxes.size(); ++i)
    for (int c = 0; c < 4; ++c) CHECK(dn.boxes[i][c] == again.boxes[i][c]);

  Rng noise3(22);
  DnQueries empty = tr.build_dn_queries(g, {}, noise3);
  CHECK(empty.groups == 0);
  CHECK(empty.boxes.empty());
  CHECK(empty.content == Tape::kNone);
  CHECK(build_attention_mask(10, empty.groups, empty.group_size).rows() == 10);
}

TEST_CASE("zero box noise leaves positive slots on the ground truth") {
  TransformerConfig cfg = small_cfg();
  cfg.dn_box_noise = 0.0;
  cfg.dn_label_noise = 0.0;
  ParamStore ps;
  Rng rng(17);
  Transformer tr(ps, "det", cfg, 5, rng);
  Graph g(ps);

  std::vector<LabeledBox> gts = {{{0.2, 0.25, 0.6, 0.45}, 1}, {{0.05, 0.6, 0.3, 0.9}, 3}};
  Rng noise(7);
  DnQueries dn = tr.build_dn_queries(g, gts, noise);
  for (int grp = 0; grp < dn.groups; ++grp)
    for (int i = 0; i < 2; ++i) {
      auto want = box_to_cxcywh(gts[static_cast<size_t>(i)].box);
      const auto& got = dn.boxes[static_cast<size_t>(grp * dn.group_size + i)];
      for (int c = 0; c < 4; ++c) CHECK(got[static_cast<size_t>(c)] == want[static_cast<size_t>(c)]);
      CHECK(dn.targets[static_cast<size_t>(grp * dn.group_size + i)].quality ==
            doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("attention mask isolates denoising groups from everything else") {
  Tensor mask = build_attention_mask(5, 2, 4);
  REQUIRE(mask.rows() == 13);
  REQUIRE(mask.cols() == 13);
  auto blocked = [&](int r, int c) { return mask.at(r, c) == Tape::kMaskNegInf; };
  auto open = [&](int r, int c) { return mask.at(r, c) == 0.0; };

  for (int r = 0; r < 5; ++r) {
    for (int c = 0; c < 5; ++c) CHECK(open(r, c));
    for (int c = 5; c < 13; ++c) CHECK(blocked(r, c));  // matching never sees dn
  }
  for (int r = 5; r < 13; ++r)
    for (int c = 0; c < 5; ++c) CHECK(blocked(r, c));  // dn never sees matching
  for (int r = 5; r < 9; ++r) {
    for (int c = 5; c < 9; ++c) CHECK(open(r, c));      // within group
    for (int c = 9; c < 13; ++c) CHECK(blocked(r, c));  // across groups
  }
  for (int r = 9; r < 13; ++r)
    for (int c = 5; c < 9; ++c) CHECK(blocked(r, c));

  CHECK(build_attention_mask(3, 0, 0).numel() == 9);
  CHECK_THROWS_AS(build_attention_mask(-1, 0, 0), std::invalid_argument);
}

TEST_CASE("decoding keeps slot order and layer count") {
  TransformerConfig cfg = small_cfg();
  ParamStore ps;
  Rng rng(23);
  Transformer tr(ps, "det", cfg, 7, rng);
  Graph g(ps);
  EncoderMemory mem = tr.encode(g, fake_levels(g, cfg.dim, 64, rng));

  const int s = 6;
  Tape::Id content = g.tape.constant(Tensor::randn({s, cfg.dim}, rng, 0.5));
  std::vector<std::array<double, 4>> boxes;
  for (int i = 0; i < s; ++i) boxes.push_back({0.1 + 0.1 * i, 0.3, 0.15, 0.2});

  DecodeOutput out = tr.decode(g, mem, content, boxes, Tensor({0}));
  REQUIRE(out.layers.size() == 2);
  for (const auto& layer : out.layers) {
    CHECK(g.tape.val(layer.logits).rows() == s);
    CHECK(g.tape.val(layer.logits).cols() == 7);
    CHECK(g.tape.val(layer.boxes_cxcywh).rows() == s);
    CHECK(g.tape.val(layer.boxes_cxcywh).cols() == 4);
  }
  const Tensor& last = g.tape.val(out.layers.back().boxes_cxcywh);
  for (int i = 0; i < s; ++i)
    for (int c = 0; c < 4; ++c) CHECK(out.final_boxes[static_cast<size_t>(i)][static_cast<size_t>(c)] == last.at(i, c));

  // slot/mask mismatches refused
  Tensor bad_mask({s + 1, s + 1});
  CHECK_THROWS_AS(tr.decode(g, mem, content, boxes, bad_mask), std::invalid_argument);
  std::vector<std::array<double, 4>> short_boxes(boxes.begin(), boxes.end() - 1);
  CHECK_THROWS_AS(tr.decode(g, mem, content, short_boxes, Tensor({0})), std::invalid_argument);
}

TEST_CASE("freshly built refinement head leaves boxes in place") {
  TransformerConfig cfg = small_cfg();
  cfg.dec_layers = 3;
  ParamStore ps;
  Rng rng(29);
  Transformer tr(ps, "det", cfg, 5, rng);
  Graph g(ps);
  EncoderMemory mem = tr.encode(g, fake_levels(g, cfg.dim, 64, rng));

  std::vector<std::array<double, 4>> boxes = {
      {0.2, 0.3, 0.1, 0.15}, {0.7, 0.6, 0.3, 0.25}, {0.5, 0.5, 0.9, 0.9}};
  Tape::Id content = g.tape.constant(Tensor::randn({3, cfg.dim}, rng, 0.5));
  DecodeOutput out = tr.decode(g, mem, content, boxes, Tensor({0}));
  for (const auto& layer : out.layers) {
    const Tensor& bv = g.tape.val(layer.boxes_cxcywh);
    for (int i = 0; i < 3; ++i)
      for (int c = 0; c < 4; ++c)
        CHECK(near(bv.at(i, c), boxes[static_cast<size_t>(i)][static_cast<size_t>(c)], 1e-12));
  }
}

TEST_CASE("an all-permissive mask decodes bit-identically to no mask") {
  TransformerConfig cfg = small_cfg();
  ParamStore ps;
  Rng rng(31);
  Transformer tr(ps, "det", cfg, 5, rng);
  Graph g(ps);
  EncoderMemory mem = tr.encode(g, fake_levels(g, cfg.dim, 64, rng));

  const int s = 5;
  Tensor content_t = Tensor::randn({s, cfg.dim}, rng, 0.5);
  std::vector<std::array<double, 4>> boxes;
  for (int i = 0; i < s; ++i) boxes.push_back({0.15 * (i + 1), 0.4, 0.2, 0.3});

  DecodeOutput masked =
      tr.decode(g, mem, g.tape.constant(content_t), boxes, Tensor({s, s}));
  DecodeOutput plain = tr.decode(g, mem, g.tape.constant(content_t), boxes, Tensor({0}));
  for (size_t l = 0; l < masked.layers.size(); ++l) {
    const Tensor& a = g.tape.val(masked.layers[l].logits);
    const Tensor& b = g.tape.val(plain.layers[l].logits);
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.v[i] == b.v[i]);
    const Tensor& ba = g.tape.val(masked.layers[l].boxes_cxcywh);
    const Tensor& bb = g.tape.val(plain.layers[l].boxes_cxcywh);
    for (int64_t i = 0; i < ba.numel(); ++i) CHECK(ba.v[i] == bb.v[i]);
  }
}

TEST_CASE("slots behind the mask never leak into other slots") {
  TransformerConfig cfg = small_cfg();
  ParamStore ps;
  Rng rng(37);
  Transformer tr(ps, "det", cfg, 5, rng);
  Graph g(ps);
  EncoderMemory mem = tr.encode(g, fake_levels(g, cfg.dim, 64, rng));

  // 3 matching slots + 2 dn groups of 2: perturbing the matching content must
  // leave every dn row unchanged, and vice versa
  Tensor mask = build_attention_mask(3, 2, 2);
  const int s = 7;
  Tensor base = Tensor::randn({s, cfg.dim}, rng, 0.5);
  Tensor poked = base;
  for (int c = 0; c < cfg.dim; ++c) {
    poked.at(0, c) += 1.5;
    poked.at(2, c) -= 0.7;
  }
  std::vector<std::array<double, 4>> boxes;
  for (int i = 0; i < s; ++i) boxes.push_back({0.1 + 0.1 * i, 0.5, 0.12, 0.2});

  DecodeOutput a = tr.decode(g, mem, g.tape.constant(base), boxes, mask);
  DecodeOutput b = tr.decode(g, mem, g.tape.constant(poked), boxes, mask);
  for (size_t l = 0; l < a.layers.size(); ++l) {
    const Tensor& la = g.tape.val(a.layers[l].logits);
    const Tensor& lb = g.tape.val(b.layers[l].logits);
    for (int r = 3; r < s; ++r)
      for (int c = 0; c < 5; ++c) CHECK(la.at(r, c) == lb.at(r, c));
    for (int c = 0; c < 5; ++c) CHECK(la.at(0, c) != lb.at(0, c));
  }

  // group 1 must not react to group 0 changes either
  Tensor poked_dn = base;
  for (int c = 0; c < cfg.dim; ++c) poked_dn.at(3, c) += 2.0;
  DecodeOutput cshift = tr.decode(g, mem, g.tape.constant(poked_dn), boxes, mask);
  for (size_t l = 0; l < a.layers.size(); ++l) {
    const Tensor& la = g.tape.val(a.layers[l].logits);
    const Tensor& lc = g.tape.val(cshift.layers[l].logits);
    for (int r = 5; r < 7; ++r)
      for (int c = 0; c < 5; ++c) CHECK(la.at(r, c) == lc.at(r, c));
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 5; ++c) CHECK(la.at(r, c) == lc.at(r, c));
  }
}

TEST_CASE("permuting slots permutes the outputs with them") {
  TransformerConfig cfg = small_cfg();
  ParamStore ps;
  Rng rng(41);
  Transformer tr(ps, "det", cfg, 6, rng);
  Graph g(ps);
  EncoderMemory mem = tr.encode(g, fake_levels(g, cfg.dim, 64, rng));

  const int s = 5;
  Tensor content_t = Tensor::randn({s, cfg.dim}, rng, 0.5);
  std::vector<std::array<double, 4>> boxes;
  for (int i = 0; i < s; ++i)
    boxes.push_back({0.1 + 0.17 * i, 0.25 + 0.1 * i, 0.1 + 0.02 * i, 0.2});

  const std::vector<int> perm = {3, 0, 4, 1, 2};
  Tensor perm_content({s, cfg.dim});
  std::vector<std::array<double, 4>> perm_boxes(static_cast<size_t>(s));
  for (int i = 0; i < s; ++i) {
    perm_boxes[static_cast<size_t>(i)] = boxes[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    for (int c = 0; c < cfg.dim; ++c)
      perm_content.at(i, c) = content_t.at(perm[static_cast<size_t>(i)], c);
  }

  DecodeOutput base = tr.decode(g, mem, g.tape.constant(content_t), boxes, Tensor({0}));
  DecodeOutput shuffled =
      tr.decode(g, mem, g.tape.constant(perm_content), perm_boxes, Tensor({0}));
  for (size_t l = 0; l < base.layers.size(); ++l) {
    const Tensor& lb = g.tape.val(base.layers[l].logits);
    const Tensor& ls = g.tape.val(shuffled.layers[l].logits);
    const Tensor& bb = g.tape.val(base.layers[l].boxes_cxcywh);
    const Tensor& bs = g.tape.val(shuffled.layers[l].boxes_cxcywh);
    for (int i = 0; i < s; ++i) {
      for (int c = 0; c < 6; ++c)
        CHECK(near(ls.at(i, c), lb.at(perm[static_cast<size_t>(i)], c), 1e-9));
      for (int c = 0; c < 4; ++c)
        CHECK(near(bs.at(i, c), bb.at(perm[static_cast<size_t>(i)], c), 1e-9));
    }
  }
}

TEST_CASE("the loss gradient reaches the backbone through the full stack") {
  TransformerConfig cfg = small_cfg();
  ParamStore ps;
  Rng rng(43);
  Backbone bb(ps, "bb", cfg.dim, rng);
  Transformer tr(ps, "det", cfg, 5, rng);
  int first_bb_param = ps.find("bb.stem1.w");
  REQUIRE(first_bb_param >= 0);

  Graph g(ps);
  Backbone::Output feats = bb.apply(g, Tensor::randn({3, 64, 64}, rng, 0.2));
  EncoderMemory mem = tr.encode(g, feats.levels);
  Proposals pr = tr.propose(g, mem, 8);
  Tape::Id content = g.tape.constant(Tensor::randn({8, cfg.dim}, rng, 0.5));
  DecodeOutput out = tr.decode(g, mem, content, pr.boxes, Tensor({0}));

  std::vector<LabeledBox> gts = {{{0.1, 0.2, 0.5, 0.6}, 1}, {{0.6, 0.1, 0.9, 0.4}, 3}};
  std::vector<Detection> dets;
  const Tensor& lv = g.tape.val(out.layers.back().logits);
  const Tensor& bv = g.tape.val(out.layers.back().boxes_cxcywh);
  for (int i = 0; i < 8; ++i) {
    Detection d;
    d.box = box_from_cxcywh(bv.at(i, 0), bv.at(i, 1), bv.at(i, 2), bv.at(i, 3));
    for (int c = 0; c < 5; ++c) d.class_scores.push_back(1.0 / (1.0 + std::exp(-lv.at(i, c))));
    d.query_index = i;
    dets.push_back(d);
  }
  MatchResult match = hungarian(cost_matrix(dets, gts, {}));
  attach_quality(match, [&] {
    std::vector<Box> bs;
    for (const auto& d : dets) bs.push_back(d.box);
    return bs;
  }(), gts);

  LossNodes nodes = compute_loss(g.tape, out.layers, 8, gts, Regime::one_to_one, match, {});
  g.tape.backward(nodes.total);
  std::vector<Tensor> grads = g.grads();
  double mag = 0;
  for (int64_t i = 0; i < grads[static_cast<size_t>(first_bb_param)].numel(); ++i)
    mag += std::abs(grads[static_cast<size_t>(first_bb_param)].v[i]);
  CHECK(mag > 0.0);
  CHECK(std::isfinite(mag));
}
