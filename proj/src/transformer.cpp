#include "docdet/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace docdet::nn {

namespace {

constexpr double kBoxEps = 1e-6;

double inv_sigmoid(double p) {
  p = std::clamp(p, kBoxEps, 1.0 - kBoxEps);
  return std::log(p / (1.0 - p));
}

Tensor invsig_tensor(const std::vector<std::array<double, 4>>& boxes) {
  Tensor t({static_cast<int>(boxes.size()), 4});
  for (size_t i = 0; i < boxes.size(); ++i)
    for (int c = 0; c < 4; ++c) t.at(static_cast<int>(i), c) = inv_sigmoid(boxes[i][c]);
  return t;
}

std::vector<std::array<double, 2>> box_centers(const std::vector<std::array<double, 4>>& boxes) {
  std::vector<std::array<double, 2>> c(boxes.size());
  for (size_t i = 0; i < boxes.size(); ++i) c[i] = {boxes[i][0], boxes[i][1]};
  return c;
}

// softmax over each head's contiguous column block
Tape::Id headwise_softmax(Graph& g, Tape::Id raw, int heads) {
  int per = g.tape.val(raw).cols() / heads;
  std::vector<Tape::Id> parts;
  parts.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h)
    parts.push_back(g.tape.softmax_rows(g.tape.slice_cols(raw, h * per, (h + 1) * per)));
  return heads == 1 ? parts[0] : g.tape.concat_cols(parts);
}

void zero_param(ParamStore& s, const std::string& name) {
  Tensor& v = s.at(s.find(name)).value;
  std::fill(v.v.data(), v.v.data() + v.numel(), 0.0);
}

// offset predictor: zero weights, biases fanning each head outward with
// radius growing per point, so initial samples spread instead of collapsing
void init_offset_linear(ParamStore& s, const std::string& name, int heads, int levels,
                        int points) {
  zero_param(s, name + ".w");
  Tensor& b = s.at(s.find(name + ".b")).value;
  for (int h = 0; h < heads; ++h) {
    double ang = 2.0 * M_PI * h / heads;
    for (int l = 0; l < levels; ++l)
      for (int p = 0; p < points; ++p) {
        int m = (h * levels + l) * points + p;
        b.v[2 * m] = std::cos(ang) * (p + 1);
        b.v[2 * m + 1] = std::sin(ang) * (p + 1);
      }
  }
}

}  // namespace

Tensor build_attention_mask(int n_matching, int dn_groups, int dn_group_size) {
  if (n_matching < 0 || dn_groups < 0 || dn_group_size < 0)
    throw std::invalid_argument("build_attention_mask: negative sizes");
  int n_dn = dn_groups * dn_group_size;
  int s = n_matching + n_dn;
  Tensor mask({s, s});
  auto block = [&](int r0, int r1, int c0, int c1) {
    for (int r = r0; r < r1; ++r)
      for (int c = c0; c < c1; ++c) mask.at(r, c) = Tape::kMaskNegInf;
  };
  block(0, n_matching, n_matching, s);  // matching slots never see dn slots
  block(n_matching, s, 0, n_matching);  // and dn slots never see matching ones
  for (int a = 0; a < dn_groups; ++a)
    for (int b = 0; b < dn_groups; ++b) {
      if (a == b) continue;
      block(n_matching + a * dn_group_size, n_matching + (a + 1) * dn_group_size,
            n_matching + b * dn_group_size, n_matching + (b + 1) * dn_group_size);
    }
  return mask;
}

Tensor sine_xy_embedding(const std::vector<std::array<double, 2>>& xy, int dim) {
  if (dim % 4 != 0) throw std::invalid_argument("sine_xy_embedding: dim % 4 != 0");
  int half = dim / 2;
  Tensor out({static_cast<int>(xy.size()), dim});
  for (size_t i = 0; i < xy.size(); ++i)
    for (int c = 0; c < 2; ++c) {
      double pos = xy[i][c] * 2.0 * M_PI;
      for (int k = 0; k < half / 2; ++k) {
        double freq = std::pow(10000.0, 2.0 * k / half);
        out.at(static_cast<int>(i), c * half + 2 * k) = std::sin(pos / freq);
        out.at(static_cast<int>(i), c * half + 2 * k + 1) = std::cos(pos / freq);
      }
    }
  return out;
}

Tensor tile_reference_xy(const std::vector<std::array<double, 2>>& refs, int m) {
  Tensor out({static_cast<int>(refs.size()), 2 * m});
  for (size_t i = 0; i < refs.size(); ++i)
    for (int j = 0; j < m; ++j) {
      out.at(static_cast<int>(i), 2 * j) = refs[i][0];
      out.at(static_cast<int>(i), 2 * j + 1) = refs[i][1];
    }
  return out;
}

Tensor level_cell_scale_row(const LevelGrid& grid, int heads, int points) {
  int nlev = grid.num_levels();
  Tensor out({2 * heads * nlev * points});
  for (int h = 0; h < heads; ++h)
    for (int l = 0; l < nlev; ++l)
      for (int p = 0; p < points; ++p) {
        int m = (h * nlev + l) * points + p;
        out.v[2 * m] = 1.0 / grid.levels[static_cast<size_t>(l)].w;
        out.v[2 * m + 1] = 1.0 / grid.levels[static_cast<size_t>(l)].h;
      }
  return out;
}

Transformer::Transformer(ParamStore& s, const std::string& name, const TransformerConfig& cfg,
                         int num_classes, Rng& rng)
    : cfg_(cfg), num_classes_(num_classes) {
  if (cfg.dim <= 0 || cfg.dim % cfg.heads != 0)
    throw std::invalid_argument("Transformer: dim must be divisible by heads");
  if (cfg.dim % 4 != 0) throw std::invalid_argument("Transformer: dim % 4 != 0");
  if (num_classes <= 0) throw std::invalid_argument("Transformer: num_classes <= 0");
  int d = cfg.dim, m = cfg.heads * cfg.levels * cfg.points;

  level_embed_ = s.create(name + ".level_embed", {cfg.levels, d});
  s.at(level_embed_).value = Tensor::randn({cfg.levels, d}, rng, 0.02);
  dn_embed_ = s.create(name + ".dn_embed", {num_classes, d});
  s.at(dn_embed_).value = Tensor::randn({num_classes, d}, rng, 0.02);

  auto make_block = [&](const std::string& p) {
    DeformBlock b;
    b.off = Linear(s, p + ".off", d, 2 * m, rng);
    b.wts = Linear(s, p + ".wts", d, m, rng);
    b.value = Linear(s, p + ".value", d, d, rng);
    b.out = Linear(s, p + ".out", d, d, rng);
    init_offset_linear(s, p + ".off", cfg.heads, cfg.levels, cfg.points);
    zero_param(s, p + ".wts.w");  // uniform sampling weights at init
    zero_param(s, p + ".wts.b");
    return b;
  };

  for (int i = 0; i < cfg.enc_layers; ++i) {
    std::string p = name + ".enc" + std::to_string(i);
    EncLayer l;
    l.attn = make_block(p + ".attn");
    l.ff1 = Linear(s, p + ".ff1", d, cfg.ffn_dim, rng);
    l.ff2 = Linear(s, p + ".ff2", cfg.ffn_dim, d, rng);
    l.n1 = LayerNorm(s, p + ".n1", d);
    l.n2 = LayerNorm(s, p + ".n2", d);
    enc_.push_back(std::move(l));
  }
  for (int i = 0; i < cfg.dec_layers; ++i) {
    std::string p = name + ".dec" + std::to_string(i);
    DecLayer l;
    l.self_attn = MultiHeadAttention(s, p + ".self", d, cfg.heads, rng);
    l.cross = make_block(p + ".cross");
    l.ff1 = Linear(s, p + ".ff1", d, cfg.ffn_dim, rng);
    l.ff2 = Linear(s, p + ".ff2", cfg.ffn_dim, d, rng);
    l.n1 = LayerNorm(s, p + ".n1", d);
    l.n2 = LayerNorm(s, p + ".n2", d);
    l.n3 = LayerNorm(s, p + ".n3", d);
    dec_.push_back(std::move(l));
  }

  cls_head_ = Linear(s, name + ".cls", d, num_classes, rng);
  box_head_ = Mlp(s, name + ".box", {d, d, 4}, rng);
  zero_param(s, name + ".box.fc1.w");  // refinement starts at identity
  zero_param(s, name + ".box.fc1.b");
  enc_score_ = Linear(s, name + ".enc_score", d, 1, rng);
  enc_box_ = Mlp(s, name + ".enc_box", {d, d, 4}, rng);
  zero_param(s, name + ".enc_box.fc1.w");  // proposals start at the anchors
  zero_param(s, name + ".enc_box.fc1.b");
}

Tape::Id Transformer::deform_attend(Graph& g, const DeformBlock& b, Tape::Id query, Tape::Id src,
                                    Tape::Id scale, Tape::Id ref_tile,
                                    const LevelGrid& grid) const {
  Tape& t = g.tape;
  Tape::Id off = b.off.apply(g, query);
  Tape::Id locs = t.add(t.mul(off, scale), ref_tile);
  Tape::Id wts = headwise_softmax(g, b.wts.apply(g, query), cfg_.heads);
  Tape::Id sampled = t.ms_deform_attn(b.value.apply(g, src), locs, wts, grid, cfg_.heads,
                                      cfg_.points);
  return b.out.apply(g, sampled);
}

EncoderMemory Transformer::encode(Graph& g, const std::vector<Tape::Id>& levels) const {
  Tape& t = g.tape;
  if (static_cast<int>(levels.size()) != cfg_.levels)
    throw std::invalid_argument("encode: expected " + std::to_string(cfg_.levels) + " levels");

  std::vector<std::pair<int, int>> shapes;
  std::vector<Tape::Id> parts;
  for (Tape::Id lvl : levels) {
    const Tensor& v = t.val(lvl);
    if (v.rank() != 3 || v.dim(0) != cfg_.dim)
      throw std::invalid_argument("encode: level shape mismatch: " + v.shape_str());
    shapes.emplace_back(v.dim(1), v.dim(2));
    parts.push_back(t.transpose(t.reshape(lvl, {cfg_.dim, v.dim(1) * v.dim(2)})));
  }
  EncoderMemory mem;
  mem.grid = LevelGrid::from_shapes(shapes);
  mem.tokens = t.concat_rows(parts);

  int total = mem.grid.total();
  std::vector<std::array<double, 2>> centers(static_cast<size_t>(total));
  std::vector<int> token_level(static_cast<size_t>(total));
  mem.anchors.resize(static_cast<size_t>(total));
  for (int l = 0; l < mem.grid.num_levels(); ++l) {
    const auto& lev = mem.grid.levels[static_cast<size_t>(l)];
    double wh = std::min(1.0, 0.05 * std::pow(2.0, l));
    for (int y = 0; y < lev.h; ++y)
      for (int x = 0; x < lev.w; ++x) {
        int i = lev.start + y * lev.w + x;
        centers[static_cast<size_t>(i)] = {(x + 0.5) / lev.w, (y + 0.5) / lev.h};
        token_level[static_cast<size_t>(i)] = l;
        mem.anchors[static_cast<size_t>(i)] = {(x + 0.5) / lev.w, (y + 0.5) / lev.h, wh, wh};
      }
  }
  if (enc_.empty()) return mem;

  int m = cfg_.heads * cfg_.levels * cfg_.points;
  Tape::Id pos = t.add(t.constant(sine_xy_embedding(centers, cfg_.dim)),
                       t.gather_rows(g.p(level_embed_), token_level));
  Tensor scale_full({total, 2 * m});
  Tensor scale_row = level_cell_scale_row(mem.grid, cfg_.heads, cfg_.points);
  for (int i = 0; i < total; ++i)
    for (int j = 0; j < 2 * m; ++j) scale_full.at(i, j) = scale_row.v[j];
  Tape::Id scale = t.constant(std::move(scale_full));
  Tape::Id ref_tile = t.constant(tile_reference_xy(centers, m));

  Tape::Id x = mem.tokens;
  for (const EncLayer& l : enc_) {
    Tape::Id q = t.add(x, pos);
    x = l.n1.apply(g, t.add(x, deform_attend(g, l.attn, q, x, scale, ref_tile, mem.grid)));
    x = l.n2.apply(g, t.add(x, l.ff2.apply(g, t.relu(l.ff1.apply(g, x)))));
  }
  mem.tokens = x;
  return mem;
}

Proposals Transformer::propose(Graph& g, const EncoderMemory& mem, int k) const {
  Tape& t = g.tape;
  int total = mem.grid.total();
  if (k <= 0) throw std::invalid_argument("propose: k must be positive");
  if (k > total) throw std::invalid_argument("propose: k exceeds token count");

  Tape::Id logits = enc_score_.apply(g, mem.tokens);
  Tape::Id boxes = t.sigmoid(
      t.add(enc_box_.apply(g, mem.tokens), t.constant(invsig_tensor(mem.anchors))));

  const Tensor& lv = t.val(logits);
  std::vector<int> order(static_cast<size_t>(total));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return lv.v[a] > lv.v[b]; });
  order.resize(static_cast<size_t>(k));

  Proposals out;
  out.token_index = order;
  const Tensor& bv = t.val(boxes);
  for (int i : order) {
    out.scores.push_back(1.0 / (1.0 + std::exp(-lv.v[i])));
    out.boxes.push_back({bv.at(i, 0), bv.at(i, 1), bv.at(i, 2), bv.at(i, 3)});
  }
  out.topk_logits = t.gather_rows(logits, order);
  out.topk_boxes = t.gather_rows(boxes, order);
  return out;
}

DnQueries Transformer::build_dn_queries(Graph& g, const std::vector<LabeledBox>& gts,
                                        Rng& rng) const {
  DnQueries out;
  int n = static_cast<int>(gts.size());
  if (n == 0) return out;
  out.groups = std::min(cfg_.dn_groups, std::max(1, cfg_.num_queries / (2 * n)));
  out.group_size = 2 * n;

  auto jitter = [&](const Box& b, double scale) {
    auto [cx, cy, w, h] = box_to_cxcywh(b);
    cx = std::clamp(cx + rng.uniform(-1.0, 1.0) * scale * w / 2.0, 0.0, 1.0);
    cy = std::clamp(cy + rng.uniform(-1.0, 1.0) * scale * h / 2.0, 0.0, 1.0);
    w = std::clamp(w * (1.0 + rng.uniform(-1.0, 1.0) * scale), 1e-4, 1.0);
    h = std::clamp(h * (1.0 + rng.uniform(-1.0, 1.0) * scale), 1e-4, 1.0);
    return std::array<double, 4>{cx, cy, w, h};
  };
  auto noisy_label = [&](int label) {
    if (num_classes_ > 1 && rng.uniform(0.0, 1.0) < cfg_.dn_label_noise) {
      int other = rng.uniform_int(0, num_classes_ - 2);
      return other >= label ? other + 1 : other;
    }
    return label;
  };

  std::vector<int> labels;
  for (int grp = 0; grp < out.groups; ++grp) {
    for (int i = 0; i < n; ++i) {  // positive slots: recoverable jitter
      double s = cfg_.dn_box_noise * rng.uniform(0.0, 1.0);
      auto bx = jitter(gts[static_cast<size_t>(i)].box, s);
      labels.push_back(noisy_label(gts[static_cast<size_t>(i)].category));
      Box corner = box_from_cxcywh(bx[0], bx[1], bx[2], bx[3]);
      out.boxes.push_back(bx);
      out.targets.push_back({true, i, quality_target(corner, gts[static_cast<size_t>(i)].box)});
    }
    for (int i = 0; i < n; ++i) {  // negative slots: pushed past the positive band
      double s = cfg_.dn_box_noise * (1.0 + rng.uniform(0.0, 1.0));
      auto bx = jitter(gts[static_cast<size_t>(i)].box, s);
      labels.push_back(noisy_label(gts[static_cast<size_t>(i)].category));
      out.boxes.push_back(bx);
      out.targets.push_back({false, i, 0.0});
    }
  }
  out.content = g.tape.gather_rows(g.p(dn_embed_), labels);
  return out;
}

DecodeOutput Transformer::decode(Graph& g, const EncoderMemory& mem, Tape::Id content,
                                 const std::vector<std::array<double, 4>>& boxes,
                                 const Tensor& mask) const {
  Tape& t = g.tape;
  int s = static_cast<int>(boxes.size());
  if (t.val(content).rank() != 2 || t.val(content).rows() != s ||
      t.val(content).cols() != cfg_.dim)
    throw std::invalid_argument("decode: content/boxes slot mismatch");
  Tape::Id mask_id = Tape::kNone;
  if (mask.numel() > 0) {
    if (mask.rank() != 2 || mask.rows() != s || mask.cols() != s)
      throw std::invalid_argument("decode: mask/slot count mismatch");
    mask_id = t.constant(mask);
  }

  int m = cfg_.heads * cfg_.levels * cfg_.points;
  DecodeOutput out;
  std::vector<std::array<double, 4>> ref = boxes;
  Tape::Id x = content;
  for (const DecLayer& l : dec_) {
    Tape::Id pos = t.constant(sine_xy_embedding(box_centers(ref), cfg_.dim));
    Tape::Id q = t.add(x, pos);
    x = l.n1.apply(g, t.add(x, l.self_attn.apply(g, q, q, x, mask_id)));

    // samples spread within each slot's current box
    Tensor scale({s, 2 * m});
    for (int i = 0; i < s; ++i)
      for (int j = 0; j < m; ++j) {
        scale.at(i, 2 * j) = ref[static_cast<size_t>(i)][2] / (2.0 * cfg_.points);
        scale.at(i, 2 * j + 1) = ref[static_cast<size_t>(i)][3] / (2.0 * cfg_.points);
      }
    Tape::Id qq = t.add(x, pos);
    Tape::Id ca = deform_attend(g, l.cross, qq, mem.tokens, t.constant(std::move(scale)),
                                t.constant(tile_reference_xy(box_centers(ref), m)), mem.grid);
    x = l.n2.apply(g, t.add(x, ca));
    x = l.n3.apply(g, t.add(x, l.ff2.apply(g, t.relu(l.ff1.apply(g, x)))));

    Tape::Id layer_boxes =
        t.sigmoid(t.add(box_head_.apply(g, x), t.constant(invsig_tensor(ref))));
    out.layers.push_back({cls_head_.apply(g, x), layer_boxes});
    const Tensor& bv = t.val(layer_boxes);
    for (int i = 0; i < s; ++i)
      ref[static_cast<size_t>(i)] = {bv.at(i, 0), bv.at(i, 1), bv.at(i, 2), bv.at(i, 3)};
  }
  out.final_boxes = std::move(ref);
  return out;
}

}  // namespace docdet::nn
