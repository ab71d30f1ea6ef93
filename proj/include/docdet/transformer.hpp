#pragma once

#include <array>
#include <string>
#include <vector>

#include "docdet/autodiff.hpp"
#include "docdet/criterion.hpp"
#include "docdet/geometry.hpp"
#include "docdet/layers.hpp"
#include "docdet/random.hpp"

namespace docdet::nn {

struct TransformerConfig {
  int dim = 128;
  int heads = 8;
  int points = 4;  // deformable sampling points per head per level
  int levels = 5;  // pyramid levels fed to the encoder
  int enc_layers = 3;
  int dec_layers = 3;
  int ffn_dim = 256;
  int num_queries = 100;
  double dn_box_noise = 0.4;    // positive slots jitter within this scale
  double dn_label_noise = 0.25;  // label flip probability
  int dn_groups = 3;
};

// Flattened multi-scale token matrix plus its spatial provenance. Row order
// is level-major, then row-major within each level.
struct EncoderMemory {
  Tape::Id tokens = Tape::kNone;  // [T, dim]
  LevelGrid grid;
  std::vector<std::array<double, 4>> anchors;  // per-token normalized (cx,cy,w,h)
};

struct Proposals {
  std::vector<int> token_index;              // score-descending
  std::vector<double> scores;                // sigmoid objectness, same order
  std::vector<std::array<double, 4>> boxes;  // normalized (cx,cy,w,h), detached
  Tape::Id topk_logits = Tape::kNone;        // [K, 1]
  Tape::Id topk_boxes = Tape::kNone;         // [K, 4] differentiable center form
};

// Noised ground-truth query slots for denoising training. Per group: one
// positive slot per gt (box jittered within the positive scale), then one
// negative slot per gt (jittered beyond it, up to twice the scale).
struct DnQueries {
  Tape::Id content = Tape::kNone;            // [n, dim]; kNone when n == 0
  std::vector<std::array<double, 4>> boxes;  // noised normalized center form
  std::vector<DnSlotTarget> targets;
  int groups = 0;
  int group_size = 0;  // slots per group (= 2 * #gts)
};

// Additive self-attention mask over [n_matching + dn_groups*dn_group_size]
// slots: matching slots and denoising slots never attend each other, and
// denoising groups are mutually isolated. Open entries are 0, blocked ones
// Tape::kMaskNegInf.
Tensor build_attention_mask(int n_matching, int dn_groups, int dn_group_size);

// Interleaved sine/cosine embedding of normalized (x, y) pairs; dim % 4 == 0.
Tensor sine_xy_embedding(const std::vector<std::array<double, 2>>& xy, int dim);

// Per-row reference centers tiled across m sampling slots -> [n, 2m].
Tensor tile_reference_xy(const std::vector<std::array<double, 2>>& refs, int m);

// Row vector [2m] turning raw offsets into per-level normalized units
// (1/W_l, 1/H_l per slot); m = heads * levels * points.
Tensor level_cell_scale_row(const LevelGrid& grid, int heads, int points);

struct DecodeOutput {
  std::vector<LayerOutput> layers;                 // per decoder layer, slot order kept
  std::vector<std::array<double, 4>> final_boxes;  // last layer values, center form
};

class Transformer {
 public:
  Transformer() = default;
  Transformer(ParamStore& s, const std::string& name, const TransformerConfig& cfg,
              int num_classes, Rng& rng);

  // levels: per-stride [dim, H_l, W_l] maps, finest first; count must equal
  // cfg.levels. Zero encoder layers leave the flattened tokens untouched.
  EncoderMemory encode(Graph& g, const std::vector<Tape::Id>& levels) const;

  // Class-agnostic top-k proposals; k in [1, token count].
  Proposals propose(Graph& g, const EncoderMemory& mem, int k) const;

  // gts carry normalized corner boxes; rng drives jitter and label flips.
  DnQueries build_dn_queries(Graph& g, const std::vector<LabeledBox>& gts, Rng& rng) const;

  // content [S, dim] with S == boxes.size(); mask is [S, S] additive or empty
  // for unmasked decoding. Boxes refine residually in inverse-sigmoid space;
  // slot order is preserved through every layer.
  DecodeOutput decode(Graph& g, const EncoderMemory& mem, Tape::Id content,
                      const std::vector<std::array<double, 4>>& boxes, const Tensor& mask) const;

  const TransformerConfig& config() const { return cfg_; }
  int num_classes() const { return num_classes_; }

 private:
  struct DeformBlock {
    Linear off, wts, value, out;
  };
  struct EncLayer {
    DeformBlock attn;
    Linear ff1, ff2;
    LayerNorm n1, n2;
  };
  struct DecLayer {
    MultiHeadAttention self_attn;
    DeformBlock cross;
    Linear ff1, ff2;
    LayerNorm n1, n2, n3;
  };

  // locs = off(query) * scale + ref_tile, then multi-scale sampling over
  // value(src) with head-wise softmax weights, projected by out.
  Tape::Id deform_attend(Graph& g, const DeformBlock& b, Tape::Id query, Tape::Id src,
                         Tape::Id scale, Tape::Id ref_tile, const LevelGrid& grid) const;

  TransformerConfig cfg_;
  int num_classes_ = 0;
  int level_embed_ = -1;  // [levels, dim]
  int dn_embed_ = -1;     // [num_classes, dim]
  std::vector<EncLayer> enc_;
  std::vector<DecLayer> dec_;
  Linear cls_head_;
  Mlp box_head_;  // shared across layers; final linear zero-initialized
  Linear enc_score_;
  Mlp enc_box_;
};

}  // namespace docdet::nn
