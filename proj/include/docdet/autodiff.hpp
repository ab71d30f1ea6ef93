#pragma once

#include <array>
#include <functional>
#include <memory>
#include <vector>

#include "docdet/tensor.hpp"

namespace docdet::nn {

// Flattened multi-scale grid: maps (level, y, x) cells onto a contiguous row range.
struct LevelGrid {
  struct Level {
    int h = 0, w = 0, start = 0;
  };
  std::vector<Level> levels;

  static LevelGrid from_shapes(const std::vector<std::pair<int, int>>& hw) {
    LevelGrid g;
    int off = 0;
    for (auto [h, w] : hw) {
      g.levels.push_back({h, w, off});
      off += h * w;
    }
    return g;
  }
  int total() const {
    if (levels.empty()) return 0;
    const Level& l = levels.back();
    return l.start + l.h * l.w;
  }
  int num_levels() const { return static_cast<int>(levels.size()); }
};

// Reverse-mode tape over dense double tensors. Nodes are appended in
// topological order; backward() walks the tape once in reverse. A Tape is
// single-use: build a forward graph, call backward, read grads, discard.
class Tape {
 public:
  using Id = int32_t;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Id input(Tensor val, bool requires_grad = false);
  Id constant(Tensor val) { return input(std::move(val), false); }
  Id scalar(double x) { return constant(Tensor::full({1}, x)); }

  const Tensor& val(Id id) const { return nodes_[static_cast<size_t>(id)].val; }
  const Tensor& grad(Id id) const;
  bool has_grad(Id id) const { return nodes_[static_cast<size_t>(id)].grad_live; }
  bool requires_grad(Id id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
  size_t size() const { return nodes_.size(); }

  // ---- elementwise unary ----
  Id neg(Id a);
  Id log(Id a);
  Id exp(Id a);
  Id sigmoid(Id a);
  Id relu(Id a);
  Id abs(Id a);
  Id sqrt(Id a);
  Id affine(Id a, double scale, double shift);  // scale*a + shift
  Id clamp(Id a, double lo, double hi);

  // ---- elementwise binary (same shape) ----
  Id add(Id a, Id b);
  Id sub(Id a, Id b);
  Id mul(Id a, Id b);
  Id div(Id a, Id b);
  Id minimum(Id a, Id b);  // ties keep a's gradient
  Id maximum(Id a, Id b);

  // ---- broadcast ----
  Id add_rowvec(Id x, Id b);   // [n,d] + [d]
  Id mul_rowvec(Id x, Id s);   // [n,d] * [d]
  Id mul_colvec(Id x, Id s);   // [n,d] * [n] (per-row scale)

  // ---- matmul ----
  Id mm(Id a, Id b);     // [m,k] x [k,n]
  Id mm_nt(Id a, Id b);  // [m,k] x [n,k]^T -> [m,n]

  // ---- reductions ----
  Id sum_all(Id a);             // -> [1]
  Id sum_rows(Id a);            // [n,d] -> [n]
  Id max_rows(Id a);            // [n,d] -> [n], first argmax takes the gradient

  // ---- structure ----
  Id reshape(Id a, std::vector<int> shape);
  Id concat_rows(const std::vector<Id>& parts);
  Id slice_rows(Id a, int r0, int r1);
  Id gather_rows(Id a, std::vector<int> idx);
  Id slice_cols(Id a, int c0, int c1);
  Id concat_cols(const std::vector<Id>& parts);
  Id transpose(Id a);  // [n,d] -> [d,n]

  // ---- nn ----
  // Row softmax; `additive_mask` (optional, same shape) is added to the logits
  // before normalization. Entries at or below kMaskNegInf yield exactly-zero
  // weights.
  Id softmax_rows(Id a, Id additive_mask = kNone);
  Id layernorm(Id x, Id gamma, Id beta, double eps = 1e-5);

  // Convolution over [Cin,H,W] with weight [Cout,Cin,kh,kw], bias [Cout].
  Id conv2d(Id x, Id w, Id b, int stride, int pad);
  Id bilinear_resize(Id x, int out_h, int out_w);

  // Multi-scale deformable sampling. value [T,D] rows follow `grid`;
  // locs [Q, heads*L*P*2] normalized per-level (x,y); weights [Q, heads*L*P]
  // already normalized per head. Output [Q, D].
  Id ms_deform_attn(Id value, Id locs, Id weights, const LevelGrid& grid, int heads, int points);

  // RoIAlign over [C,H,W]. Boxes are normalized corner-form (x1,y1,x2,y2)
  // constants; output [K, C*out*out], half-pixel aligned bilinear sampling.
  Id roi_align(Id fmap, const std::vector<std::array<double, 4>>& boxes, int out, int sampling_ratio);

  void backward(Id root);  // root must be a scalar [1]

  static constexpr Id kNone = -1;
  static constexpr double kMaskNegInf = -1e30;

 private:
  struct Node {
    Tensor val;
    Tensor grad;
    bool requires_grad = false;
    bool grad_live = false;
    std::function<void()> back;
  };

  Id push(Tensor val, bool requires_grad, std::function<void()> back);
  void add_grad(Id id, const Eigen::ArrayXd& g);
  Tensor& grad_buf(Id id);

  std::vector<Node> nodes_;
};

}  // namespace docdet::nn
