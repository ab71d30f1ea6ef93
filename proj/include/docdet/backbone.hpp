#pragma once

#include <string>
#include <vector>

#include "docdet/layers.hpp"

namespace docdet::nn {

// Five-level feature pyramid at strides {4, 8, 16, 32, 64}, each level
// projected to `dim` channels, plus a 64-channel high-resolution fusion of the
// three CNN stages at stride 4. Level s of an H×W input is ceil(H/s)×ceil(W/s).
class Backbone {
 public:
  static constexpr int kNumLevels = 5;
  static constexpr int kStrides[kNumLevels] = {4, 8, 16, 32, 64};
  static constexpr int kFusedChannels = 64;

  Backbone() = default;
  Backbone(ParamStore& s, const std::string& name, int dim, Rng& rng);

  struct Output {
    std::vector<Tape::Id> levels;  // [dim, ceil(H/s), ceil(W/s)] per stride
    Tape::Id fused_high = Tape::kNone;  // [64, ceil(H/4), ceil(W/4)]
  };

  // image [3, H, W] with H, W >= 64 (throws below that)
  Output apply(Graph& g, const Tensor& image) const;

  // exposed separately so the fusion path can be probed in isolation;
  // c3/c4/c5 must carry this backbone's stage widths (throws otherwise)
  Tape::Id fuse(Graph& g, Tape::Id c3, Tape::Id c4, Tape::Id c5) const;

  int dim() const { return dim_; }
  int stage_width(int stage) const;  // channels of raw c3/c4/c5 (stage 0..2)

 private:
  struct ResBlock {
    Conv2d c1, c2;
    Tape::Id apply(Graph& g, Tape::Id x) const;
  };

  int dim_ = 0, base_ = 0;
  Conv2d stem1_, stem2_, down4_, down5_, extra6_, extra7_;
  ResBlock res3_, res4_, res5_;
  std::vector<Conv2d> proj_;
  Conv2d fuse1_, fuse2_;
};

}  // namespace docdet::nn
