#include "docdet/backbone.hpp"

#include <stdexcept>

namespace docdet::nn {

constexpr int Backbone::kStrides[];

Tape::Id Backbone::ResBlock::apply(Graph& g, Tape::Id x) const {
  Tape& t = g.tape;
  return t.relu(t.add(x, c2.apply(g, t.relu(c1.apply(g, x)))));
}

Backbone::Backbone(ParamStore& s, const std::string& name, int dim, Rng& rng)
    : dim_(dim), base_(std::max(8, dim / 4)) {
  const int b = base_;
  stem1_ = Conv2d(s, name + ".stem1", 3, b, 3, 2, 1, rng);
  stem2_ = Conv2d(s, name + ".stem2", b, b, 3, 2, 1, rng);
  res3_ = {Conv2d(s, name + ".res3a", b, b, 3, 1, 1, rng),
           Conv2d(s, name + ".res3b", b, b, 3, 1, 1, rng)};
  down4_ = Conv2d(s, name + ".down4", b, 2 * b, 3, 2, 1, rng);
  res4_ = {Conv2d(s, name + ".res4a", 2 * b, 2 * b, 3, 1, 1, rng),
           Conv2d(s, name + ".res4b", 2 * b, 2 * b, 3, 1, 1, rng)};
  down5_ = Conv2d(s, name + ".down5", 2 * b, 4 * b, 3, 2, 1, rng);
  res5_ = {Conv2d(s, name + ".res5a", 4 * b, 4 * b, 3, 1, 1, rng),
           Conv2d(s, name + ".res5b", 4 * b, 4 * b, 3, 1, 1, rng)};
  extra6_ = Conv2d(s, name + ".extra6", 4 * b, 4 * b, 3, 2, 1, rng);
  extra7_ = Conv2d(s, name + ".extra7", 4 * b, 4 * b, 3, 2, 1, rng);

  const int raw[kNumLevels] = {b, 2 * b, 4 * b, 4 * b, 4 * b};
  for (int i = 0; i < kNumLevels; ++i)
    proj_.push_back(Conv2d(s, name + ".proj" + std::to_string(i), raw[i], dim, 1, 1, 0, rng));

  fuse1_ = Conv2d(s, name + ".fuse1", 7 * b, kFusedChannels, 3, 1, 1, rng);
  fuse2_ = Conv2d(s, name + ".fuse2", kFusedChannels, kFusedChannels, 3, 1, 1, rng);
}

int Backbone::stage_width(int stage) const {
  const int widths[3] = {base_, 2 * base_, 4 * base_};
  return widths[stage];
}

Backbone::Output Backbone::apply(Graph& g, const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw std::invalid_argument("Backbone: expected a [3, H, W] image, got " + image.shape_str());
  if (image.dim(1) < 64 || image.dim(2) < 64)
    throw std::invalid_argument("Backbone: image is smaller than 64x64");

  Tape& t = g.tape;
  Tape::Id x = t.constant(image);
  x = t.relu(stem1_.apply(g, x));
  x = t.relu(stem2_.apply(g, x));
  const Tape::Id c3 = res3_.apply(g, x);
  const Tape::Id c4 = res4_.apply(g, t.relu(down4_.apply(g, c3)));
  const Tape::Id c5 = res5_.apply(g, t.relu(down5_.apply(g, c4)));
  const Tape::Id c6 = t.relu(extra6_.apply(g, c5));
  const Tape::Id c7 = t.relu(extra7_.apply(g, c6));

  Output out;
  const Tape::Id raw[kNumLevels] = {c3, c4, c5, c6, c7};
  for (int i = 0; i < kNumLevels; ++i) out.levels.push_back(proj_[i].apply(g, raw[i]));
  out.fused_high = fuse(g, c3, c4, c5);
  return out;
}

Tape::Id Backbone::fuse(Graph& g, Tape::Id c3, Tape::Id c4, Tape::Id c5) const {
  Tape& t = g.tape;
  const Tensor& v3 = t.val(c3);
  const Tape::Id ids[3] = {c3, c4, c5};
  for (int i = 0; i < 3; ++i) {
    const Tensor& v = t.val(ids[i]);
    if (v.rank() != 3 || v.dim(0) != stage_width(i))
      throw std::invalid_argument("Backbone::fuse: stage " + std::to_string(i) +
                                  " has wrong shape " + v.shape_str());
  }
  const int h = v3.dim(1), w = v3.dim(2);
  const Tape::Id u4 = t.bilinear_resize(c4, h, w);
  const Tape::Id u5 = t.bilinear_resize(c5, h, w);

  // channel concat via the row axis of [C, H*W] views
  const Tape::Id flat = t.concat_rows({t.reshape(c3, {stage_width(0), h * w}),
                                       t.reshape(u4, {stage_width(1), h * w}),
                                       t.reshape(u5, {stage_width(2), h * w})});
  const Tape::Id stacked = t.reshape(flat, {7 * base_, h, w});
  return fuse2_.apply(g, t.relu(fuse1_.apply(g, stacked)));
}

}  // namespace docdet::nn
