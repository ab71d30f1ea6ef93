#include "docdet/query_hybrid.hpp"

#include <stdexcept>

namespace docdet::nn {

namespace {
constexpr double kNormFloor = 1e-12;
}

QueryHybrid::QueryHybrid(ParamStore& s, const std::string& name, int feat_channels, int dim,
                         int heads, Rng& rng, double temperature)
    : tau_(temperature) {
  if (temperature <= 0) throw std::invalid_argument("QueryHybrid: temperature must be positive");
  mlp_ = Mlp(s, name + ".mlp", {feat_channels * kPool * kPool, dim, dim}, rng);
  attn_h_ = MultiHeadAttention(s, name + ".attn_h", dim, heads, rng);
  attn_d_ = MultiHeadAttention(s, name + ".attn_d", dim, heads, rng);
}

Tape::Id QueryHybrid::extract_query_features(Graph& g, Tape::Id fmap,
                                             const std::vector<Box>& boxes) const {
  std::vector<std::array<double, 4>> corners;
  corners.reserve(boxes.size());
  for (const Box& b : boxes) {
    validate_box(b);
    corners.push_back({b.x1, b.y1, b.x2, b.y2});
  }
  Tape::Id pooled = g.tape.roi_align(fmap, corners, kPool, kSamplingRatio);
  return mlp_.apply(g, pooled);
}

Tape::Id QueryHybrid::refine_region(Graph& g, Tape::Id q_h) const {
  return attn_h_.apply(g, q_h, q_h, q_h);
}

Tape::Id QueryHybrid::refine_decoder(Graph& g, Tape::Id q_d) const {
  return attn_d_.apply(g, q_d, q_d, q_d);
}

Tape::Id QueryHybrid::cosine_rows(Graph& g, Tape::Id a, Tape::Id b) {
  Tape& t = g.tape;
  auto inv_norm = [&](Tape::Id x) {
    int n = t.val(x).rows();
    Tape::Id r = t.sqrt(t.sum_rows(t.mul(x, x)));
    // zero rows keep a zero numerator, so flooring the norm pins them to 0
    return t.div(t.constant(Tensor::full({n}, 1.0)),
                 t.maximum(r, t.constant(Tensor::full({n}, kNormFloor))));
  };
  Tape::Id an = t.mul_colvec(a, inv_norm(a));
  Tape::Id bn = t.mul_colvec(b, inv_norm(b));
  return t.mm_nt(an, bn);
}

Tape::Id QueryHybrid::aggregate(Graph& g, Tape::Id sim, Tape::Id values, double tau) {
  Tape& t = g.tape;
  return t.mm(t.softmax_rows(t.affine(sim, 1.0 / tau, 0.0)), values);
}

Tape::Id QueryHybrid::enhance(Graph& g, Tape::Id q_d, Tape::Id q_h) const {
  Tape::Id rh = refine_region(g, q_h);
  Tape::Id rd = refine_decoder(g, q_d);
  return aggregate(g, cosine_rows(g, rd, rh), rh, tau_);
}

AssembledQueries assemble_queries(Graph& g, Regime phase, Tape::Id base,
                                  const std::vector<std::array<double, 4>>& base_boxes,
                                  Tape::Id enhanced,
                                  const std::vector<std::array<double, 4>>& enhanced_boxes) {
  Tape& t = g.tape;
  if (t.val(base).rows() != static_cast<int>(base_boxes.size()))
    throw std::invalid_argument("assemble_queries: base box count mismatch");
  AssembledQueries out;
  out.n_base = static_cast<int>(base_boxes.size());
  switch (phase) {
    case Regime::one_to_one:
      out.content = base;
      out.boxes = base_boxes;
      return out;
    case Regime::one_to_many: {
      if (enhanced == Tape::kNone ||
          t.val(enhanced).rows() != static_cast<int>(enhanced_boxes.size()))
        throw std::invalid_argument("assemble_queries: enhanced box count mismatch");
      out.content = t.concat_rows({base, enhanced});
      out.boxes = base_boxes;
      out.boxes.insert(out.boxes.end(), enhanced_boxes.begin(), enhanced_boxes.end());
      out.n_enhanced = static_cast<int>(enhanced_boxes.size());
      return out;
    }
  }
  throw std::invalid_argument("assemble_queries: unknown phase");
}

}  // namespace docdet::nn
