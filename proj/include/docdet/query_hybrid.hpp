#pragma once

#include <array>
#include <string>
#include <vector>

#include "docdet/assignment.hpp"
#include "docdet/autodiff.hpp"
#include "docdet/geometry.hpp"
#include "docdet/layers.hpp"
#include "docdet/random.hpp"

namespace docdet::nn {

// Region-conditioned query branch: pools fused high-level features under
// proposal boxes into query vectors, refines both query families with
// separate self-attention passes, and blends the region vectors into one
// enhancement vector per decoder query via temperature-softmaxed cosine
// similarity.
class QueryHybrid {
 public:
  static constexpr int kPool = 7;
  static constexpr int kSamplingRatio = 2;

  QueryHybrid() = default;
  QueryHybrid(ParamStore& s, const std::string& name, int feat_channels, int dim, int heads,
              Rng& rng, double temperature = 0.07);

  // fmap [C, H, W]; boxes normalized corner form. Boxes outside the feature
  // extent pool zeros. Output [K, dim].
  Tape::Id extract_query_features(Graph& g, Tape::Id fmap, const std::vector<Box>& boxes) const;

  Tape::Id refine_region(Graph& g, Tape::Id q_h) const;   // self-attention, region family
  Tape::Id refine_decoder(Graph& g, Tape::Id q_d) const;  // self-attention, decoder family

  // one enhancement vector per decoder query: rows of q_d attend rows of q_h
  // through cosine weights softmaxed at the configured temperature
  Tape::Id enhance(Graph& g, Tape::Id q_d, Tape::Id q_h) const;

  // cosine similarity of all row pairs; zero-norm rows score 0 everywhere
  static Tape::Id cosine_rows(Graph& g, Tape::Id a, Tape::Id b);  // [na, nb]
  static Tape::Id aggregate(Graph& g, Tape::Id sim, Tape::Id values, double tau);

  double temperature() const { return tau_; }

 private:
  Mlp mlp_;
  MultiHeadAttention attn_h_, attn_d_;
  double tau_ = 0.07;
};

struct AssembledQueries {
  Tape::Id content = Tape::kNone;  // [n_base + n_enhanced, dim]
  std::vector<std::array<double, 4>> boxes;
  int n_base = 0;
  int n_enhanced = 0;
};

// one_to_many stacks the enhanced block (with its source-proposal boxes)
// after the base block; one_to_one passes the base queries through untouched
AssembledQueries assemble_queries(Graph& g, Regime phase, Tape::Id base,
                                  const std::vector<std::array<double, 4>>& base_boxes,
                                  Tape::Id enhanced,
                                  const std::vector<std::array<double, 4>>& enhanced_boxes);

}  // namespace docdet::nn
