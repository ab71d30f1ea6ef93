#pragma once

#include <vector>

#include <Eigen/Core>

#include "docdet/geometry.hpp"

namespace docdet {

enum class Regime { one_to_one, one_to_many };

// weights for the matching cost terms
struct MatchWeights {
  double lambda_cls = 2.0;
  double lambda_l1 = 5.0;
  double lambda_giou = 2.0;
};

struct MatchPair {
  int query_index = -1;
  int gt_index = -1;
  double cost = 0;
  double quality = 0;  // ĝ in [0,1], filled by attach_quality
};

// A query <-> ground-truth assignment. pairs are sorted by query_index;
// pairs plus unmatched_queries partition all query indices.
struct MatchResult {
  Regime regime = Regime::one_to_one;
  std::vector<MatchPair> pairs;
  std::vector<int> unmatched_queries;
};

// cost(i,j) = λ_cls·(1 − p_i[class_j]) + λ_L1·‖box_i − box_j‖₁ + λ_GIoU·(1 − GIoU);
// the L1 term runs over (cx, cy, w, h) coordinates. Empty gts give a
// zero-column matrix.
Eigen::MatrixXd cost_matrix(const std::vector<Detection>& preds,
                            const std::vector<LabeledBox>& gts, const MatchWeights& w);

// Minimum-total-cost one-to-one assignment of size min(rows, cols), shortest
// augmenting path method. Rows are queries, columns ground truths. Throws on
// non-finite entries.
MatchResult hungarian(const Eigen::MatrixXd& cost);

// Exhaustive assignment oracle; min(rows, cols) must be <= 8.
MatchResult brute_force_assign(const Eigen::MatrixXd& cost);

// Each gt column, in ascending index order, claims up to k of the cheapest
// still-unclaimed queries (ties to the lower query index). When queries are
// scarce the per-gt intake is capped at ceil(|queries| / |gts|) so later gts
// are not starved.
MatchResult one_to_many_assign(const Eigen::MatrixXd& cost, int k);

// fills pair.quality with max(0, IoU(pred_box, gt_box))
void attach_quality(MatchResult& m, const std::vector<Box>& pred_boxes,
                    const std::vector<LabeledBox>& gts);

// sum of pair costs in query-index order (deterministic reduction)
double total_cost(const MatchResult& m);

// one_to_many during the first floor(total/2) epochs, one_to_one after
Regime phase_for_epoch(int epoch, int total_epochs);

}  // namespace docdet
