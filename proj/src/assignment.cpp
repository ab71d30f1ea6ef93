#include "docdet/assignment.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>

namespace docdet {

namespace {

// sort pairs by query index, derive the unmatched set
void finalize(MatchResult& m, int num_queries) {
  std::sort(m.pairs.begin(), m.pairs.end(),
            [](const MatchPair& a, const MatchPair& b) { return a.query_index < b.query_index; });
  std::vector<bool> used(static_cast<size_t>(num_queries), false);
  for (const auto& p : m.pairs) used[static_cast<size_t>(p.query_index)] = true;
  m.unmatched_queries.clear();
  for (int q = 0; q < num_queries; ++q)
    if (!used[static_cast<size_t>(q)]) m.unmatched_queries.push_back(q);
}

void check_finite(const Eigen::MatrixXd& cost) {
  if (!cost.allFinite()) throw std::invalid_argument("cost matrix has non-finite entries");
}

// Shortest augmenting path assignment for nr <= nc; returns the column
// assigned to each row. Deterministic: all scans ascending, ties keep the
// lowest index.
std::vector<int> lsap(int nr, int nc, const std::function<double(int, int)>& cost) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<size_t>(nr), 0.0), v(static_cast<size_t>(nc), 0.0);
  std::vector<double> shortest(static_cast<size_t>(nc));
  std::vector<int> path(static_cast<size_t>(nc)), col4row(static_cast<size_t>(nr), -1),
      row4col(static_cast<size_t>(nc), -1);
  std::vector<bool> sr(static_cast<size_t>(nr)), sc(static_cast<size_t>(nc));
  for (int cur = 0; cur < nr; ++cur) {
    std::fill(sr.begin(), sr.end(), false);
    std::fill(sc.begin(), sc.end(), false);
    std::fill(shortest.begin(), shortest.end(), inf);
    std::fill(path.begin(), path.end(), -1);
    int sink = -1, i = cur;
    double min_val = 0.0;
    while (sink == -1) {
      sr[static_cast<size_t>(i)] = true;
      int j_min = -1;
      double lowest = inf;
      for (int j = 0; j < nc; ++j) {
        if (sc[static_cast<size_t>(j)]) continue;
        double r = min_val + cost(i, j) - u[static_cast<size_t>(i)] - v[static_cast<size_t>(j)];
        if (r < shortest[static_cast<size_t>(j)]) {
          shortest[static_cast<size_t>(j)] = r;
          path[static_cast<size_t>(j)] = i;
        }
        if (shortest[static_cast<size_t>(j)] < lowest) {
          lowest = shortest[static_cast<size_t>(j)];
          j_min = j;
        }
      }
      min_val = lowest;
      sc[static_cast<size_t>(j_min)] = true;
      if (row4col[static_cast<size_t>(j_min)] == -1)
        sink = j_min;
      else
        i = row4col[static_cast<size_t>(j_min)];
    }
    u[static_cast<size_t>(cur)] += min_val;
    for (int r = 0; r < nr; ++r)
      if (sr[static_cast<size_t>(r)] && r != cur)
        u[static_cast<size_t>(r)] +=
            min_val - shortest[static_cast<size_t>(col4row[static_cast<size_t>(r)])];
    for (int j = 0; j < nc; ++j)
      if (sc[static_cast<size_t>(j)])
        v[static_cast<size_t>(j)] -= min_val - shortest[static_cast<size_t>(j)];
    int j = sink;
    for (;;) {
      int r = path[static_cast<size_t>(j)];
      row4col[static_cast<size_t>(j)] = r;
      std::swap(col4row[static_cast<size_t>(r)], j);
      if (r == cur) break;
    }
  }
  return col4row;
}

}  // namespace

Eigen::MatrixXd cost_matrix(const std::vector<Detection>& preds,
                            const std::vector<LabeledBox>& gts, const MatchWeights& w) {
  if (preds.empty()) throw std::invalid_argument("cost_matrix: no predictions");
  if (w.lambda_cls == 0 && w.lambda_l1 == 0 && w.lambda_giou == 0)
    throw std::invalid_argument("cost_matrix: all weights zero");
  Eigen::MatrixXd cost(preds.size(), gts.size());
  for (size_t i = 0; i < preds.size(); ++i) {
    auto pc = box_to_cxcywh(preds[i].box);
    for (size_t j = 0; j < gts.size(); ++j) {
      const LabeledBox& gt = gts[j];
      double p = preds[i].class_scores.at(static_cast<size_t>(gt.category));
      auto gc = box_to_cxcywh(gt.box);
      double l1 = std::abs(pc[0] - gc[0]) + std::abs(pc[1] - gc[1]) + std::abs(pc[2] - gc[2]) +
                  std::abs(pc[3] - gc[3]);
      cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          w.lambda_cls * (1.0 - p) + w.lambda_l1 * l1 +
          w.lambda_giou * (1.0 - giou(preds[i].box, gt.box));
    }
  }
  return cost;
}

MatchResult hungarian(const Eigen::MatrixXd& cost) {
  check_finite(cost);
  int nq = static_cast<int>(cost.rows());
  int ng = static_cast<int>(cost.cols());
  MatchResult m;
  m.regime = Regime::one_to_one;
  if (nq == 0 || ng == 0) {
    finalize(m, nq);
    return m;
  }
  if (nq <= ng) {
    auto col4row = lsap(nq, ng, [&](int i, int j) { return cost(i, j); });
    for (int q = 0; q < nq; ++q)
      m.pairs.push_back({q, col4row[static_cast<size_t>(q)],
                         cost(q, col4row[static_cast<size_t>(q)]), 0.0});
  } else {
    auto row4gt = lsap(ng, nq, [&](int j, int i) { return cost(i, j); });
    for (int g = 0; g < ng; ++g)
      m.pairs.push_back({row4gt[static_cast<size_t>(g)], g,
                         cost(row4gt[static_cast<size_t>(g)], g), 0.0});
  }
  finalize(m, nq);
  return m;
}

MatchResult brute_force_assign(const Eigen::MatrixXd& cost) {
  check_finite(cost);
  int nq = static_cast<int>(cost.rows());
  int ng = static_cast<int>(cost.cols());
  int small = std::min(nq, ng);
  if (small > 8) throw std::invalid_argument("brute_force_assign: instance too large");
  MatchResult m;
  m.regime = Regime::one_to_one;
  if (small == 0) {
    finalize(m, nq);
    return m;
  }
  // enumerate injections of the smaller side into the larger, lexicographic
  // order; keep the first strict improvement so ties resolve to the earliest
  // assignment vector
  bool rows_small = nq <= ng;
  int ns = small, nl = rows_small ? ng : nq;
  std::vector<int> pick(static_cast<size_t>(ns), -1), best;
  std::vector<bool> used(static_cast<size_t>(nl), false);
  double best_total = std::numeric_limits<double>::infinity();
  std::function<void(int, double)> rec = [&](int s, double acc) {
    if (s == ns) {
      if (acc < best_total) {
        best_total = acc;
        best = pick;
      }
      return;
    }
    for (int l = 0; l < nl; ++l) {
      if (used[static_cast<size_t>(l)]) continue;
      used[static_cast<size_t>(l)] = true;
      pick[static_cast<size_t>(s)] = l;
      rec(s + 1, acc + (rows_small ? cost(s, l) : cost(l, s)));
      used[static_cast<size_t>(l)] = false;
    }
  };
  rec(0, 0.0);
  for (int s = 0; s < ns; ++s) {
    int l = best[static_cast<size_t>(s)];
    if (rows_small)
      m.pairs.push_back({s, l, cost(s, l), 0.0});
    else
      m.pairs.push_back({l, s, cost(l, s), 0.0});
  }
  finalize(m, nq);
  return m;
}

MatchResult one_to_many_assign(const Eigen::MatrixXd& cost, int k) {
  if (k < 1) throw std::invalid_argument("one_to_many_assign: k must be >= 1");
  check_finite(cost);
  int nq = static_cast<int>(cost.rows());
  int ng = static_cast<int>(cost.cols());
  MatchResult m;
  m.regime = Regime::one_to_many;
  int cap = ng == 0 ? 0 : std::min<int>(k, (nq + ng - 1) / ng);
  std::vector<bool> claimed(static_cast<size_t>(nq), false);
  for (int g = 0; g < ng; ++g) {
    std::vector<int> cand;
    for (int q = 0; q < nq; ++q)
      if (!claimed[static_cast<size_t>(q)]) cand.push_back(q);
    std::sort(cand.begin(), cand.end(), [&](int a, int b) {
      if (cost(a, g) != cost(b, g)) return cost(a, g) < cost(b, g);
      return a < b;
    });
    for (int t = 0; t < cap && t < static_cast<int>(cand.size()); ++t) {
      int q = cand[static_cast<size_t>(t)];
      claimed[static_cast<size_t>(q)] = true;
      m.pairs.push_back({q, g, cost(q, g), 0.0});
    }
  }
  finalize(m, nq);
  return m;
}

void attach_quality(MatchResult& m, const std::vector<Box>& pred_boxes,
                    const std::vector<LabeledBox>& gts) {
  for (auto& p : m.pairs)
    p.quality = std::max(0.0, iou(pred_boxes.at(static_cast<size_t>(p.query_index)),
                                  gts.at(static_cast<size_t>(p.gt_index)).box));
}

double total_cost(const MatchResult& m) {
  double t = 0.0;
  for (const auto& p : m.pairs) t += p.cost;
  return t;
}

Regime phase_for_epoch(int epoch, int total_epochs) {
  if (epoch < 0 || epoch >= total_epochs)
    throw std::invalid_argument("phase_for_epoch: epoch out of range");
  return epoch < total_epochs / 2 ? Regime::one_to_many : Regime::one_to_one;
}

}  // namespace docdet
