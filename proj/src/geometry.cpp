#include "docdet/geometry.hpp"

#include <algorithm>
#include <stdexcept>

namespace docdet {

bool box_ordered(const Box& b) { return b.x1 <= b.x2 && b.y1 <= b.y2; }

void validate_box(const Box& b) {
  if (!box_ordered(b)) throw std::invalid_argument("box coordinates out of order");
}

double box_area(const Box& b) { return (b.x2 - b.x1) * (b.y2 - b.y1); }

bool box_degenerate(const Box& b) { return box_area(b) == 0.0; }

std::array<double, 4> box_to_cxcywh(const Box& b) {
  return {(b.x1 + b.x2) * 0.5, (b.y1 + b.y2) * 0.5, b.x2 - b.x1, b.y2 - b.y1};
}

Box box_from_cxcywh(double cx, double cy, double w, double h) {
  return {cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5};
}

namespace {
double intersect_area(const Box& a, const Box& b) {
  double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return iw > 0 && ih > 0 ? iw * ih : 0.0;
}
}  // namespace

double iou(const Box& a, const Box& b) {
  validate_box(a);
  validate_box(b);
  if (box_degenerate(a) || box_degenerate(b)) return 0.0;
  double inter = intersect_area(a, b);
  return inter / (box_area(a) + box_area(b) - inter);
}

Eigen::MatrixXd iou_matrix(const std::vector<Box>& a, const std::vector<Box>& b) {
  Eigen::MatrixXd m(a.size(), b.size());
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t j = 0; j < b.size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = iou(a[i], b[j]);
  return m;
}

double giou(const Box& a, const Box& b) {
  validate_box(a);
  validate_box(b);
  bool da = box_degenerate(a), db = box_degenerate(b);
  if (da && db) throw std::invalid_argument("giou undefined for two degenerate boxes");
  if (da || db) return 0.0;
  double inter = intersect_area(a, b);
  double uni = box_area(a) + box_area(b) - inter;
  Box enc{std::min(a.x1, b.x1), std::min(a.y1, b.y1), std::max(a.x2, b.x2),
          std::max(a.y2, b.y2)};
  double ea = box_area(enc);
  return inter / uni - (ea - uni) / ea;
}

int argmax_class(const Detection& d) {
  if (d.class_scores.empty()) throw std::invalid_argument("detection has no class scores");
  int best = 0;
  for (int c = 1; c < static_cast<int>(d.class_scores.size()); ++c)
    if (d.class_scores[static_cast<size_t>(c)] > d.class_scores[static_cast<size_t>(best)])
      best = c;
  return best;
}

double max_score(const Detection& d) {
  return d.class_scores[static_cast<size_t>(argmax_class(d))];
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold,
                           double score_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0))
    throw std::invalid_argument("nms: iou_threshold must be in (0,1]");
  std::vector<int> order;
  for (int i = 0; i < static_cast<int>(dets.size()); ++i)
    if (max_score(dets[static_cast<size_t>(i)]) >= score_threshold) order.push_back(i);
  std::sort(order.begin(), order.end(), [&](int i, int j) {
    double si = max_score(dets[static_cast<size_t>(i)]);
    double sj = max_score(dets[static_cast<size_t>(j)]);
    if (si != sj) return si > sj;
    return dets[static_cast<size_t>(i)].query_index < dets[static_cast<size_t>(j)].query_index;
  });
  std::vector<Detection> kept;
  std::vector<int> kept_class;
  for (int i : order) {
    const Detection& d = dets[static_cast<size_t>(i)];
    int cls = argmax_class(d);
    bool suppressed = false;
    for (size_t k = 0; k < kept.size(); ++k) {
      if (kept_class[k] != cls) continue;
      if (iou(kept[k].box, d.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) {
      kept.push_back(d);
      kept_class.push_back(cls);
    }
  }
  return kept;
}

}  // namespace docdet
