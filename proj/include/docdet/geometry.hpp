#pragma once

#include <array>
#include <vector>

#include <Eigen/Core>

namespace docdet {

// Axis-aligned rectangle in corner form. Coordinates are page-relative [0,1]
// throughout the model; absolute pixels only at dataset IO boundaries.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

// x1 <= x2 and y1 <= y2 (degenerate zero-area boxes allowed)
bool box_ordered(const Box& b);
// throws std::invalid_argument when not ordered
void validate_box(const Box& b);
double box_area(const Box& b);
bool box_degenerate(const Box& b);

// center-form (cx, cy, w, h) conversion
std::array<double, 4> box_to_cxcywh(const Box& b);
Box box_from_cxcywh(double cx, double cy, double w, double h);

// IoU of a pair; degenerate boxes score 0 against anything.
double iou(const Box& a, const Box& b);
Eigen::MatrixXd iou_matrix(const std::vector<Box>& a, const std::vector<Box>& b);

// Generalized IoU in [-1, 1]. Throws when both boxes are degenerate; with
// exactly one degenerate box the result is 0 (IoU 0, no enclosure penalty
// beyond the surviving box).
double giou(const Box& a, const Box& b);

// ground-truth annotation: box + category id
struct LabeledBox {
  Box box;
  int category = 0;
};

enum class SourceGroup { decoder_original, enhanced, denoising };

// One predicted object: box, per-category probabilities, and provenance.
struct Detection {
  Box box;
  std::vector<double> class_scores;
  int query_index = -1;
  SourceGroup source_group = SourceGroup::decoder_original;
};

int argmax_class(const Detection& d);
double max_score(const Detection& d);

// Class-wise greedy suppression. Detections below score_threshold (max class
// probability) are dropped; survivors are ordered by descending score with
// ties broken by lower query_index; a detection is suppressed when its IoU
// with an already-kept detection of the same class exceeds iou_threshold.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold,
                           double score_threshold);

}  // namespace docdet
