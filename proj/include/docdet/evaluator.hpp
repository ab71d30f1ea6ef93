#pragma once

#include <utility>
#include <vector>

#include "docdet/geometry.hpp"

namespace docdet {

struct ScoredBox {
  Box box;  // absolute pixels
  int category = 0;
  double score = 0;
};

// one image's predictions and ground truths
struct ImageEval {
  int image_id = 0;
  std::vector<ScoredBox> preds;
  std::vector<LabeledBox> gts;
};

struct EvalReport {
  double map = 0, ap50 = 0, ap75 = 0;
  double ap_small = 0, ap_medium = 0, ap_large = 0;
  std::vector<std::pair<int, double>> per_class;  // (category, AP over all thresholds)
  double duplicate_rate = 0;
};

// Detection AP over IoU thresholds (50+5k)/100, k = 0..9, with 101-point
// interpolated precision-recall, greedy score-ordered matching at IoU >=
// threshold, and COCO size bins (small < 32², medium 32²–96², large > 96²,
// absolute pixels). Class means run over categories with at least one gt in
// the relevant bin. Throws when a prediction or gt carries a category outside
// `categories` or image ids repeat.
EvalReport evaluate(const std::vector<ImageEval>& images, const std::vector<int>& categories);

// Mean over images of the number of same-class prediction pairs with both
// scores above score_threshold and pairwise IoU above iou_threshold, divided
// by the image's gt count (at least 1).
double duplicate_rate(const std::vector<ImageEval>& images, double iou_threshold = 0.8,
                      double score_threshold = 0.3);

}  // namespace docdet
