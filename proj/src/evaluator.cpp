#include "docdet/evaluator.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>
#include <tuple>

namespace docdet {

namespace {

constexpr int kNumThresholds = 10;

double threshold_at(int k) { return (50 + 5 * k) / 100.0; }

constexpr double kSmallMax = 32.0 * 32.0;   // exclusive
constexpr double kMediumMax = 96.0 * 96.0;  // inclusive

// bin 0 = all, 1 = small, 2 = medium, 3 = large
bool in_bin(double area, int bin) {
  switch (bin) {
    case 1: return area < kSmallMax;
    case 2: return area >= kSmallMax && area <= kMediumMax;
    case 3: return area > kMediumMax;
    default: return true;
  }
}

struct FlatPred {
  int img = 0;  // index into `images`
  int idx = 0;  // index within the image's prediction list
  int image_id = 0;
  double score = 0;
  Box box;
  double area = 0;
};

struct GtRef {
  Box box;
  double area = 0;
};

double ap_101(const std::vector<double>& precision, const std::vector<double>& recall) {
  double total = 0;
  for (int j = 0; j <= 100; ++j) {
    const double r = j / 100.0;
    double best = 0;
    for (std::size_t i = 0; i < recall.size(); ++i)
      if (recall[i] >= r && precision[i] > best) best = precision[i];
    total += best;
  }
  return total / 101.0;
}

}  // namespace

EvalReport evaluate(const std::vector<ImageEval>& images, const std::vector<int>& categories) {
  std::set<int> cat_set(categories.begin(), categories.end());
  std::set<int> seen;
  for (const auto& img : images) {
    if (!seen.insert(img.image_id).second)
      throw std::invalid_argument("evaluate: duplicate image id " + std::to_string(img.image_id));
    for (const auto& p : img.preds) {
      validate_box(p.box);
      if (!cat_set.count(p.category))
        throw std::invalid_argument("evaluate: prediction references unknown category " +
                                    std::to_string(p.category));
    }
    for (const auto& g : img.gts) {
      validate_box(g.box);
      if (!cat_set.count(g.category))
        throw std::invalid_argument("evaluate: gt references unknown category " +
                                    std::to_string(g.category));
    }
  }

  const int num_cats = static_cast<int>(categories.size());
  // ap[c][bin][k]; -1 marks "no gts in bin" (excluded from means)
  std::vector<std::vector<std::vector<double>>> ap(
      num_cats, std::vector<std::vector<double>>(4, std::vector<double>(kNumThresholds, -1.0)));
  std::vector<std::vector<int>> gt_count(num_cats, std::vector<int>(4, 0));

  for (int ci = 0; ci < num_cats; ++ci) {
    const int cat = categories[ci];

    std::vector<FlatPred> preds;
    std::vector<std::vector<GtRef>> gts(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto& img = images[i];
      for (std::size_t j = 0; j < img.preds.size(); ++j) {
        const auto& p = img.preds[j];
        if (p.category != cat) continue;
        preds.push_back({static_cast<int>(i), static_cast<int>(j), img.image_id, p.score, p.box,
                         box_area(p.box)});
      }
      for (const auto& g : img.gts)
        if (g.category == cat) gts[i].push_back({g.box, box_area(g.box)});
    }
    std::sort(preds.begin(), preds.end(), [](const FlatPred& a, const FlatPred& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.image_id != b.image_id) return a.image_id < b.image_id;
      return a.idx < b.idx;
    });

    for (int bin = 0; bin < 4; ++bin) {
      int npig = 0;
      for (const auto& per_img : gts)
        for (const auto& g : per_img)
          if (in_bin(g.area, bin)) ++npig;
      gt_count[ci][bin] = npig;
      if (npig == 0) continue;

      for (int k = 0; k < kNumThresholds; ++k) {
        const double thr = threshold_at(k);
        std::vector<std::vector<char>> taken(images.size());
        for (std::size_t i = 0; i < images.size(); ++i) taken[i].assign(gts[i].size(), 0);

        std::vector<char> is_tp(preds.size(), 0), is_ignored(preds.size(), 0);
        for (std::size_t pi = 0; pi < preds.size(); ++pi) {
          const auto& p = preds[pi];
          const auto& cand = gts[p.img];
          int best = -1;
          double best_iou = 0;
          // prefer in-bin gts; spill to out-of-bin only when nothing in bin matches
          for (int pass = 0; pass < 2 && best < 0; ++pass) {
            for (std::size_t g = 0; g < cand.size(); ++g) {
              if (taken[p.img][g]) continue;
              if (in_bin(cand[g].area, bin) == (pass == 1)) continue;
              const double v = iou(p.box, cand[g].box);
              if (v < thr) continue;
              if (best >= 0 && v <= best_iou) continue;
              best = static_cast<int>(g);
              best_iou = v;
            }
          }
          if (best < 0) {
            is_ignored[pi] = !in_bin(p.area, bin);  // stray out-of-bin preds don't count
          } else {
            taken[p.img][best] = 1;
            if (in_bin(cand[best].area, bin))
              is_tp[pi] = 1;
            else
              is_ignored[pi] = 1;  // absorbed by an out-of-bin gt
          }
        }

        std::vector<double> precision, recall;
        int tp = 0, fp = 0;
        for (std::size_t pi = 0; pi < preds.size(); ++pi) {
          if (is_ignored[pi]) continue;
          if (is_tp[pi])
            ++tp;
          else
            ++fp;
          precision.push_back(static_cast<double>(tp) / (tp + fp));
          recall.push_back(static_cast<double>(tp) / npig);
        }
        ap[ci][bin][k] = ap_101(precision, recall);
      }
    }
  }

  EvalReport report;
  const auto bin_mean = [&](int bin) {
    double total = 0;
    int present = 0;
    for (int ci = 0; ci < num_cats; ++ci) {
      if (gt_count[ci][bin] == 0) continue;
      double s = 0;
      for (int k = 0; k < kNumThresholds; ++k) s += ap[ci][bin][k];
      total += s / kNumThresholds;
      ++present;
    }
    return present ? total / present : 0.0;
  };

  report.map = bin_mean(0);
  report.ap_small = bin_mean(1);
  report.ap_medium = bin_mean(2);
  report.ap_large = bin_mean(3);

  double s50 = 0, s75 = 0;
  int present = 0;
  for (int ci = 0; ci < num_cats; ++ci) {
    if (gt_count[ci][0] == 0) continue;
    s50 += ap[ci][0][0];
    s75 += ap[ci][0][5];
    ++present;
    double s = 0;
    for (int k = 0; k < kNumThresholds; ++k) s += ap[ci][0][k];
    report.per_class.emplace_back(categories[ci], s / kNumThresholds);
  }
  report.ap50 = present ? s50 / present : 0.0;
  report.ap75 = present ? s75 / present : 0.0;
  report.duplicate_rate = duplicate_rate(images);
  return report;
}

double duplicate_rate(const std::vector<ImageEval>& images, double iou_threshold,
                      double score_threshold) {
  if (images.empty()) return 0.0;
  double total = 0;
  for (const auto& img : images) {
    int pairs = 0;
    for (std::size_t i = 0; i < img.preds.size(); ++i) {
      const auto& a = img.preds[i];
      if (a.score <= score_threshold) continue;
      for (std::size_t j = i + 1; j < img.preds.size(); ++j) {
        const auto& b = img.preds[j];
        if (b.score <= score_threshold || b.category != a.category) continue;
        if (iou(a.box, b.box) > iou_threshold) ++pairs;
      }
    }
    total += pairs / std::max<double>(1.0, static_cast<double>(img.gts.size()));
  }
  return total / static_cast<double>(images.size());
}

}  // namespace docdet
