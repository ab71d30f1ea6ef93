#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "docdet/coco_io.hpp"
#include "docdet/config.hpp"
#include "docdet/evaluator.hpp"
#include "docdet/model.hpp"

namespace docdet {

struct EpochStats {
  int epoch = 0;
  Regime regime = Regime::one_to_one;
  int matching_slots = 0;     // queries the matcher saw per image
  double dn_slots = 0;        // mean denoising slots per image
  double loss = 0;            // mean grand total (decoder + proposal head)
  double cls = 0, giou = 0, l1 = 0, dn = 0, enc = 0;
  double matched_per_gt = 0;  // matched pairs / ground truths, last decoder layer
  double lr = 0;
};

struct TrainResult {
  int last_epoch = -1;
  std::vector<EpochStats> history;
  std::string checkpoint;  // <out_dir>/last.ckpt
  bool evaluated = false;
  EvalReport final_eval;  // when the config names a validation set
};

// Full training run driven by the config: per-epoch matching regime from the
// schedule, deterministic shuffling and denoising noise derived from the
// seed, a metrics line and a refreshed last.ckpt per epoch. resume_from must
// be a checkpoint written with a byte-identical config.
TrainResult train(const TrainConfig& cfg, const std::string& resume_from = "",
                  std::ostream* log = nullptr);

struct EvalOptions {
  bool use_nms = true;
  double nms_iou = 0.5;
  double score_threshold = 0.05;  // applied with or without suppression
};

// Runs inference over every sample and scores the argmax-class boxes in
// absolute pixels against the sample annotations. categories must cover
// the model's classes; class index c maps to the c-th id in ascending order.
EvalReport evaluate_model(nn::Model& model, const std::vector<LayoutSample>& samples,
                          const std::vector<CocoCategory>& categories, const EvalOptions& opt);

// annotation pixels -> normalized corner boxes with zero-based class indices
std::vector<LabeledBox> normalized_gts(const LayoutSample& s,
                                       const std::vector<CocoCategory>& sorted_cats);

// Rebuilds the model a checkpoint was saved from (architecture from its
// embedded config, weights from its tensors). meta_out may be null.
nn::Model model_from_checkpoint(const std::string& path, nn::CheckpointMeta* meta_out = nullptr);

// ascending-id copy; duplicate ids are an error
std::vector<CocoCategory> sorted_categories(const std::vector<CocoCategory>& cats);

}  // namespace docdet
