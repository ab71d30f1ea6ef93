#pragma once

#include <utility>
#include <vector>

#include "docdet/assignment.hpp"
#include "docdet/autodiff.hpp"
#include "docdet/geometry.hpp"

namespace docdet {

// probability clamp applied before logarithms
inline constexpr double kProbEps = 1e-6;

struct LossReport {
  double cls_loss = 0, reg_giou = 0, reg_l1 = 0, dn_loss = 0, total = 0;
  Regime regime = Regime::one_to_one;
};

// ĝ: IoU of a matched pair, used as soft classification target and
// regression weight
double quality_target(const Box& pred_box, const Box& gt_box);

// BCE(p, t) with p clamped to [kProbEps, 1 - kProbEps]
double bce(double p, double t);

struct MatchedCls {
  double p = 0;        // predicted probability of the matched gt's class
  double quality = 0;  // ĝ
};
// Σ_matched |ĝ−p|·BCE(p, ĝ) + Σ_unmatched p·BCE(p, 0); unmatched_p carries
// max class probabilities. Terms are summed in the given order.
double o2m_cls_loss(const std::vector<MatchedCls>& matched,
                    const std::vector<double>& unmatched_p);

// single-pair regression terms: (ĝ·(1 − giou_value), ĝ·l1_value)
std::pair<double, double> o2m_reg_terms(double quality, double giou_value, double l1_value);

struct MatchedReg {
  Box pred_box, gt_box;  // corner form
  double quality = 0;
};
// (Σ ĝ·(1 − GIoU), Σ ĝ·‖·‖₁) with L1 over (cx, cy, w, h) coordinates
std::pair<double, double> o2m_reg_loss(const std::vector<MatchedReg>& matched);

// one decoder layer's outputs on the tape
struct LayerOutput {
  nn::Tape::Id logits = -1;        // [N, C]; probabilities via per-class sigmoid
  nn::Tape::Id boxes_cxcywh = -1;  // [N, 4] normalized center form
};

// Denoising slot target, fixed when the dn queries are built. quality is the
// ĝ of the slot's (noised input box, gt) pair — constant during the loss.
struct DnSlotTarget {
  bool positive = false;
  int gt_index = -1;
  double quality = 1.0;
};

struct LossNodes {
  nn::Tape::Id cls = -1, reg_giou = -1, reg_l1 = -1, dn = -1, total = -1;
};

// Per-row GIoU of two [M,4] center-form box tensors (differentiable).
nn::Tape::Id giou_rows(nn::Tape& t, nn::Tape::Id a, nn::Tape::Id b);

// Builds the full loss graph for one image. Rows [0, num_matching) of each
// layer are the matching query slots the MatchResult refers to; remaining
// rows are dn slots in dn_slots order. The same match (and its ĝ) is applied
// to every layer. Throws when regime and match.regime disagree or shapes are
// inconsistent.
LossNodes compute_loss(nn::Tape& tape, const std::vector<LayerOutput>& layers, int num_matching,
                       const std::vector<LabeledBox>& gts, Regime regime,
                       const MatchResult& match, const std::vector<DnSlotTarget>& dn_slots);

LossReport read_report(const nn::Tape& tape, const LossNodes& nodes, Regime regime);

}  // namespace docdet
