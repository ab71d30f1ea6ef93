#include "docdet/criterion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace docdet {

using nn::Tape;
using nn::Tensor;

double quality_target(const Box& pred_box, const Box& gt_box) {
  return std::max(0.0, iou(pred_box, gt_box));
}

double bce(double p, double t) {
  p = std::min(std::max(p, kProbEps), 1.0 - kProbEps);
  return -(t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
}

double o2m_cls_loss(const std::vector<MatchedCls>& matched,
                    const std::vector<double>& unmatched_p) {
  double loss = 0.0;
  for (const auto& m : matched) loss += std::abs(m.quality - m.p) * bce(m.p, m.quality);
  for (double p : unmatched_p) loss += p * bce(p, 0.0);
  return loss;
}

std::pair<double, double> o2m_reg_terms(double quality, double giou_value, double l1_value) {
  return {quality * (1.0 - giou_value), quality * l1_value};
}

std::pair<double, double> o2m_reg_loss(const std::vector<MatchedReg>& matched) {
  double g = 0.0, l = 0.0;
  for (const auto& m : matched) {
    auto pc = box_to_cxcywh(m.pred_box);
    auto gc = box_to_cxcywh(m.gt_box);
    double l1 = 0.0;
    for (int d = 0; d < 4; ++d) l1 += std::abs(pc[static_cast<size_t>(d)] - gc[static_cast<size_t>(d)]);
    auto [gt, lt] = o2m_reg_terms(m.quality, giou(m.pred_box, m.gt_box), l1);
    g += gt;
    l += lt;
  }
  return {g, l};
}

namespace {

// column slices of a [M,4] center-form tensor -> corner coordinates [M,1]
struct Corners {
  Tape::Id x1, y1, x2, y2, w, h;
};

Corners to_corners(Tape& t, Tape::Id boxes) {
  Corners c;
  auto cx = t.slice_cols(boxes, 0, 1);
  auto cy = t.slice_cols(boxes, 1, 2);
  c.w = t.slice_cols(boxes, 2, 3);
  c.h = t.slice_cols(boxes, 3, 4);
  auto wh2 = t.affine(c.w, 0.5, 0.0);
  auto hh2 = t.affine(c.h, 0.5, 0.0);
  c.x1 = t.sub(cx, wh2);
  c.x2 = t.add(cx, wh2);
  c.y1 = t.sub(cy, hh2);
  c.y2 = t.add(cy, hh2);
  return c;
}

}  // namespace

Tape::Id giou_rows(Tape& t, Tape::Id a, Tape::Id b) {
  Corners ca = to_corners(t, a), cb = to_corners(t, b);
  auto iw = t.relu(t.sub(t.minimum(ca.x2, cb.x2), t.maximum(ca.x1, cb.x1)));
  auto ih = t.relu(t.sub(t.minimum(ca.y2, cb.y2), t.maximum(ca.y1, cb.y1)));
  auto inter = t.mul(iw, ih);
  auto area = t.add(t.mul(ca.w, ca.h), t.mul(cb.w, cb.h));
  auto uni = t.sub(area, inter);
  auto ew = t.sub(t.maximum(ca.x2, cb.x2), t.minimum(ca.x1, cb.x1));
  auto eh = t.sub(t.maximum(ca.y2, cb.y2), t.minimum(ca.y1, cb.y1));
  auto enc = t.mul(ew, eh);
  return t.sub(t.div(inter, uni), t.div(t.sub(enc, uni), enc));
}

namespace {

// |ĝ−p|·BCE(p, ĝ) summed over rows; p and quality are [M,1]
Tape::Id weighted_bce_sum(Tape& t, Tape::Id p, Tape::Id quality) {
  auto phat = t.clamp(p, kProbEps, 1.0 - kProbEps);
  auto one_minus = t.affine(phat, -1.0, 1.0);
  auto q1 = t.affine(quality, -1.0, 1.0);  // 1−ĝ
  auto bce_v = t.neg(t.add(t.mul(quality, t.log(phat)), t.mul(q1, t.log(one_minus))));
  auto w = t.abs(t.sub(quality, p));
  return t.sum_all(t.mul(w, bce_v));
}

// p·BCE(p, 0) summed over rows; p is [U,1]
Tape::Id background_bce_sum(Tape& t, Tape::Id p) {
  auto phat = t.clamp(p, kProbEps, 1.0 - kProbEps);
  auto bce0 = t.neg(t.log(t.affine(phat, -1.0, 1.0)));
  return t.sum_all(t.mul(p, bce0));
}

// per-row probability of a designated class: [M,C] probs -> [M,1]
Tape::Id select_class(Tape& t, Tape::Id probs, const std::vector<int>& cls, int c) {
  int m = static_cast<int>(cls.size());
  Tensor onehot({m, c});
  for (int i = 0; i < m; ++i) onehot.at(i, cls[static_cast<size_t>(i)]) = 1.0;
  auto sel = t.sum_rows(t.mul(probs, t.constant(std::move(onehot))));
  return t.reshape(sel, {m, 1});
}

}  // namespace

LossNodes compute_loss(Tape& tape, const std::vector<LayerOutput>& layers, int num_matching,
                       const std::vector<LabeledBox>& gts, Regime regime,
                       const MatchResult& match, const std::vector<DnSlotTarget>& dn_slots) {
  if (regime != match.regime)
    throw std::invalid_argument("compute_loss: regime does not match the assignment regime");
  if (layers.empty()) throw std::invalid_argument("compute_loss: no decoder layers");
  const int n = num_matching + static_cast<int>(dn_slots.size());
  const int num_classes = tape.val(layers[0].logits).cols();
  for (const auto& l : layers) {
    if (tape.val(l.logits).rows() != n || tape.val(l.boxes_cxcywh).rows() != n ||
        tape.val(l.boxes_cxcywh).cols() != 4)
      throw std::invalid_argument("compute_loss: layer shape mismatch");
  }
  if (static_cast<int>(match.pairs.size() + match.unmatched_queries.size()) != num_matching)
    throw std::invalid_argument("compute_loss: match does not cover the matching slots");

  // canonical order: ascending query index
  std::vector<MatchPair> pairs = match.pairs;
  std::sort(pairs.begin(), pairs.end(),
            [](const MatchPair& a, const MatchPair& b) { return a.query_index < b.query_index; });
  std::vector<int> unmatched = match.unmatched_queries;
  std::sort(unmatched.begin(), unmatched.end());

  const int m = static_cast<int>(pairs.size());
  std::vector<int> midx, mcls;
  Tensor mqual({std::max(m, 1), 1});
  Tensor mgt({std::max(m, 1), 4});
  for (int i = 0; i < m; ++i) {
    const auto& p = pairs[static_cast<size_t>(i)];
    if (p.query_index < 0 || p.query_index >= num_matching)
      throw std::invalid_argument("compute_loss: pair query index out of range");
    midx.push_back(p.query_index);
    mcls.push_back(gts.at(static_cast<size_t>(p.gt_index)).category);
    mqual.at(i, 0) = p.quality;
    auto gc = box_to_cxcywh(gts[static_cast<size_t>(p.gt_index)].box);
    for (int d = 0; d < 4; ++d) mgt.at(i, d) = gc[static_cast<size_t>(d)];
  }

  LossNodes out;
  Tape::Id cls = tape.scalar(0.0), reg_g = tape.scalar(0.0), reg_l = tape.scalar(0.0),
           dn = tape.scalar(0.0);
  Tape::Id mqual_c = m > 0 ? tape.constant(mqual) : Tape::kNone;
  Tape::Id mgt_c = m > 0 ? tape.constant(mgt) : Tape::kNone;

  for (const auto& layer : layers) {
    auto probs = tape.sigmoid(layer.logits);
    if (m > 0) {
      auto pm = tape.gather_rows(probs, midx);
      auto p_sel = select_class(tape, pm, mcls, num_classes);
      cls = tape.add(cls, weighted_bce_sum(tape, p_sel, mqual_c));
      auto bm = tape.gather_rows(layer.boxes_cxcywh, midx);
      auto g = giou_rows(tape, bm, mgt_c);
      auto ones = tape.constant(Tensor::full({m, 1}, 1.0));
      reg_g = tape.add(reg_g, tape.sum_all(tape.mul(mqual_c, tape.sub(ones, g))));
      auto l1 = tape.reshape(tape.sum_rows(tape.abs(tape.sub(bm, mgt_c))), {m, 1});
      reg_l = tape.add(reg_l, tape.sum_all(tape.mul(mqual_c, l1)));
    }
    if (!unmatched.empty()) {
      auto pu = tape.gather_rows(probs, unmatched);
      auto pmax = tape.reshape(tape.max_rows(pu), {static_cast<int>(unmatched.size()), 1});
      cls = tape.add(cls, background_bce_sum(tape, pmax));
    }
    if (!dn_slots.empty()) {
      std::vector<int> pos_idx, pos_cls, neg_idx;
      std::vector<double> pos_qual;
      std::vector<const LabeledBox*> pos_gt;
      for (int s = 0; s < static_cast<int>(dn_slots.size()); ++s) {
        const auto& slot = dn_slots[static_cast<size_t>(s)];
        int row = num_matching + s;
        if (slot.positive) {
          pos_idx.push_back(row);
          const LabeledBox& gt = gts.at(static_cast<size_t>(slot.gt_index));
          pos_cls.push_back(gt.category);
          pos_qual.push_back(slot.quality);
          pos_gt.push_back(&gt);
        } else {
          neg_idx.push_back(row);
        }
      }
      if (!pos_idx.empty()) {
        int np = static_cast<int>(pos_idx.size());
        Tensor qual({np, 1}), gtb({np, 4});
        for (int i = 0; i < np; ++i) {
          qual.at(i, 0) = pos_qual[static_cast<size_t>(i)];
          auto gc = box_to_cxcywh(pos_gt[static_cast<size_t>(i)]->box);
          for (int d = 0; d < 4; ++d) gtb.at(i, d) = gc[static_cast<size_t>(d)];
        }
        auto qual_c = tape.constant(qual);
        auto gtb_c = tape.constant(gtb);
        auto pp = tape.gather_rows(probs, pos_idx);
        auto p_sel = select_class(tape, pp, pos_cls, num_classes);
        dn = tape.add(dn, weighted_bce_sum(tape, p_sel, qual_c));
        auto bp = tape.gather_rows(layer.boxes_cxcywh, pos_idx);
        auto g = giou_rows(tape, bp, gtb_c);
        auto ones = tape.constant(Tensor::full({np, 1}, 1.0));
        dn = tape.add(dn, tape.sum_all(tape.mul(qual_c, tape.sub(ones, g))));
        auto l1 = tape.reshape(tape.sum_rows(tape.abs(tape.sub(bp, gtb_c))), {np, 1});
        dn = tape.add(dn, tape.sum_all(tape.mul(qual_c, l1)));
      }
      if (!neg_idx.empty()) {
        auto pn = tape.gather_rows(probs, neg_idx);
        auto pmax = tape.reshape(tape.max_rows(pn), {static_cast<int>(neg_idx.size()), 1});
        dn = tape.add(dn, background_bce_sum(tape, pmax));
      }
    }
  }

  out.cls = cls;
  out.reg_giou = reg_g;
  out.reg_l1 = reg_l;
  out.dn = dn;
  out.total = tape.add(tape.add(cls, reg_g), tape.add(reg_l, dn));
  return out;
}

LossReport read_report(const Tape& tape, const LossNodes& nodes, Regime regime) {
  LossReport r;
  r.cls_loss = tape.val(nodes.cls).v[0];
  r.reg_giou = tape.val(nodes.reg_giou).v[0];
  r.reg_l1 = tape.val(nodes.reg_l1).v[0];
  r.dn_loss = tape.val(nodes.dn).v[0];
  r.total = tape.val(nodes.total).v[0];
  r.regime = regime;
  return r;
}

}  // namespace docdet
