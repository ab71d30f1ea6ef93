#include "docdet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "docdet/criterion.hpp"
#include "docdet/image.hpp"

using nlohmann::json;

namespace docdet {

namespace {

namespace fs = std::filesystem;
using nn::Graph;
using nn::Model;
using nn::Tensor;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

int class_index(const std::vector<CocoCategory>& sorted_cats, int category_id) {
  for (size_t i = 0; i < sorted_cats.size(); ++i)
    if (sorted_cats[i].id == category_id) return static_cast<int>(i);
  throw std::runtime_error("unknown category id " + std::to_string(category_id));
}

// Matching-slot detections from the last decoder layer's values.
std::vector<Detection> matching_detections(const Graph& g, const Model::Forward& fw,
                                           int num_classes, int n_base) {
  const Tensor& logits = g.tape.val(fw.layers.back().logits);
  const Tensor& boxes = g.tape.val(fw.layers.back().boxes_cxcywh);
  std::vector<Detection> dets(static_cast<size_t>(fw.n_matching));
  for (int i = 0; i < fw.n_matching; ++i) {
    Detection& d = dets[static_cast<size_t>(i)];
    d.box = box_from_cxcywh(boxes.at(i, 0), boxes.at(i, 1), boxes.at(i, 2), boxes.at(i, 3));
    d.class_scores.resize(static_cast<size_t>(num_classes));
    for (int c = 0; c < num_classes; ++c)
      d.class_scores[static_cast<size_t>(c)] = sigmoid(logits.at(i, c));
    d.query_index = i;
    d.source_group = i < n_base ? SourceGroup::decoder_original : SourceGroup::enhanced;
  }
  return dets;
}

std::vector<Box> detection_boxes(const std::vector<Detection>& dets) {
  std::vector<Box> out;
  out.reserve(dets.size());
  for (const auto& d : dets) out.push_back(d.box);
  return out;
}

// Class-agnostic loss on the proposal head: every gt collapses to class 0,
// matched one-to-one against the top-k scores.
LossNodes proposal_loss(Graph& g, const Model::Forward& fw,
                            const std::vector<LabeledBox>& gts) {
  const Tensor& logits = g.tape.val(fw.proposals.topk_logits);
  const int k = logits.rows();
  std::vector<Detection> dets(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) {
    Detection& d = dets[static_cast<size_t>(i)];
    const auto& b = fw.proposals.boxes[static_cast<size_t>(i)];
    d.box = box_from_cxcywh(b[0], b[1], b[2], b[3]);
    d.class_scores = {sigmoid(logits.at(i, 0))};
    d.query_index = i;
  }
  std::vector<LabeledBox> agnostic = gts;
  for (auto& gt : agnostic) gt.category = 0;
  MatchResult match = hungarian(cost_matrix(dets, agnostic, MatchWeights{}));
  attach_quality(match, detection_boxes(dets), agnostic);
  LayerOutput head{fw.proposals.topk_logits, fw.proposals.topk_boxes};
  return compute_loss(g.tape, {head}, k, agnostic, Regime::one_to_one, match, {});
}

}  // namespace

std::vector<CocoCategory> sorted_categories(const std::vector<CocoCategory>& cats) {
  std::vector<CocoCategory> out = cats;
  std::sort(out.begin(), out.end(),
            [](const CocoCategory& a, const CocoCategory& b) { return a.id < b.id; });
  for (size_t i = 1; i < out.size(); ++i)
    if (out[i].id == out[i - 1].id)
      throw std::runtime_error("duplicate category id " + std::to_string(out[i].id));
  return out;
}

std::vector<LabeledBox> normalized_gts(const LayoutSample& s,
                                       const std::vector<CocoCategory>& sorted_cats) {
  const double w = s.image.width, h = s.image.height;
  std::vector<LabeledBox> out;
  out.reserve(s.annotations.size());
  for (const auto& a : s.annotations) {
    LabeledBox gt;
    gt.box = {a.box.x1 / w, a.box.y1 / h, a.box.x2 / w, a.box.y2 / h};
    gt.category = class_index(sorted_cats, a.category);
    out.push_back(gt);
  }
  return out;
}

Model model_from_checkpoint(const std::string& path, nn::CheckpointMeta* meta_out) {
  nn::CheckpointMeta meta = nn::read_checkpoint_meta(path);
  TrainConfig cfg = train_config_from_json(json::parse(meta.config_json));
  Model model(cfg.model, static_cast<int>(meta.categories.size()), cfg.seed);
  nn::load_checkpoint_params(path, model.params());
  if (meta_out) *meta_out = std::move(meta);
  return model;
}

EvalReport evaluate_model(Model& model, const std::vector<LayoutSample>& samples,
                          const std::vector<CocoCategory>& categories, const EvalOptions& opt) {
  std::vector<CocoCategory> cats = sorted_categories(categories);
  if (static_cast<int>(cats.size()) != model.num_classes())
    throw std::runtime_error("evaluate_model: category count does not match the model");
  std::vector<int> ids;
  for (const auto& c : cats) ids.push_back(c.id);

  std::vector<ImageEval> images;
  images.reserve(samples.size());
  for (const auto& s : samples) {
    ImageEval ie;
    ie.image_id = s.image_id;
    ie.gts = s.annotations;
    std::vector<Detection> dets = model.predict(image_to_tensor(s.image));
    if (opt.use_nms) {
      dets = nms(dets, opt.nms_iou, opt.score_threshold);
    } else {
      std::erase_if(dets, [&](const Detection& d) { return max_score(d) < opt.score_threshold; });
    }
    for (const auto& d : dets) {
      ScoredBox sb;
      sb.box = {d.box.x1 * s.image.width, d.box.y1 * s.image.height, d.box.x2 * s.image.width,
                d.box.y2 * s.image.height};
      sb.category = ids[static_cast<size_t>(argmax_class(d))];
      sb.score = max_score(d);
      ie.preds.push_back(sb);
    }
    images.push_back(std::move(ie));
  }
  return evaluate(images, ids);
}

TrainResult train(const TrainConfig& cfg, const std::string& resume_from, std::ostream* log) {
  cfg.validate();
  CocoDataset data = read_coco(cfg.train_dir);
  if (data.samples.empty()) throw std::runtime_error("no training images in " + cfg.train_dir);
  std::vector<CocoCategory> cats = sorted_categories(data.categories);
  const int num_classes = static_cast<int>(cats.size());
  const std::string config_dump = train_config_to_json(cfg).dump();

  Model model(cfg.model, num_classes, cfg.seed);
  nn::AdamW opt({cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  int start_epoch = 0;
  if (!resume_from.empty()) {
    nn::CheckpointMeta meta = nn::read_checkpoint_meta(resume_from);
    if (meta.config_json != config_dump)
      throw std::runtime_error("resume config differs from " + resume_from);
    nn::load_checkpoint_params(resume_from, model.params());
    opt.set_steps_taken(meta.adamw_steps);
    start_epoch = meta.epoch + 1;
  }

  fs::create_directories(cfg.out_dir);
  const std::string ckpt_path = (fs::path(cfg.out_dir) / "last.ckpt").string();
  std::ofstream metrics(fs::path(cfg.out_dir) / "metrics.jsonl",
                        resume_from.empty() ? std::ios::trunc : std::ios::app);
  if (!metrics) throw std::runtime_error("cannot write metrics in " + cfg.out_dir);

  const int n = static_cast<int>(data.samples.size());
  const int drop_epoch = cfg.resolved_lr_drop_epoch();
  TrainResult result;
  result.last_epoch = start_epoch - 1;
  result.checkpoint = ckpt_path;

  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const Regime regime = schedule_regime(cfg.schedule, epoch, cfg.epochs);
    const double lr = epoch >= drop_epoch ? cfg.lr / cfg.lr_drop_factor : cfg.lr;
    opt.config().lr = lr;

    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = Rng::child(cfg.seed, 0x100000000ull + static_cast<std::uint64_t>(epoch));
    for (int i = n - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)],
                order[static_cast<size_t>(shuffle_rng.uniform_int(0, i))]);

    EpochStats st;
    st.epoch = epoch;
    st.regime = regime;
    st.lr = lr;
    std::int64_t pairs_total = 0, gts_total = 0;
    for (int idx : order) {
      const LayoutSample& s = data.samples[static_cast<size_t>(idx)];
      std::vector<LabeledBox> gts = normalized_gts(s, cats);
      Rng dn_rng = Rng::child(cfg.seed, 0x200000000ull ^ (static_cast<std::uint64_t>(epoch) << 24) ^
                                            static_cast<std::uint64_t>(s.image_id));
      Graph g(model.params());
      Model::Forward fw =
          model.forward(g, image_to_tensor(s.image), regime, true, gts, &dn_rng);

      std::vector<Detection> dets =
          matching_detections(g, fw, num_classes, cfg.model.num_queries);
      Eigen::MatrixXd cost = cost_matrix(dets, gts, MatchWeights{});
      MatchResult match = regime == Regime::one_to_many ? one_to_many_assign(cost, cfg.o2m_k)
                                                        : hungarian(cost);
      attach_quality(match, detection_boxes(dets), gts);

      LossNodes main = compute_loss(g.tape, fw.layers, fw.n_matching, gts, regime, match,
                                            fw.dn.targets);
      LossNodes enc = proposal_loss(g, fw, gts);
      nn::Tape::Id grand = g.tape.add(main.total, enc.total);
      g.tape.backward(grand);
      opt.step(model.params(), g.grads());

      LossReport mr = read_report(g.tape, main, regime);
      LossReport er = read_report(g.tape, enc, Regime::one_to_one);
      st.matching_slots = fw.n_matching;
      st.dn_slots += static_cast<double>(fw.dn.targets.size());
      st.loss += mr.total + er.total;
      st.cls += mr.cls_loss;
      st.giou += mr.reg_giou;
      st.l1 += mr.reg_l1;
      st.dn += mr.dn_loss;
      st.enc += er.total;
      pairs_total += static_cast<std::int64_t>(match.pairs.size());
      gts_total += static_cast<std::int64_t>(gts.size());
    }
    st.dn_slots /= n;
    st.loss /= n;
    st.cls /= n;
    st.giou /= n;
    st.l1 /= n;
    st.dn /= n;
    st.enc /= n;
    st.matched_per_gt = gts_total > 0 ? static_cast<double>(pairs_total) / gts_total : 0.0;

    nn::CheckpointMeta meta;
    meta.config_json = config_dump;
    meta.epoch = epoch;
    meta.adamw_steps = opt.steps_taken();
    meta.categories = cats;
    nn::save_checkpoint(ckpt_path, model.params(), meta);

    const char* phase = regime == Regime::one_to_many ? "one_to_many" : "one_to_one";
    metrics << json{{"epoch", epoch},
                    {"phase", phase},
                    {"queries", st.matching_slots},
                    {"dn_slots", st.dn_slots},
                    {"loss", st.loss},
                    {"cls", st.cls},
                    {"giou", st.giou},
                    {"l1", st.l1},
                    {"dn", st.dn},
                    {"enc", st.enc},
                    {"matched_per_gt", st.matched_per_gt},
                    {"lr", st.lr}}
                   .dump()
            << "\n"
            << std::flush;
    if (log)
      *log << "epoch " << epoch << " [" << phase << "] loss " << st.loss << " matched/gt "
           << st.matched_per_gt << " lr " << lr << "\n";
    result.history.push_back(st);
    result.last_epoch = epoch;
  }

  if (!cfg.val_dir.empty()) {
    CocoDataset val = read_coco(cfg.val_dir);
    result.final_eval = evaluate_model(model, val.samples, val.categories, EvalOptions{});
    result.evaluated = true;
    metrics << json{{"event", "final_eval"},
                    {"map", result.final_eval.map},
                    {"ap50", result.final_eval.ap50},
                    {"ap75", result.final_eval.ap75},
                    {"duplicate_rate", result.final_eval.duplicate_rate}}
                   .dump()
            << "\n";
    if (log)
      *log << "val mAP " << result.final_eval.map << " AP50 " << result.final_eval.ap50 << "\n";
  }
  return result;
}

}  // namespace docdet
