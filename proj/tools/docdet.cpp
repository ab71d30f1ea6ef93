#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "docdet/coco_io.hpp"
#include "docdet/config.hpp"
#include "docdet/hash.hpp"
#include "docdet/image.hpp"
#include "docdet/trainer.hpp"

using namespace docdet;
using nlohmann::json;

namespace {

namespace fs = std::filesystem;

LayoutSpec resolve_spec(const std::string& arg) {
  if (arg == "five") return five_category_spec();
  if (arg == "eleven") return eleven_category_spec();
  if (fs::exists(arg)) return load_layout_spec(arg);
  throw std::runtime_error("spec '" + arg + "' is neither a preset name nor a file");
}

int run_generate(const std::string& spec_arg, int count, std::uint64_t seed,
                 const std::string& out) {
  LayoutSpec spec = resolve_spec(spec_arg);
  std::vector<LayoutSample> samples = generate_corpus(spec, seed, count);
  std::vector<CocoCategory> cats;
  for (size_t i = 0; i < spec.categories.size(); ++i)
    cats.push_back({static_cast<int>(i) + 1, spec.categories[i]});
  write_coco(out, samples, cats);

  std::map<int, int> per_cat;
  size_t boxes = 0;
  for (const auto& s : samples) {
    boxes += s.annotations.size();
    for (const auto& a : s.annotations) per_cat[a.category]++;
  }
  std::printf("pages      %zu (%dx%d)\n", samples.size(), spec.page_width, spec.page_height);
  std::printf("boxes      %zu (%.2f per page)\n", boxes,
              samples.empty() ? 0.0 : double(boxes) / double(samples.size()));
  for (const auto& c : cats)
    std::printf("  %-16s %d\n", c.name.c_str(), per_cat.count(c.id) ? per_cat[c.id] : 0);
  std::printf("checksum   %016" PRIx64 "\n", corpus_checksum(out));
  return 0;
}

json report_json(const EvalReport& r) {
  json per = json::array();
  for (const auto& [cat, ap] : r.per_class) per.push_back({{"category", cat}, {"ap", ap}});
  return {{"map", r.map},           {"ap50", r.ap50},
          {"ap75", r.ap75},         {"ap_small", r.ap_small},
          {"ap_medium", r.ap_medium}, {"ap_large", r.ap_large},
          {"per_class", per},       {"duplicate_rate", r.duplicate_rate}};
}

void print_report(const char* tag, const EvalReport& r,
                  const std::vector<CocoCategory>& cats) {
  std::printf("[%s]\n", tag);
  std::printf("  mAP %.4f  AP50 %.4f  AP75 %.4f\n", r.map, r.ap50, r.ap75);
  std::printf("  small %.4f  medium %.4f  large %.4f\n", r.ap_small, r.ap_medium, r.ap_large);
  for (const auto& [cat, ap] : r.per_class) {
    std::string name = std::to_string(cat);
    for (const auto& c : cats)
      if (c.id == cat) name = c.name;
    std::printf("  %-16s %.4f\n", name.c_str(), ap);
  }
  std::printf("  duplicate_rate %.4f\n", r.duplicate_rate);
}

int run_evaluate(const std::string& ckpt, const std::string& data_dir, const std::string& nms_mode,
                 double score_threshold, const std::string& out_path) {
  nn::CheckpointMeta meta;
  nn::Model model = model_from_checkpoint(ckpt, &meta);
  CocoDataset data = read_coco(data_dir);
  for (const auto& w : data.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());

  json out = json::object();
  EvalOptions opt;
  opt.score_threshold = score_threshold;
  if (nms_mode != "off") {
    opt.use_nms = true;
    EvalReport r = evaluate_model(model, data.samples, data.categories, opt);
    print_report("nms on", r, meta.categories);
    out["nms_on"] = report_json(r);
  }
  if (nms_mode != "on") {
    opt.use_nms = false;
    EvalReport r = evaluate_model(model, data.samples, data.categories, opt);
    print_report("nms off", r, meta.categories);
    out["nms_off"] = report_json(r);
  }
  if (!out_path.empty()) {
    std::ofstream f(out_path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + out_path);
    f << out.dump(2) << "\n";
  }
  return 0;
}

int run_infer(const std::string& ckpt, const std::string& data_dir, const std::string& out_dir,
              double threshold, bool render) {
  nn::CheckpointMeta meta;
  nn::Model model = model_from_checkpoint(ckpt, &meta);
  CocoDataset data = read_coco(data_dir);
  std::vector<CocoCategory> cats = sorted_categories(meta.categories);

  fs::create_directories(out_dir);
  if (render) fs::create_directories(fs::path(out_dir) / "renders");
  std::vector<CocoResult> results;
  for (const auto& s : data.samples) {
    std::vector<Detection> dets = model.predict(image_to_tensor(s.image));
    dets = nms(dets, 0.5, threshold);
    Image canvas = s.image;
    for (const auto& gt : s.annotations)
      draw_rect_outline(canvas, int(gt.box.x1), int(gt.box.y1), int(gt.box.x2 + 1),
                        int(gt.box.y2 + 1), 1, {0, 0, 255});
    for (const auto& d : dets) {
      Box px{d.box.x1 * s.image.width, d.box.y1 * s.image.height, d.box.x2 * s.image.width,
             d.box.y2 * s.image.height};
      results.push_back({s.image_id, cats[size_t(argmax_class(d))].id, xywh_from_box(px),
                         max_score(d)});
      if (render)
        draw_rect_outline(canvas, int(px.x1 + 0.5), int(px.y1 + 0.5), int(px.x2 + 0.5),
                          int(px.y2 + 0.5), 1, {255, 0, 0});
    }
    if (render) {
      char name[64];
      std::snprintf(name, sizeof name, "%06d.png", s.image_id);
      write_png((fs::path(out_dir) / "renders" / name).string(), canvas);
    }
  }
  write_results((fs::path(out_dir) / "predictions.json").string(), results);
  std::printf("%zu predictions over %zu images -> %s\n", results.size(), data.samples.size(),
              out_dir.c_str());
  return 0;
}

int run_ablate(const std::string& config_path, const std::vector<int>& query_counts,
               const std::string& out_path) {
  TrainConfig base = load_train_config(config_path);
  if (base.val_dir.empty()) throw std::runtime_error("ablation needs a val_dir in the config");
  json rows = json::array();
  std::printf("%6s %8s %8s %8s %10s\n", "N", "mAP", "AP50", "AP75", "dup_rate");
  for (int n : query_counts) {
    TrainConfig cfg = base;
    cfg.model.num_queries = n;
    cfg.out_dir = (fs::path(base.out_dir) / ("n" + std::to_string(n))).string();
    cfg.validate();
    TrainResult res = train(cfg, "", &std::cerr);
    if (!res.evaluated) throw std::runtime_error("training produced no evaluation");
    const EvalReport& r = res.final_eval;
    std::printf("%6d %8.4f %8.4f %8.4f %10.4f\n", n, r.map, r.ap50, r.ap75, r.duplicate_rate);
    rows.push_back({{"num_queries", n},
                    {"checkpoint", res.checkpoint},
                    {"report", report_json(r)}});
  }
  if (!out_path.empty()) {
    std::ofstream f(out_path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + out_path);
    f << rows.dump(2) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hybrid-query layout detector"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("generate-data", "render a synthetic page corpus");
  std::string gen_spec = "five", gen_out = "data/train";
  int gen_count = 500;
  std::uint64_t gen_seed = 1;
  gen->add_option("--spec", gen_spec, "preset name (five|eleven) or a spec file");
  gen->add_option("--count", gen_count, "pages to render")->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "corpus seed");
  gen->add_option("--out", gen_out, "output directory")->required();

  auto* tr = app.add_subcommand("train", "train from a config file");
  std::string tr_config, tr_resume;
  tr->add_option("config", tr_config, "train config (json)")->required();
  tr->add_option("--resume", tr_resume, "checkpoint to continue from");

  auto* ev = app.add_subcommand("evaluate", "score a checkpoint on a dataset");
  std::string ev_ckpt, ev_data, ev_nms = "both", ev_out;
  double ev_score = 0.05;
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--nms", ev_nms)->check(CLI::IsMember({"on", "off", "both"}));
  ev->add_option("--score-threshold", ev_score);
  ev->add_option("--out", ev_out, "write the report as json");

  auto* in = app.add_subcommand("infer", "predict and render boxes (gt blue, predictions red)");
  in->alias("render");
  std::string in_ckpt, in_data, in_out;
  double in_threshold = 0.3;
  bool in_render = true;
  in->add_option("--checkpoint", in_ckpt)->required();
  in->add_option("--data", in_data, "dataset directory")->required();
  in->add_option("--out", in_out, "output directory")->required();
  in->add_option("--threshold", in_threshold, "score cutoff");
  in->add_flag("--render,!--no-render", in_render, "write annotated pngs");

  auto* ab = app.add_subcommand("ablate-queries", "train and score per query-count");
  std::string ab_config, ab_out;
  std::vector<int> ab_counts = {25, 50, 100, 200};
  ab->add_option("config", ab_config, "train config (json)")->required();
  ab->add_option("--queries", ab_counts, "query counts to sweep");
  ab->add_option("--out", ab_out, "write the table as json");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) return run_generate(gen_spec, gen_count, gen_seed, gen_out);
    if (*tr) {
      TrainResult res = train(load_train_config(tr_config), tr_resume, &std::cout);
      std::printf("done: epoch %d, checkpoint %s\n", res.last_epoch, res.checkpoint.c_str());
      return 0;
    }
    if (*ev) return run_evaluate(ev_ckpt, ev_data, ev_nms, ev_score, ev_out);
    if (*in) return run_infer(in_ckpt, in_data, in_out, in_threshold, in_render);
    if (*ab) return run_ablate(ab_config, ab_counts, ab_out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
