#include "docdet/model.hpp"

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <stdexcept>

using nlohmann::json;

namespace docdet::nn {

namespace {

TransformerConfig transformer_config(const ModelSettings& ms) {
  TransformerConfig cfg;
  cfg.dim = ms.dim;
  cfg.heads = ms.heads;
  cfg.points = ms.points;
  cfg.levels = Backbone::kNumLevels;
  cfg.enc_layers = ms.enc_layers;
  cfg.dec_layers = ms.dec_layers;
  cfg.ffn_dim = ms.ffn_dim;
  cfg.num_queries = ms.num_queries;
  cfg.dn_box_noise = ms.dn_box_noise;
  cfg.dn_label_noise = ms.dn_label_noise;
  cfg.dn_groups = ms.dn_groups;
  return cfg;
}

Box clamped_corner(const std::array<double, 4>& cxcywh) {
  Box b = box_from_cxcywh(cxcywh[0], cxcywh[1], cxcywh[2], cxcywh[3]);
  b.x1 = std::clamp(b.x1, 0.0, 1.0);
  b.y1 = std::clamp(b.y1, 0.0, 1.0);
  b.x2 = std::clamp(b.x2, b.x1, 1.0);
  b.y2 = std::clamp(b.y2, b.y1, 1.0);
  return b;
}

}  // namespace

Model::Model(const ModelSettings& ms, int num_classes, std::uint64_t seed)
    : ms_(ms), num_classes_(num_classes) {
  ms.validate();
  if (num_classes <= 0) throw std::invalid_argument("Model: num_classes must be positive");
  Rng rng(seed);
  backbone_ = Backbone(params_, "backbone", ms.dim, rng);
  transformer_ = Transformer(params_, "det", transformer_config(ms), num_classes, rng);
  hybrid_ = QueryHybrid(params_, "hybrid", Backbone::kFusedChannels, ms.dim, ms.heads, rng,
                        ms.temperature);
  query_embed_ = params_.create("queries.content", {ms.num_queries, ms.dim});
  params_.at(query_embed_).value = Tensor::randn({ms.num_queries, ms.dim}, rng, 0.02);
}

Model::Forward Model::forward(Graph& g, const Tensor& image, Regime phase, bool training,
                              const std::vector<LabeledBox>& gts, Rng* dn_rng) {
  Forward fw;
  Backbone::Output feats = backbone_.apply(g, image);
  fw.memory = transformer_.encode(g, feats.levels);
  fw.proposals = transformer_.propose(g, fw.memory, ms_.num_queries);

  Tape::Id base = g.p(query_embed_);
  Tape::Id enhanced = Tape::kNone;
  if (phase == Regime::one_to_many) {
    std::vector<Box> rois;
    rois.reserve(fw.proposals.boxes.size());
    for (const auto& b : fw.proposals.boxes) rois.push_back(clamped_corner(b));
    Tape::Id region = hybrid_.extract_query_features(g, feats.fused_high, rois);
    enhanced = hybrid_.enhance(g, base, region);
  }
  AssembledQueries assembled = assemble_queries(g, phase, base, fw.proposals.boxes, enhanced,
                                                fw.proposals.boxes);
  fw.n_matching = assembled.n_base + assembled.n_enhanced;

  Tape::Id content = assembled.content;
  std::vector<std::array<double, 4>> boxes = assembled.boxes;
  Tensor mask({0});
  if (training && dn_rng != nullptr && !gts.empty()) {
    fw.dn = transformer_.build_dn_queries(g, gts, *dn_rng);
    if (fw.dn.content != Tape::kNone) {
      content = g.tape.concat_rows({content, fw.dn.content});
      boxes.insert(boxes.end(), fw.dn.boxes.begin(), fw.dn.boxes.end());
      mask = build_attention_mask(fw.n_matching, fw.dn.groups, fw.dn.group_size);
    }
  }
  DecodeOutput decoded = transformer_.decode(g, fw.memory, content, boxes, mask);
  fw.layers = std::move(decoded.layers);
  return fw;
}

std::vector<Detection> Model::predict(const Tensor& image) {
  Graph g(params_);
  Forward fw = forward(g, image, Regime::one_to_one, false, {}, nullptr);
  const Tensor& logits = g.tape.val(fw.layers.back().logits);
  const Tensor& boxes = g.tape.val(fw.layers.back().boxes_cxcywh);
  std::vector<Detection> dets;
  dets.reserve(static_cast<size_t>(fw.n_matching));
  for (int i = 0; i < fw.n_matching; ++i) {
    Detection d;
    d.box = clamped_corner({boxes.at(i, 0), boxes.at(i, 1), boxes.at(i, 2), boxes.at(i, 3)});
    d.class_scores.resize(static_cast<size_t>(num_classes_));
    for (int c = 0; c < num_classes_; ++c)
      d.class_scores[static_cast<size_t>(c)] = 1.0 / (1.0 + std::exp(-logits.at(i, c)));
    d.query_index = i;
    d.source_group = SourceGroup::decoder_original;
    dets.push_back(std::move(d));
  }
  return dets;
}

namespace {

constexpr char kMagic[8] = {'D', 'D', 'C', 'K', '0', '0', '0', '1'};

template <typename T>
void write_raw(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

void write_doubles(std::ofstream& out, const Tensor& t) {
  out.write(reinterpret_cast<const char*>(t.v.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

void read_doubles(std::ifstream& in, Tensor& t) {
  in.read(reinterpret_cast<char*>(t.v.data()),
          static_cast<std::streamsize>(t.numel() * sizeof(double)));
  if (!in) throw std::runtime_error("checkpoint: truncated tensor data");
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& store,
                     const CheckpointMeta& meta) {
  json cats = json::array();
  for (const auto& c : meta.categories) cats.push_back({{"id", c.id}, {"name", c.name}});
  json header = {{"config", json::parse(meta.config_json)},
                 {"epoch", meta.epoch},
                 {"adamw_steps", meta.adamw_steps},
                 {"categories", cats}};
  std::string head = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(kMagic, sizeof(kMagic));
  write_raw<std::uint64_t>(out, head.size());
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(store.size()));
  for (int i = 0; i < store.size(); ++i) {
    const Param& p = store.at(i);
    write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.rank()));
    for (int d = 0; d < p.value.rank(); ++d)
      write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.dim(d)));
    write_doubles(out, p.value);
    const bool moments = p.m.numel() == p.value.numel() && p.v.numel() == p.value.numel();
    write_raw<std::uint8_t>(out, moments ? 1 : 0);
    if (moments) {
      write_doubles(out, p.m);
      write_doubles(out, p.v);
    }
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

namespace {

std::ifstream open_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || !std::equal(magic, magic + 8, kMagic))
    throw std::runtime_error(path + ": not a checkpoint file");
  return in;
}

json read_header(std::ifstream& in, const std::string& path) {
  auto len = read_raw<std::uint64_t>(in);
  std::string head(len, '\0');
  in.read(head.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error(path + ": truncated header");
  try {
    return json::parse(head);
  } catch (const json::exception& e) {
    throw std::runtime_error(path + ": bad header: " + e.what());
  }
}

}  // namespace

CheckpointMeta read_checkpoint_meta(const std::string& path) {
  std::ifstream in = open_checkpoint(path);
  json header = read_header(in, path);
  CheckpointMeta meta;
  meta.config_json = header.at("config").dump();
  meta.epoch = header.at("epoch").get<int>();
  meta.adamw_steps = header.at("adamw_steps").get<int>();
  for (const auto& c : header.at("categories"))
    meta.categories.push_back({c.at("id").get<int>(), c.at("name").get<std::string>()});
  return meta;
}

void load_checkpoint_params(const std::string& path, ParamStore& store) {
  std::ifstream in = open_checkpoint(path);
  read_header(in, path);
  auto count = read_raw<std::uint32_t>(in);
  if (static_cast<int>(count) != store.size())
    throw std::runtime_error(path + ": parameter count mismatch");
  for (int i = 0; i < store.size(); ++i) {
    Param& p = store.at(i);
    auto name_len = read_raw<std::uint32_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in || name != p.name)
      throw std::runtime_error(path + ": parameter mismatch at '" + p.name + "'");
    auto rank = read_raw<std::uint32_t>(in);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(read_raw<std::uint32_t>(in));
    if (shape != p.value.shape)
      throw std::runtime_error(path + ": shape mismatch at '" + p.name + "'");
    read_doubles(in, p.value);
    if (read_raw<std::uint8_t>(in)) {
      p.m = Tensor::zeros(p.value.shape);
      p.v = Tensor::zeros(p.value.shape);
      read_doubles(in, p.m);
      read_doubles(in, p.v);
    } else {
      p.m = Tensor();
      p.v = Tensor();
    }
  }
}

}  // namespace docdet::nn
