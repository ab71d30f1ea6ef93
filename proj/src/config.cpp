#include "docdet/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

using nlohmann::json;

namespace docdet {

namespace {

void expect_keys(const json& j, const std::string& ctx, const std::set<std::string>& known) {
  if (!j.is_object()) throw std::invalid_argument(ctx + ": expected a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw std::invalid_argument(ctx + ": unknown key '" + key + "'");
}

template <typename T>
void pick(const json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) {
    try {
      out = it->get<T>();
    } catch (const json::exception&) {
      throw std::invalid_argument(std::string("config key '") + key + "' has the wrong type");
    }
  }
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  return j;
}

}  // namespace

void ModelSettings::validate() const {
  if (dim <= 0 || dim % 4 != 0) throw std::invalid_argument("model.dim must be a positive multiple of 4");
  if (heads <= 0 || dim % heads != 0)
    throw std::invalid_argument("model.dim must be divisible by model.heads");
  if (points <= 0) throw std::invalid_argument("model.points must be positive");
  if (enc_layers < 0 || dec_layers <= 0)
    throw std::invalid_argument("model layer counts out of range");
  if (ffn_dim <= 0) throw std::invalid_argument("model.ffn_dim must be positive");
  if (num_queries <= 0) throw std::invalid_argument("model.num_queries must be positive");
  if (dn_groups < 0) throw std::invalid_argument("model.dn_groups must be non-negative");
  if (dn_box_noise < 0 || dn_box_noise >= 0.5)
    throw std::invalid_argument("model.dn_box_noise must be in [0, 0.5)");
  if (dn_label_noise < 0 || dn_label_noise > 1)
    throw std::invalid_argument("model.dn_label_noise must be in [0, 1]");
  if (temperature <= 0) throw std::invalid_argument("model.temperature must be positive");
}

int TrainConfig::resolved_lr_drop_epoch() const {
  return lr_drop_epoch >= 0 ? lr_drop_epoch : (epochs * 3) / 4;
}

void TrainConfig::validate() const {
  if (train_dir.empty()) throw std::invalid_argument("train_dir must be set");
  if (out_dir.empty()) throw std::invalid_argument("out_dir must be set");
  if (epochs <= 0) throw std::invalid_argument("epochs must be positive");
  if (lr <= 0) throw std::invalid_argument("lr must be positive");
  if (lr_drop_factor < 1) throw std::invalid_argument("lr_drop_factor must be >= 1");
  if (resolved_lr_drop_epoch() > epochs)
    throw std::invalid_argument("lr_drop_epoch exceeds epochs");
  if (weight_decay < 0) throw std::invalid_argument("weight_decay must be non-negative");
  if (o2m_k < 1) throw std::invalid_argument("o2m_k must be at least 1");
  if (schedule != "hybrid" && schedule != "one_to_one_only" && schedule != "one_to_many_only")
    throw std::invalid_argument("schedule must be hybrid, one_to_one_only, or one_to_many_only");
  model.validate();
}

TrainConfig train_config_from_json(const json& j) {
  expect_keys(j, "config",
              {"seed", "train_dir", "val_dir", "out_dir", "epochs", "lr", "lr_drop_factor",
               "lr_drop_epoch", "weight_decay", "schedule", "o2m_k", "model"});
  TrainConfig c;
  pick(j, "seed", c.seed);
  pick(j, "train_dir", c.train_dir);
  pick(j, "val_dir", c.val_dir);
  pick(j, "out_dir", c.out_dir);
  pick(j, "epochs", c.epochs);
  pick(j, "lr", c.lr);
  pick(j, "lr_drop_factor", c.lr_drop_factor);
  pick(j, "lr_drop_epoch", c.lr_drop_epoch);
  pick(j, "weight_decay", c.weight_decay);
  pick(j, "schedule", c.schedule);
  pick(j, "o2m_k", c.o2m_k);
  if (auto it = j.find("model"); it != j.end()) {
    expect_keys(*it, "config.model",
                {"dim", "heads", "points", "enc_layers", "dec_layers", "ffn_dim", "num_queries",
                 "dn_groups", "dn_box_noise", "dn_label_noise", "temperature"});
    pick(*it, "dim", c.model.dim);
    pick(*it, "heads", c.model.heads);
    pick(*it, "points", c.model.points);
    pick(*it, "enc_layers", c.model.enc_layers);
    pick(*it, "dec_layers", c.model.dec_layers);
    pick(*it, "ffn_dim", c.model.ffn_dim);
    pick(*it, "num_queries", c.model.num_queries);
    pick(*it, "dn_groups", c.model.dn_groups);
    pick(*it, "dn_box_noise", c.model.dn_box_noise);
    pick(*it, "dn_label_noise", c.model.dn_label_noise);
    pick(*it, "temperature", c.model.temperature);
  }
  c.validate();
  return c;
}

json train_config_to_json(const TrainConfig& c) {
  return json{{"seed", c.seed},
              {"train_dir", c.train_dir},
              {"val_dir", c.val_dir},
              {"out_dir", c.out_dir},
              {"epochs", c.epochs},
              {"lr", c.lr},
              {"lr_drop_factor", c.lr_drop_factor},
              {"lr_drop_epoch", c.lr_drop_epoch},
              {"weight_decay", c.weight_decay},
              {"schedule", c.schedule},
              {"o2m_k", c.o2m_k},
              {"model",
               {{"dim", c.model.dim},
                {"heads", c.model.heads},
                {"points", c.model.points},
                {"enc_layers", c.model.enc_layers},
                {"dec_layers", c.model.dec_layers},
                {"ffn_dim", c.model.ffn_dim},
                {"num_queries", c.model.num_queries},
                {"dn_groups", c.model.dn_groups},
                {"dn_box_noise", c.model.dn_box_noise},
                {"dn_label_noise", c.model.dn_label_noise},
                {"temperature", c.model.temperature}}}};
}

TrainConfig load_train_config(const std::string& path) {
  return train_config_from_json(read_json_file(path));
}

LayoutSpec layout_spec_from_json(const json& j) {
  expect_keys(j, "layout spec",
              {"page_height", "page_width", "categories", "category_weights", "min_elements",
               "max_elements", "small_fraction", "overlap_tolerance"});
  std::string preset = "five";
  pick(j, "categories", preset);
  LayoutSpec spec;
  if (preset == "five")
    spec = five_category_spec();
  else if (preset == "eleven")
    spec = eleven_category_spec();
  else
    throw std::invalid_argument("layout spec: categories must be 'five' or 'eleven'");
  pick(j, "page_height", spec.page_height);
  pick(j, "page_width", spec.page_width);
  pick(j, "min_elements", spec.min_elements);
  pick(j, "max_elements", spec.max_elements);
  pick(j, "small_fraction", spec.small_fraction);
  pick(j, "overlap_tolerance", spec.overlap_tolerance);
  if (auto it = j.find("category_weights"); it != j.end()) {
    auto weights = it->get<std::vector<double>>();
    if (weights.size() != spec.categories.size())
      throw std::invalid_argument("layout spec: category_weights length mismatch");
    spec.category_weights = std::move(weights);
  }
  spec.validate();
  return spec;
}

LayoutSpec load_layout_spec(const std::string& path) {
  return layout_spec_from_json(read_json_file(path));
}

Regime schedule_regime(const std::string& schedule, int epoch, int total_epochs) {
  if (schedule == "hybrid") return phase_for_epoch(epoch, total_epochs);
  if (schedule == "one_to_one_only") return Regime::one_to_one;
  if (schedule == "one_to_many_only") return Regime::one_to_many;
  throw std::invalid_argument("unknown schedule '" + schedule + "'");
}

}  // namespace docdet
