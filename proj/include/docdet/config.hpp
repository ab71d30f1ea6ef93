#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "docdet/assignment.hpp"
#include "docdet/datagen.hpp"

namespace docdet {

struct ModelSettings {
  int dim = 128;
  int heads = 8;
  int points = 4;
  int enc_layers = 3;
  int dec_layers = 3;
  int ffn_dim = 256;
  int num_queries = 100;
  int dn_groups = 3;
  double dn_box_noise = 0.4;
  double dn_label_noise = 0.25;
  double temperature = 0.07;

  void validate() const;
};

struct TrainConfig {
  std::uint64_t seed = 1;
  std::string train_dir = "data/train";
  std::string val_dir;  // empty: skip the final validation pass
  std::string out_dir = "runs/default";
  int epochs = 20;
  double lr = 2e-4;
  double lr_drop_factor = 10.0;
  int lr_drop_epoch = -1;  // -1: three quarters of the way through
  double weight_decay = 1e-4;
  std::string schedule = "hybrid";  // hybrid | one_to_one_only | one_to_many_only
  int o2m_k = 4;
  ModelSettings model;

  int resolved_lr_drop_epoch() const;
  void validate() const;
};

// Strict parsing: any unrecognized key, at any level, is an error naming the
// key. Missing keys fall back to the defaults above.
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json train_config_to_json(const TrainConfig& c);
TrainConfig load_train_config(const std::string& path);

// Page-generator spec files. "categories" picks a preset ("five" |
// "eleven"); "category_weights" may override the preset's mix.
LayoutSpec layout_spec_from_json(const nlohmann::json& j);
LayoutSpec load_layout_spec(const std::string& path);

// Maps a schedule name and epoch onto the matching regime for that epoch.
Regime schedule_regime(const std::string& schedule, int epoch, int total_epochs);

}  // namespace docdet
