#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "docdet/backbone.hpp"
#include "docdet/coco_io.hpp"
#include "docdet/config.hpp"
#include "docdet/query_hybrid.hpp"
#include "docdet/transformer.hpp"

namespace docdet::nn {

// Full detector: backbone pyramid -> encoder memory -> proposals -> query
// assembly (with the enhanced branch during one-to-many phases and denoising
// slots during training) -> masked decoding.
class Model {
 public:
  Model(const ModelSettings& ms, int num_classes, std::uint64_t seed);

  struct Forward {
    EncoderMemory memory;
    Proposals proposals;
    int n_matching = 0;  // slots the matcher sees (base [+ enhanced])
    DnQueries dn;
    std::vector<LayerOutput> layers;  // every slot, per decoder layer
  };

  // training: dn slots appended when gts are present and dn_rng is given
  Forward forward(Graph& g, const Tensor& image, Regime phase, bool training,
                  const std::vector<LabeledBox>& gts, Rng* dn_rng);

  // one-to-one inference path; boxes normalized corner form, clamped to the page
  std::vector<Detection> predict(const Tensor& image);

  ParamStore& params() { return params_; }
  const ModelSettings& settings() const { return ms_; }
  int num_classes() const { return num_classes_; }

 private:
  ModelSettings ms_;
  int num_classes_ = 0;
  ParamStore params_;
  Backbone backbone_;
  Transformer transformer_;
  QueryHybrid hybrid_;
  int query_embed_ = -1;  // [num_queries, dim] learned content slots
};

struct CheckpointMeta {
  std::string config_json = "{}";  // canonical train-config dump
  int epoch = -1;                  // last completed epoch
  int adamw_steps = 0;
  std::vector<CocoCategory> categories;
};

// Single self-describing binary: JSON header (config, epoch, optimizer step
// count, category table) followed by every parameter tensor and its
// optimizer moments, in store order.
void save_checkpoint(const std::string& path, const ParamStore& store,
                     const CheckpointMeta& meta);
CheckpointMeta read_checkpoint_meta(const std::string& path);
// store must carry identical names/shapes in identical order (throws otherwise)
void load_checkpoint_params(const std::string& path, ParamStore& store);

}  // namespace docdet::nn
