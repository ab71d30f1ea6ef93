#pragma once

#include <array>
#include <string>
#include <vector>

#include <json.hpp>

#include "docdet/datagen.hpp"

namespace docdet {

std::array<double, 4> xywh_from_box(const Box& b);
Box box_from_xywh(const std::array<double, 4>& r);

// Raw annotation-file model. Fields this codebase does not interpret are kept
// verbatim in `extra` so foreign files survive a read/write cycle.
struct CocoImageRec {
  int id = 0, width = 0, height = 0;
  std::string file_name;
  nlohmann::json extra = nlohmann::json::object();
};
struct CocoAnnRec {
  int id = 0, image_id = 0, category_id = 0;
  std::array<double, 4> bbox{};  // [x, y, w, h] absolute pixels
  nlohmann::json extra = nlohmann::json::object();
};
struct CocoCatRec {
  int id = 0;
  std::string name;
  nlohmann::json extra = nlohmann::json::object();
};
struct CocoDoc {
  std::vector<CocoImageRec> images;
  std::vector<CocoAnnRec> annotations;
  std::vector<CocoCatRec> categories;
  nlohmann::json extra = nlohmann::json::object();
  std::vector<std::string> warnings;  // non-fatal findings (e.g. clipped boxes)
};

// Throws std::runtime_error naming the offending record for malformed input;
// boxes outside their image are clipped with a warning instead.
CocoDoc read_coco_doc(const std::string& json_path);
void write_coco_doc(const std::string& json_path, const CocoDoc& doc);

struct CocoCategory {
  int id = 0;
  std::string name;
};
struct CocoDataset {
  std::vector<LayoutSample> samples;
  std::vector<CocoCategory> categories;
  std::vector<std::string> warnings;
};

// Directory layout: <dir>/annotations.json + <dir>/images/*.png
void write_coco(const std::string& dir, const std::vector<LayoutSample>& samples,
                const std::vector<CocoCategory>& categories);
CocoDataset read_coco(const std::string& dir, bool load_images = true);

// detection results: JSON array of {image_id, category_id, bbox, score}
struct CocoResult {
  int image_id = 0;
  int category_id = 0;
  std::array<double, 4> bbox{};
  double score = 0;
};
void write_results(const std::string& path, const std::vector<CocoResult>& results);
std::vector<CocoResult> read_results(const std::string& path);

}  // namespace docdet
