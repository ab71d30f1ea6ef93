#include "docdet/coco_io.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;
using nlohmann::json;

namespace docdet {

namespace {

std::string record_tag(const char* kind, std::size_t index, const json& obj) {
  std::ostringstream os;
  os << kind << " record " << index;
  if (obj.is_object() && obj.contains("id") && obj["id"].is_number_integer())
    os << " (id " << obj["id"].get<long long>() << ")";
  return os.str();
}

int need_int(const json& obj, const char* key, const std::string& tag) {
  if (!obj.is_object() || !obj.contains(key) || !obj[key].is_number_integer())
    throw std::runtime_error(tag + ": missing or non-integer field '" + key + "'");
  return obj[key].get<int>();
}

std::string need_string(const json& obj, const char* key, const std::string& tag) {
  if (!obj.contains(key) || !obj[key].is_string())
    throw std::runtime_error(tag + ": missing or non-string field '" + key + "'");
  return obj[key].get<std::string>();
}

std::array<double, 4> need_bbox(const json& obj, const std::string& tag) {
  if (!obj.contains("bbox") || !obj["bbox"].is_array() || obj["bbox"].size() != 4)
    throw std::runtime_error(tag + ": 'bbox' must be a 4-element array");
  std::array<double, 4> out{};
  for (int i = 0; i < 4; ++i) {
    if (!obj["bbox"][i].is_number())
      throw std::runtime_error(tag + ": 'bbox' entries must be numbers");
    out[i] = obj["bbox"][i].get<double>();
  }
  return out;
}

json strip_keys(const json& obj, std::initializer_list<const char*> keys) {
  json extra = obj;
  for (const char* k : keys) extra.erase(k);
  return extra;
}

const json& need_array(const json& root, const char* key) {
  if (!root.contains(key) || !root[key].is_array())
    throw std::runtime_error(std::string("annotations file: '") + key +
                             "' missing or not an array");
  return root[key];
}

std::string page_file_name(int image_id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "page_%06d.png", image_id);
  return buf;
}

}  // namespace

std::array<double, 4> xywh_from_box(const Box& b) {
  return {b.x1, b.y1, b.x2 - b.x1, b.y2 - b.y1};
}

Box box_from_xywh(const std::array<double, 4>& r) {
  return {r[0], r[1], r[0] + r[2], r[1] + r[3]};
}

CocoDoc read_coco_doc(const std::string& json_path) {
  std::ifstream in(json_path);
  if (!in) throw std::runtime_error("read_coco_doc: cannot open " + json_path);
  json root;
  try {
    in >> root;
  } catch (const json::parse_error& e) {
    throw std::runtime_error("read_coco_doc: " + json_path + ": " + e.what());
  }
  if (!root.is_object()) throw std::runtime_error("read_coco_doc: top level must be an object");

  CocoDoc doc;
  doc.extra = strip_keys(root, {"images", "annotations", "categories"});

  std::map<int, std::pair<int, int>> image_sizes;  // id -> (w, h)
  const json& images = need_array(root, "images");
  for (std::size_t i = 0; i < images.size(); ++i) {
    const json& j = images[i];
    const std::string tag = record_tag("image", i, j);
    CocoImageRec rec;
    rec.id = need_int(j, "id", tag);
    rec.width = need_int(j, "width", tag);
    rec.height = need_int(j, "height", tag);
    rec.file_name = need_string(j, "file_name", tag);
    if (rec.width <= 0 || rec.height <= 0)
      throw std::runtime_error(tag + ": non-positive image size");
    if (!image_sizes.emplace(rec.id, std::make_pair(rec.width, rec.height)).second)
      throw std::runtime_error(tag + ": duplicate image id");
    rec.extra = strip_keys(j, {"id", "width", "height", "file_name"});
    doc.images.push_back(std::move(rec));
  }

  std::set<int> cat_ids;
  const json& cats = need_array(root, "categories");
  for (std::size_t i = 0; i < cats.size(); ++i) {
    const json& j = cats[i];
    const std::string tag = record_tag("category", i, j);
    CocoCatRec rec;
    rec.id = need_int(j, "id", tag);
    rec.name = need_string(j, "name", tag);
    if (!cat_ids.insert(rec.id).second) throw std::runtime_error(tag + ": duplicate category id");
    rec.extra = strip_keys(j, {"id", "name"});
    doc.categories.push_back(std::move(rec));
  }

  const json& anns = need_array(root, "annotations");
  for (std::size_t i = 0; i < anns.size(); ++i) {
    const json& j = anns[i];
    const std::string tag = record_tag("annotation", i, j);
    CocoAnnRec rec;
    rec.id = need_int(j, "id", tag);
    rec.image_id = need_int(j, "image_id", tag);
    rec.category_id = need_int(j, "category_id", tag);
    rec.bbox = need_bbox(j, tag);
    const auto size_it = image_sizes.find(rec.image_id);
    if (size_it == image_sizes.end())
      throw std::runtime_error(tag + ": unknown image_id " + std::to_string(rec.image_id));
    if (!cat_ids.count(rec.category_id))
      throw std::runtime_error(tag + ": unknown category_id " + std::to_string(rec.category_id));

    const double W = size_it->second.first, H = size_it->second.second;
    double x1 = rec.bbox[0], y1 = rec.bbox[1];
    double x2 = x1 + std::max(0.0, rec.bbox[2]), y2 = y1 + std::max(0.0, rec.bbox[3]);
    const double cx1 = std::clamp(x1, 0.0, W), cy1 = std::clamp(y1, 0.0, H);
    const double cx2 = std::clamp(x2, cx1, W), cy2 = std::clamp(y2, cy1, H);
    if (cx1 != x1 || cy1 != y1 || cx2 != x2 || cy2 != y2 || rec.bbox[2] < 0 || rec.bbox[3] < 0) {
      doc.warnings.push_back(tag + ": bbox outside image " + std::to_string(rec.image_id) +
                             " bounds, clipped");
      rec.bbox = {cx1, cy1, cx2 - cx1, cy2 - cy1};
    }
    rec.extra = strip_keys(j, {"id", "image_id", "category_id", "bbox"});
    doc.annotations.push_back(std::move(rec));
  }
  return doc;
}

void write_coco_doc(const std::string& json_path, const CocoDoc& doc) {
  json root = doc.extra.is_object() ? doc.extra : json::object();

  json images = json::array();
  for (const auto& r : doc.images) {
    json j = r.extra.is_object() ? r.extra : json::object();
    j["id"] = r.id;
    j["width"] = r.width;
    j["height"] = r.height;
    j["file_name"] = r.file_name;
    images.push_back(std::move(j));
  }
  json cats = json::array();
  for (const auto& r : doc.categories) {
    json j = r.extra.is_object() ? r.extra : json::object();
    j["id"] = r.id;
    j["name"] = r.name;
    cats.push_back(std::move(j));
  }
  json anns = json::array();
  for (const auto& r : doc.annotations) {
    json j = r.extra.is_object() ? r.extra : json::object();
    j["id"] = r.id;
    j["image_id"] = r.image_id;
    j["category_id"] = r.category_id;
    j["bbox"] = r.bbox;
    if (!j.contains("area")) j["area"] = r.bbox[2] * r.bbox[3];
    if (!j.contains("iscrowd")) j["iscrowd"] = 0;
    anns.push_back(std::move(j));
  }
  root["images"] = std::move(images);
  root["annotations"] = std::move(anns);
  root["categories"] = std::move(cats);

  std::ofstream out(json_path);
  if (!out) throw std::runtime_error("write_coco_doc: cannot open " + json_path);
  out << root.dump(2) << "\n";
}

void write_coco(const std::string& dir, const std::vector<LayoutSample>& samples,
                const std::vector<CocoCategory>& categories) {
  fs::create_directories(fs::path(dir) / "images");
  CocoDoc doc;
  for (const auto& c : categories) doc.categories.push_back({c.id, c.name, json::object()});
  int ann_id = 1;
  for (const auto& s : samples) {
    const std::string name = page_file_name(s.image_id);
    write_png((fs::path(dir) / "images" / name).string(), s.image);
    doc.images.push_back({s.image_id, s.image.width, s.image.height, name, json::object()});
    for (const auto& a : s.annotations)
      doc.annotations.push_back({ann_id++, s.image_id, a.category, xywh_from_box(a.box),
                                 json::object()});
  }
  write_coco_doc((fs::path(dir) / "annotations.json").string(), doc);
}

CocoDataset read_coco(const std::string& dir, bool load_images) {
  const CocoDoc doc = read_coco_doc((fs::path(dir) / "annotations.json").string());
  CocoDataset ds;
  ds.warnings = doc.warnings;
  for (const auto& c : doc.categories) ds.categories.push_back({c.id, c.name});

  std::map<int, std::size_t> index;
  for (const auto& img : doc.images) {
    LayoutSample s;
    s.image_id = img.id;
    if (load_images)
      s.image = read_png((fs::path(dir) / "images" / img.file_name).string());
    else
      s.image = Image(img.height, img.width);
    index[img.id] = ds.samples.size();
    ds.samples.push_back(std::move(s));
  }
  for (const auto& a : doc.annotations)
    ds.samples[index.at(a.image_id)].annotations.push_back(
        {box_from_xywh(a.bbox), a.category_id});
  return ds;
}

void write_results(const std::string& path, const std::vector<CocoResult>& results) {
  json arr = json::array();
  for (const auto& r : results) {
    json j;
    j["image_id"] = r.image_id;
    j["category_id"] = r.category_id;
    j["bbox"] = r.bbox;
    j["score"] = r.score;
    arr.push_back(std::move(j));
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_results: cannot open " + path);
  out << arr.dump(2) << "\n";
}

std::vector<CocoResult> read_results(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_results: cannot open " + path);
  json arr;
  try {
    in >> arr;
  } catch (const json::parse_error& e) {
    throw std::runtime_error("read_results: " + path + ": " + e.what());
  }
  if (!arr.is_array()) throw std::runtime_error("read_results: top level must be an array");
  std::vector<CocoResult> out;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const json& j = arr[i];
    const std::string tag = record_tag("result", i, j);
    CocoResult r;
    r.image_id = need_int(j, "image_id", tag);
    r.category_id = need_int(j, "category_id", tag);
    r.bbox = need_bbox(j, tag);
    if (!j.contains("score") || !j["score"].is_number())
      throw std::runtime_error(tag + ": missing or non-numeric 'score'");
    r.score = j["score"].get<double>();
    out.push_back(r);
  }
  return out;
}

}  // namespace docdet
