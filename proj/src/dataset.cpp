#include "ior/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

#include "json.hpp"

#include "ior/image_io.hpp"

namespace ior {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

json load_json(const std::string& path) {
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

void dump_json(const std::string& path, const json& j) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out << j.dump(2) << "\n";
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("cannot move " + tmp + " into place");
}

}  // namespace

void write_annotations(const std::string& path, const DatasetAnnotations& data) {
  json j;
  j["images"] = json::array();
  for (const auto& img : data.images) {
    j["images"].push_back({{"id", img.id},
                           {"file_name", img.file_name},
                           {"width", img.width},
                           {"height", img.height}});
  }
  j["annotations"] = json::array();
  int64_t ann_id = 1;
  for (const auto& img : data.images) {
    auto it = data.by_image.find(img.id);
    if (it == data.by_image.end()) continue;
    for (const auto& ann : it->second) {
      j["annotations"].push_back({{"id", ann_id++},
                                  {"image_id", img.id},
                                  {"category_id", ann.class_id},
                                  {"bbox", {ann.box.x, ann.box.y, ann.box.w, ann.box.h}},
                                  {"area", ann.box.area()},
                                  {"iscrowd", 0}});
    }
  }
  j["categories"] = json::array();
  for (int64_t c : data.category_ids)
    j["categories"].push_back({{"id", c}, {"name", "class_" + std::to_string(c)}});
  dump_json(path, j);
}

DatasetAnnotations read_annotations(const std::string& path) {
  auto j = load_json(path);
  DatasetAnnotations data;
  for (const auto& img : j.at("images")) {
    data.images.push_back({img.at("id").get<int64_t>(),
                           img.at("file_name").get<std::string>(),
                           img.at("width").get<int64_t>(),
                           img.at("height").get<int64_t>()});
    data.by_image[data.images.back().id];  // materialize even if empty
  }
  for (const auto& ann : j.at("annotations")) {
    const int64_t image_id = ann.at("image_id").get<int64_t>();
    if (data.by_image.find(image_id) == data.by_image.end())
      throw std::runtime_error(path + ": annotation references unknown image " +
                               std::to_string(image_id));
    auto bbox = ann.at("bbox").get<std::vector<double>>();
    if (bbox.size() != 4) throw std::runtime_error(path + ": bbox must have 4 entries");
    data.by_image[image_id].push_back(
        {ann.at("category_id").get<int64_t>(), {bbox[0], bbox[1], bbox[2], bbox[3]}});
  }
  for (const auto& cat : j.at("categories"))
    data.category_ids.push_back(cat.at("id").get<int64_t>());
  return data;
}

void write_gen_record(const std::string& path, const GenRecord& record) {
  json j;
  j["seed"] = record.seed;
  j["mode"] = record.mode;
  j["images"] = json::array();
  for (const auto& [id, rec] : record.images) {
    j["images"].push_back(
        {{"id", id}, {"step", rec.step}, {"present_classes", rec.present_classes}});
  }
  dump_json(path, j);
}

GenRecord read_gen_record(const std::string& path) {
  auto j = load_json(path);
  GenRecord record;
  record.seed = j.at("seed").get<uint64_t>();
  record.mode = j.at("mode").get<std::string>();
  for (const auto& img : j.at("images")) {
    GenImageRecord rec;
    rec.step = img.at("step").get<int64_t>();
    rec.present_classes = img.at("present_classes").get<std::vector<int64_t>>();
    record.images[img.at("id").get<int64_t>()] = rec;
  }
  return record;
}

std::vector<DatasetSplit> build_training_splits(const std::string& dataset_dir,
                                                const TaskSchedule& schedule,
                                                const std::string& mode) {
  const std::string train_dir = (fs::path(dataset_dir) / "train").string();
  auto data = read_annotations((fs::path(train_dir) / "annotations.json").string());
  auto record = read_gen_record((fs::path(train_dir) / "gen_record.json").string());
  if (record.mode != mode)
    throw std::runtime_error("dataset was generated in mode \"" + record.mode +
                             "\", requested \"" + mode + "\"");

  std::vector<DatasetSplit> splits(schedule.steps.size());
  for (size_t s = 0; s < schedule.steps.size(); ++s) {
    splits[s].root = train_dir;
    splits[s].classes = schedule.steps[s];
  }

  for (const auto& img : data.images) {
    const auto& rec = record.images.at(img.id);
    const auto& anns = data.by_image.at(img.id);
    if (mode == "non-co") {
      if (rec.step < 0 || rec.step >= static_cast<int64_t>(splits.size()))
        throw std::runtime_error("image " + std::to_string(img.id) +
                                 " carries no step assignment; regenerate in non-co mode");
      auto& split = splits[rec.step];
      const std::set<int64_t> allowed(split.classes.begin(), split.classes.end());
      for (int64_t c : rec.present_classes) {
        if (allowed.find(c) == allowed.end())
          throw std::runtime_error("purity violation: image " + std::to_string(img.id) +
                                   " contains class " + std::to_string(c) +
                                   " outside step " + std::to_string(rec.step));
      }
      split.images.push_back(img);
      split.annotations[img.id] = anns;
    } else {
      for (auto& split : splits) {
        const std::set<int64_t> allowed(split.classes.begin(), split.classes.end());
        std::vector<Annotation> kept;
        for (const auto& ann : anns) {
          if (allowed.count(ann.class_id)) kept.push_back(ann);
        }
        if (!kept.empty()) {
          split.images.push_back(img);
          split.annotations[img.id] = std::move(kept);
        }
      }
    }
  }
  return splits;
}

DatasetSplit load_eval_split(const std::string& dataset_dir,
                             const std::vector<int64_t>& classes) {
  const std::string val_dir = (fs::path(dataset_dir) / "val").string();
  auto data = read_annotations((fs::path(val_dir) / "annotations.json").string());
  DatasetSplit split;
  split.root = val_dir;
  split.classes = classes;
  const std::set<int64_t> allowed(classes.begin(), classes.end());
  for (const auto& img : data.images) {
    split.images.push_back(img);
    std::vector<Annotation> kept;
    for (const auto& ann : data.by_image.at(img.id)) {
      if (allowed.count(ann.class_id)) kept.push_back(ann);
    }
    split.annotations[img.id] = std::move(kept);
  }
  return split;
}

ImagePlane load_split_image(const DatasetSplit& split, size_t index) {
  const auto& img = split.images.at(index);
  return load_png8((fs::path(split.root) / img.file_name).string());
}

}  // namespace ior
