#pragma once

#include <map>
#include <string>
#include <vector>

#include "ior/config.hpp"
#include "ior/detector.hpp"
#include "ior/geometry.hpp"

namespace ior {

struct ImageRecord {
  int64_t id;
  std::string file_name;  // relative to the split directory
  int64_t width, height;
};

struct DatasetAnnotations {
  std::vector<ImageRecord> images;
  std::map<int64_t, std::vector<Annotation>> by_image;
  std::vector<int64_t> category_ids;
};

void write_annotations(const std::string& path, const DatasetAnnotations& data);
DatasetAnnotations read_annotations(const std::string& path);

// per-image generation record; the source of truth for split purity
struct GenImageRecord {
  int64_t step;  // schedule step whose classes this image draws from; -1 = mixed
  std::vector<int64_t> present_classes;
};

struct GenRecord {
  uint64_t seed;
  std::string mode;
  std::map<int64_t, GenImageRecord> images;
};

void write_gen_record(const std::string& path, const GenRecord& record);
GenRecord read_gen_record(const std::string& path);

struct DatasetSplit {
  std::string root;  // directory that file_name entries are relative to
  std::vector<ImageRecord> images;
  std::map<int64_t, std::vector<Annotation>> annotations;  // labels for this step
  std::vector<int64_t> classes;                            // the step's class set
};

// one split per schedule step, built from <dataset_dir>/train
std::vector<DatasetSplit> build_training_splits(const std::string& dataset_dir,
                                                const TaskSchedule& schedule,
                                                const std::string& mode);

// full validation set with labels restricted to `classes`
DatasetSplit load_eval_split(const std::string& dataset_dir,
                             const std::vector<int64_t>& classes);

ImagePlane load_split_image(const DatasetSplit& split, size_t index);

}  // namespace ior
