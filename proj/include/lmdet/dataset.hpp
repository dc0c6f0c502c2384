#pragma once

#include <map>
#include <string>
#include <vector>

#include "lmdet/scenegen.hpp"
#include "lmdet/text.hpp"

namespace lmdet {

// One JSONL line:
// {"id", "data_type", "image", "conversation": [{"role","text"}],
//  "detector_text", "boxes": [[cx,cy,w,h]...], "category_list": [...]}
struct DataSample {
  std::string id;
  std::string data_type;
  std::string image;  // path, relative to the jsonl file's directory
  std::vector<Turn> conversation;
  std::string detector_text;
  std::vector<Box> boxes;
  std::vector<std::string> category_list;

  DataType type() const { return data_type_from(data_type); }
};

std::string sample_to_json(const DataSample& s);
DataSample sample_from_json(const std::string& line);

void write_jsonl(const std::string& path, const std::vector<DataSample>& samples);
std::vector<DataSample> read_jsonl(const std::string& path);

struct GenConfig {
  uint64_t seed = 0;
  std::string out_dir;
  int train_count = 1000;
  std::vector<double> mix = {0.3, 0.4, 0.1, 0.1, 0.1};  // od, rec, rd_short, rd_long, vqa
  int val_scenes = 200;
  int val_per_scene = 2;
  i64 image_size = 64;
};

struct GenManifest {
  uint64_t seed = 0;
  std::map<std::string, int> train_counts;  // per data_type
  std::map<std::string, int> val_counts;
  int train_total = 0;
  int val_total = 0;
  int train_scenes = 0;
  int val_scenes = 0;
  i64 image_size = 64;
};

// Writes images/, train.jsonl, val.jsonl and manifest.json under out_dir.
// Pure function of the config: byte-identical output across runs. Train and
// validation scenes come from disjoint per-scene rng streams.
GenManifest generate_dataset(const GenConfig& cfg);

std::string manifest_to_json(const GenManifest& m);

}  // namespace lmdet
