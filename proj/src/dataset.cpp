#include "lmdet/dataset.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "lmdet/error.hpp"
#include "lmdet/image.hpp"

namespace lmdet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json box_to_json(const Box& b) { return json::array({b.cx, b.cy, b.w, b.h}); }

Box box_from_json(const json& j) {
  require(j.is_array() && j.size() == 4, "dataset: box must be [cx, cy, w, h]");
  return Box{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

}  // namespace

std::string sample_to_json(const DataSample& s) {
  json j;
  j["id"] = s.id;
  j["data_type"] = s.data_type;
  j["image"] = s.image;
  json conv = json::array();
  for (const auto& turn : s.conversation) conv.push_back({{"role", turn.role}, {"text", turn.text}});
  j["conversation"] = conv;
  j["detector_text"] = s.detector_text;
  json boxes = json::array();
  for (const auto& b : s.boxes) boxes.push_back(box_to_json(b));
  j["boxes"] = boxes;
  j["category_list"] = s.category_list;
  return j.dump();
}

DataSample sample_from_json(const std::string& line) {
  const json j = json::parse(line);
  DataSample s;
  s.id = j.at("id").get<std::string>();
  s.data_type = j.at("data_type").get<std::string>();
  s.image = j.at("image").get<std::string>();
  for (const auto& t : j.at("conversation"))
    s.conversation.push_back({t.at("role").get<std::string>(), t.at("text").get<std::string>()});
  s.detector_text = j.at("detector_text").get<std::string>();
  for (const auto& b : j.at("boxes")) s.boxes.push_back(box_from_json(b));
  for (const auto& c : j.at("category_list")) s.category_list.push_back(c.get<std::string>());
  return s;
}

void write_jsonl(const std::string& path, const std::vector<DataSample>& samples) {
  std::ofstream out(path, std::ios::trunc);
  require(bool(out), "dataset: cannot open for writing: " + path);
  for (const auto& s : samples) out << sample_to_json(s) << "\n";
  require(bool(out), "dataset: write failed: " + path);
}

std::vector<DataSample> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  require(bool(in), "dataset: cannot open: " + path);
  std::vector<DataSample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(sample_from_json(line));
  }
  return out;
}

namespace {

DataSample build_sample(const RawAnnotation& raw, const std::string& id, const std::string& image,
                        Rng& rng) {
  const Conversation conv = format_sample(raw, raw.data_type, rng);
  DataSample s;
  s.id = id;
  s.data_type = data_type_name(raw.data_type);
  s.image = image;
  s.conversation = conv.turns;
  s.detector_text = conv.detector_text;
  s.boxes = raw.gt_boxes;
  s.category_list = all_category_names();
  return s;
}

}  // namespace

GenManifest generate_dataset(const GenConfig& cfg) {
  require(!cfg.out_dir.empty(), "gen-data: output directory required");
  require(cfg.train_count > 0 && cfg.val_scenes >= 0, "gen-data: bad counts");
  fs::create_directories(fs::path(cfg.out_dir) / "images");

  GenManifest manifest;
  manifest.seed = cfg.seed;
  manifest.image_size = cfg.image_size;
  const Rng base(cfg.seed);

  std::vector<DataSample> train;
  uint64_t scene_idx = 0;
  char name[64];
  while (int(train.size()) < cfg.train_count) {
    Rng rng = base.fork(scene_idx);
    const Scene scene = generate_scene(rng, cfg.image_size);
    const auto raws = make_samples(scene, cfg.mix, rng, 1);
    if (!raws.empty()) {
      std::snprintf(name, sizeof(name), "images/train_%06llu.ppm",
                    static_cast<unsigned long long>(scene_idx));
      write_ppm((fs::path(cfg.out_dir) / name).string(), render(scene));
      for (size_t r = 0; r < raws.size() && int(train.size()) < cfg.train_count; ++r) {
        const std::string id = "train_" + std::to_string(scene_idx) + "_" + std::to_string(r);
        train.push_back(build_sample(raws[r], id, name, rng));
        manifest.train_counts[train.back().data_type]++;
      }
      manifest.train_scenes++;
    }
    ++scene_idx;
  }
  write_jsonl((fs::path(cfg.out_dir) / "train.jsonl").string(), train);

  std::vector<DataSample> val;
  // disjoint stream ids keep validation scenes off the training distribution draws
  constexpr uint64_t kValStream = 1ull << 40;
  for (int v = 0; v < cfg.val_scenes; ++v) {
    Rng rng = base.fork(kValStream + uint64_t(v));
    const Scene scene = generate_scene(rng, cfg.image_size);
    const auto raws = make_samples(scene, cfg.mix, rng, cfg.val_per_scene);
    if (raws.empty()) continue;
    std::snprintf(name, sizeof(name), "images/val_%06d.ppm", v);
    write_ppm((fs::path(cfg.out_dir) / name).string(), render(scene));
    for (size_t r = 0; r < raws.size(); ++r) {
      const std::string id = "val_" + std::to_string(v) + "_" + std::to_string(r);
      val.push_back(build_sample(raws[r], id, name, rng));
      manifest.val_counts[val.back().data_type]++;
    }
    manifest.val_scenes++;
  }
  write_jsonl((fs::path(cfg.out_dir) / "val.jsonl").string(), val);

  manifest.train_total = int(train.size());
  manifest.val_total = int(val.size());
  std::ofstream mf(fs::path(cfg.out_dir) / "manifest.json", std::ios::trunc);
  mf << manifest_to_json(manifest) << "\n";
  require(bool(mf), "gen-data: manifest write failed");
  return manifest;
}

std::string manifest_to_json(const GenManifest& m) {
  json j;
  j["seed"] = m.seed;
  j["image_size"] = m.image_size;
  j["train"] = {{"total", m.train_total}, {"scenes", m.train_scenes}, {"counts", m.train_counts}};
  j["val"] = {{"total", m.val_total}, {"scenes", m.val_scenes}, {"counts", m.val_counts}};
  return j.dump(2);
}

}  // namespace lmdet
