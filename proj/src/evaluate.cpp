#include "lmdet/evaluate.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>

#include <json.hpp>

#include "lmdet/error.hpp"

namespace lmdet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json bucket_json(const EvalBucket& b) {
  return {{"units", b.units},
          {"hits", b.hits},
          {"no_det", b.no_det},
          {"accuracy", b.accuracy()},
          {"mean_iou", b.mean_iou()}};
}

// Runs the detector with a given hidden row; shared by eval and infer.
DetPrediction run_detector(Pipeline<float>& pipe, Graph<float>& g, const Tensor<float>& hdet,
                           const Tensor<float>& det_patches, const std::vector<int>& txt_ids) {
  g.reset();
  Bind<float> bind(g);
  const auto hdet_id =
      pipe.cfg.use_hdet ? g.input(hdet) : Graph<float>::Id(bind(pipe.hdet_const));
  const auto hproj = pipe.det.project_hdet(bind, hdet_id);
  const auto enc = pipe.det.encode_pair(bind, det_patches, txt_ids);
  const auto sel =
      pipe.det.select_queries(bind, hproj, enc.f_img, enc.f_txt, pipe.cfg.det.num_queries);
  const auto dec = pipe.det.decode(bind, hproj, sel, enc.f_txt);
  return Detector<float>::read_prediction(g, dec);
}

}  // namespace

void score_detection_unit(EvalReport& report, const std::string& data_type, double iou_value,
                          bool no_det) {
  for (EvalBucket* b : {&report.per_type[data_type], &report.overall}) {
    b->units += 1;
    b->iou_sum += iou_value;
    if (no_det) b->no_det += 1;
    if (iou_value >= 0.5) b->hits += 1;  // closed boundary: exactly 0.5 is a hit
  }
}

EvalReport evaluate_accuracy(Pipeline<float>& pipe, const std::vector<DataSample>& samples,
                             const std::string& data_root) {
  const Vocab& vocab = Vocab::standard();
  EvalReport report;
  Graph<float> g;
  std::unordered_map<std::string, Image> image_cache;

  for (const auto& sample : samples) {
    if (!has_detection(sample.type())) {
      ++report.vqa_samples;
      continue;
    }
    require(!sample.boxes.empty(), "eval: detection sample without ground-truth boxes: " + sample.id);
    auto it = image_cache.find(sample.image);
    if (it == image_cache.end())
      it = image_cache.emplace(sample.image, read_ppm((fs::path(data_root) / sample.image).string()))
               .first;
    const Image& img = it->second;
    require(!sample.conversation.empty() && sample.conversation.front().role == "user",
            "eval: sample must start with a user turn: " + sample.id);

    int image_pos = -1;
    const auto prompt = encode_prompt(sample.conversation.front().text, vocab, &image_pos);
    const auto lm_patches = LanguageModel<float>::patchify(img, pipe.cfg.mllm.patch);
    const auto gen = generate_greedy(pipe.lm, lm_patches, prompt, image_pos, pipe.cfg.eval_max_steps);

    auto score_unit = [&](double iou_val, bool missing_det) {
      score_detection_unit(report, sample.data_type, iou_val, missing_det);
    };

    if (gen.hdet.empty()) {
      for (size_t i = 0; i < (sample.type() == DataType::Od ? sample.boxes.size() : 1); ++i)
        score_unit(0.0, true);
      continue;
    }
    const auto det_patches = LanguageModel<float>::patchify(img, pipe.cfg.det.patch);
    const auto pred =
        run_detector(pipe, g, gen.hdet.front(), det_patches, detector_text_ids(sample, vocab));
    if (sample.type() == DataType::Od) {
      for (const auto& gt : sample.boxes) {
        double best = 0;
        for (const auto& pb : pred.boxes) best = std::max(best, iou(pb, gt));
        score_unit(best, false);
      }
    } else {
      score_unit(iou(pred.pred, sample.boxes.front()), false);
    }
  }
  return report;
}

std::string EvalReport::to_json() const {
  json j;
  j["overall"] = bucket_json(overall);
  json per;
  for (const auto& [name, bucket] : per_type) per[name] = bucket_json(bucket);
  j["per_type"] = per;
  j["vqa_samples"] = vqa_samples;
  return j.dump(2);
}

std::string EvalReport::to_table() const {
  char line[160];
  std::string out;
  std::snprintf(line, sizeof(line), "%-10s %7s %7s %8s %10s %8s\n", "subset", "units", "hits",
                "no_det", "acc@0.5", "mIoU");
  out += line;
  auto row = [&](const std::string& name, const EvalBucket& b) {
    std::snprintf(line, sizeof(line), "%-10s %7d %7d %8d %10.4f %8.4f\n", name.c_str(), b.units,
                  b.hits, b.no_det, b.accuracy(), b.mean_iou());
    out += line;
  };
  for (const auto& [name, bucket] : per_type) row(name, bucket);
  row("overall", overall);
  return out;
}

std::string extract_detector_text(const std::string& user_text) {
  std::string text = user_text;
  const std::string img_tag = "<image> ";
  if (text.rfind(img_tag, 0) == 0) text = text.substr(img_tag.size());

  auto between = [&](const std::string& prefix, const std::string& suffix,
                     std::string& out) -> bool {
    if (text.rfind(prefix, 0) != 0) return false;
    const auto pos = text.find(suffix, prefix.size());
    if (pos == std::string::npos) return false;
    out = text.substr(prefix.size(), pos - prefix.size());
    return true;
  };
  std::string caption;
  for (const char* prefix : {"What is ", "Where is ", "Can you locate ", "Find "})
    if (between(prefix, " in this image", caption)) return caption;
  if (between("Please detect the ", " in this image", caption)) return caption;
  const std::string rd_suffix = " Please output object location and explain the reason.";
  const auto pos = text.find(rd_suffix);
  if (pos != std::string::npos) return text.substr(0, pos);
  return text;
}

InferResult infer_sample(Pipeline<float>& pipe, const Image& img, const std::string& user_text,
                         const std::string& detector_text_override) {
  const Vocab& vocab = Vocab::standard();
  std::string prompt_text = user_text;
  if (prompt_text.find("<image>") == std::string::npos) prompt_text = "<image> " + prompt_text;

  int image_pos = -1;
  const auto prompt = encode_prompt(prompt_text, vocab, &image_pos);
  const auto lm_patches = LanguageModel<float>::patchify(img, pipe.cfg.mllm.patch);
  const auto gen = generate_greedy(pipe.lm, lm_patches, prompt, image_pos, pipe.cfg.eval_max_steps);

  InferResult res;
  res.truncated = gen.truncated;
  std::vector<int> answer_ids = gen.ids;
  if (!answer_ids.empty() && answer_ids.back() == Vocab::kEos) answer_ids.pop_back();
  res.answer = vocab.detokenize(answer_ids);
  if (gen.hdet.empty()) return res;  // answer only, null box

  res.detector_text =
      detector_text_override.empty() ? extract_detector_text(prompt_text) : detector_text_override;
  require(!res.detector_text.empty(), "infer: empty detector text");
  Graph<float> g;
  const auto det_patches = LanguageModel<float>::patchify(img, pipe.cfg.det.patch);
  res.det = run_detector(pipe, g, gen.hdet.front(), det_patches,
                         vocab.tokenize(res.detector_text));
  res.has_box = true;
  return res;
}

std::string infer_result_to_json(const InferResult& r) {
  json j;
  j["answer_text"] = r.answer;
  j["truncated"] = r.truncated;
  j["detector_text"] = r.detector_text;
  if (r.has_box) {
    j["box"] = {r.det.pred.cx, r.det.pred.cy, r.det.pred.w, r.det.pred.h};
    j["selected"] = r.det.selected;
    json boxes = json::array(), logits = json::array();
    for (const auto& b : r.det.boxes) boxes.push_back({b.cx, b.cy, b.w, b.h});
    for (double l : r.det.logits) logits.push_back(l);
    j["boxes"] = boxes;
    j["logits"] = logits;
  } else {
    j["box"] = nullptr;
  }
  return j.dump(2);
}

}  // namespace lmdet
