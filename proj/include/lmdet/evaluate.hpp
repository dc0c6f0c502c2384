#pragma once

#include <map>
#include <string>
#include <vector>

#include "lmdet/trainer.hpp"

namespace lmdet {

struct EvalBucket {
  int units = 0;
  int hits = 0;
  int no_det = 0;  // misses caused by the model never emitting <DET>
  double iou_sum = 0;

  double accuracy() const { return units ? double(hits) / double(units) : 0.0; }
  double mean_iou() const { return units ? iou_sum / double(units) : 0.0; }
};

struct EvalReport {
  EvalBucket overall;
  std::map<std::string, EvalBucket> per_type;
  int vqa_samples = 0;  // counted but excluded from box accuracy

  std::string to_json() const;
  std::string to_table() const;
};

// One scoring unit: hit iff iou >= 0.5, the boundary itself included.
void score_detection_unit(EvalReport& report, const std::string& data_type, double iou_value,
                          bool no_det);

// Generation-based protocol: a sample scores a hit iff IoU(pred, gt) >= 0.5.
// REC/RD use the top-1 box against their single ground truth; OD scores each
// ground truth by its best IoU over all query boxes. No emitted <DET> counts
// as a miss, tracked separately.
EvalReport evaluate_accuracy(Pipeline<float>& pipe, const std::vector<DataSample>& samples,
                             const std::string& data_root);

struct InferResult {
  std::string answer;
  bool truncated = false;
  bool has_box = false;
  DetPrediction det;
  std::string detector_text;
};

// Full pipeline on one image + user prompt. When detector_text_override is
// empty the detector text is recovered from the prompt (template-aware, falls
// back to the full stripped prompt).
InferResult infer_sample(Pipeline<float>& pipe, const Image& img, const std::string& user_text,
                         const std::string& detector_text_override = "");

std::string infer_result_to_json(const InferResult& r);

// Strips the image placeholder and template boilerplate from a prompt to
// recover the caption/question for the detector.
std::string extract_detector_text(const std::string& user_text);

}  // namespace lmdet
