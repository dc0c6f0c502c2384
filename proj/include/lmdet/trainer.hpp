#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lmdet/dataset.hpp"
#include "lmdet/detector.hpp"
#include "lmdet/lm.hpp"
#include "lmdet/matchloss.hpp"

namespace lmdet {

struct RunConfig {
  uint64_t seed = 0;
  std::string train_jsonl;
  std::string val_jsonl;
  int batch_size = 2;
  double lr = 3e-4;
  int warmup_steps = 10;
  int total_steps = 1000;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  LossWeights weights;
  MllmConfig mllm;
  DetConfig det;
  bool use_hdet = true;   // false: the detector sees a learned constant instead
  bool lm_only = false;   // never build the detector graph
  bool det_only_supervision = false;
  bool lm_loss_mean = true;
  bool objectness_focal = false;
  std::string lr_decay = "linear";  // "linear" | "none"
  std::string freeze_preset = "none";  // "none" | "mqs_decoder"
  std::vector<std::string> freeze_prefixes;
  std::vector<std::string> enabled_data_types;  // empty = all
  int checkpoint_every = 0;  // 0 = final only
  int log_every = 1;
  int eval_max_steps = 24;
  std::string out_dir;

  void validate() const;
};

std::string run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::string& path);

// Linear warmup to the base rate, then the configured decay to zero.
double lr_at_step(const RunConfig& cfg, int step);

// The LM, the detector and the bridge constant, initialized together so every
// run mode draws identical weights for a given seed.
template <class Real>
struct Pipeline {
  RunConfig cfg;
  ParamStore<Real> store;
  LanguageModel<Real> lm;
  Detector<Real> det;
  Tensor<Real>* hdet_const = nullptr;

  static std::unique_ptr<Pipeline> create(const RunConfig& cfg);
  void save_weights(const std::string& path) const;
  void load_weights(const std::string& path);
  bool frozen(const std::string& name) const;
};

// Detector text ids for a sample: the stored caption/question, except OD
// samples which use every category name joined by " . " separators.
std::vector<int> detector_text_ids(const DataSample& sample, const Vocab& vocab);

struct TrainResult {
  std::string checkpoint;  // last checkpoint written, empty if none
  int steps = 0;
  bool aborted_non_finite = false;
  double final_loss = 0;
};

TrainResult train(const RunConfig& cfg);

// Pipeline + config loading for eval/infer: reads config.json next to the
// checkpoint unless an explicit config path is given.
std::unique_ptr<Pipeline<float>> load_pipeline(const std::string& ckpt_path,
                                               const std::string& config_path = "");

}  // namespace lmdet
