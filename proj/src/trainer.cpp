#include "lmdet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <unordered_map>

#include <json.hpp>

#include "lmdet/checkpoint.hpp"
#include "lmdet/error.hpp"

namespace lmdet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {
constexpr uint64_t kStreamInit = 1;
constexpr uint64_t kStreamData = 2;
}  // namespace

void RunConfig::validate() const {
  require(batch_size >= 1, "config: batch_size must be >= 1");
  require(warmup_steps <= total_steps, "config: warmup_steps must not exceed total_steps");
  require(lr > 0, "config: lr must be positive");
  require(lr_decay == "linear" || lr_decay == "none", "config: lr_decay must be linear or none");
  require(freeze_preset == "none" || freeze_preset == "mqs_decoder",
          "config: unknown freeze_preset " + freeze_preset);
  weights.validate();
}

std::string run_config_to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["data"] = {{"train", c.train_jsonl}, {"val", c.val_jsonl}};
  j["batch_size"] = c.batch_size;
  j["lr"] = c.lr;
  j["warmup_steps"] = c.warmup_steps;
  j["total_steps"] = c.total_steps;
  j["weight_decay"] = c.weight_decay;
  j["adam"] = {{"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.adam_eps}};
  j["loss_weights"] = {{"tok", c.weights.tok},
                       {"det", c.weights.det},
                       {"l1", c.weights.l1},
                       {"giou", c.weights.giou},
                       {"contrast", c.weights.contrast}};
  j["mllm"] = {{"d_model", c.mllm.d_model},   {"n_layers", c.mllm.n_layers},
               {"n_heads", c.mllm.n_heads},   {"patch", c.mllm.patch},
               {"image_size", c.mllm.image_size}, {"context", c.mllm.context},
               {"hdet_post_norm", c.mllm.hdet_post_norm}};
  j["det"] = {{"d_det", c.det.d_det},       {"heads", c.det.heads},
              {"num_queries", c.det.num_queries}, {"dec_layers", c.det.dec_layers},
              {"fusion_layers", c.det.fusion_layers}, {"patch", c.det.patch},
              {"image_size", c.det.image_size}, {"text_cap", c.det.text_cap}};
  j["use_hdet"] = c.use_hdet;
  j["lm_only"] = c.lm_only;
  j["det_only_supervision"] = c.det_only_supervision;
  j["lm_loss_mean"] = c.lm_loss_mean;
  j["objectness_focal"] = c.objectness_focal;
  j["lr_decay"] = c.lr_decay;
  j["freeze_preset"] = c.freeze_preset;
  j["freeze_prefixes"] = c.freeze_prefixes;
  j["enabled_data_types"] = c.enabled_data_types;
  j["checkpoint_every"] = c.checkpoint_every;
  j["log_every"] = c.log_every;
  j["eval_max_steps"] = c.eval_max_steps;
  j["out_dir"] = c.out_dir;
  return j.dump(2);
}

RunConfig run_config_from_json(const std::string& text) {
  const json j = json::parse(text);
  RunConfig c;
  auto get = [&](const json& obj, const char* key, auto& out) {
    if (obj.contains(key)) out = obj.at(key).template get<std::decay_t<decltype(out)>>();
  };
  get(j, "seed", c.seed);
  if (j.contains("data")) {
    get(j.at("data"), "train", c.train_jsonl);
    get(j.at("data"), "val", c.val_jsonl);
  }
  get(j, "batch_size", c.batch_size);
  get(j, "lr", c.lr);
  get(j, "warmup_steps", c.warmup_steps);
  get(j, "total_steps", c.total_steps);
  get(j, "weight_decay", c.weight_decay);
  if (j.contains("adam")) {
    get(j.at("adam"), "beta1", c.beta1);
    get(j.at("adam"), "beta2", c.beta2);
    get(j.at("adam"), "eps", c.adam_eps);
  }
  if (j.contains("loss_weights")) {
    const auto& w = j.at("loss_weights");
    get(w, "tok", c.weights.tok);
    get(w, "det", c.weights.det);
    get(w, "l1", c.weights.l1);
    get(w, "giou", c.weights.giou);
    get(w, "contrast", c.weights.contrast);
  }
  if (j.contains("mllm")) {
    const auto& m = j.at("mllm");
    get(m, "d_model", c.mllm.d_model);
    get(m, "n_layers", c.mllm.n_layers);
    get(m, "n_heads", c.mllm.n_heads);
    get(m, "patch", c.mllm.patch);
    get(m, "image_size", c.mllm.image_size);
    get(m, "context", c.mllm.context);
    get(m, "hdet_post_norm", c.mllm.hdet_post_norm);
  }
  if (j.contains("det")) {
    const auto& d = j.at("det");
    if (d.contains("preset")) c.det = DetConfig::with_preset(d.at("preset").get<std::string>());
    get(d, "d_det", c.det.d_det);
    get(d, "heads", c.det.heads);
    get(d, "num_queries", c.det.num_queries);
    get(d, "dec_layers", c.det.dec_layers);
    get(d, "fusion_layers", c.det.fusion_layers);
    get(d, "patch", c.det.patch);
    get(d, "image_size", c.det.image_size);
    get(d, "text_cap", c.det.text_cap);
  }
  get(j, "use_hdet", c.use_hdet);
  get(j, "lm_only", c.lm_only);
  get(j, "det_only_supervision", c.det_only_supervision);
  get(j, "lm_loss_mean", c.lm_loss_mean);
  get(j, "objectness_focal", c.objectness_focal);
  get(j, "lr_decay", c.lr_decay);
  get(j, "freeze_preset", c.freeze_preset);
  get(j, "freeze_prefixes", c.freeze_prefixes);
  get(j, "enabled_data_types", c.enabled_data_types);
  get(j, "checkpoint_every", c.checkpoint_every);
  get(j, "log_every", c.log_every);
  get(j, "eval_max_steps", c.eval_max_steps);
  get(j, "out_dir", c.out_dir);
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  require(bool(in), "config: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return run_config_from_json(text);
}

double lr_at_step(const RunConfig& cfg, int step) {
  if (step <= cfg.warmup_steps) return cfg.lr * double(step) / double(std::max(1, cfg.warmup_steps));
  if (cfg.lr_decay == "none") return cfg.lr;
  const int span = std::max(1, cfg.total_steps - cfg.warmup_steps);
  return cfg.lr * double(cfg.total_steps - step) / double(span);
}

template <class Real>
std::unique_ptr<Pipeline<Real>> Pipeline<Real>::create(const RunConfig& cfg_in) {
  auto p = std::make_unique<Pipeline<Real>>();
  p->cfg = cfg_in;
  p->cfg.mllm.vocab_size = Vocab::standard().size();
  p->cfg.det.vocab_size = Vocab::standard().size();
  p->cfg.validate();
  Rng rng = Rng(p->cfg.seed).fork(kStreamInit);
  p->lm = LanguageModel<Real>::create(p->store, p->cfg.mllm, rng);
  p->det = Detector<Real>::create(p->store, p->cfg.det, p->cfg.mllm.d_model, rng);
  p->hdet_const = p->store.create("bridge.hdet_const", {1, p->cfg.mllm.d_model});
  p->hdet_const->fill_normal(rng, Real(0), Real(kInitStd));
  return p;
}

template <class Real>
void Pipeline<Real>::save_weights(const std::string& path) const {
  save_checkpoint(path, store.snapshot());
}

template <class Real>
void Pipeline<Real>::load_weights(const std::string& path) {
  store.load(load_checkpoint_map(path));
}

template <class Real>
bool Pipeline<Real>::frozen(const std::string& name) const {
  auto matches = [&](const std::string& prefix) { return name.rfind(prefix, 0) == 0; };
  if (cfg.freeze_preset == "mqs_decoder") {
    // the paper-style pattern: only the query-selection module, the decoder
    // stack (with heads) and the bridge stay trainable
    if (matches("lm.") || matches("det.enc.")) return true;
  }
  for (const auto& prefix : cfg.freeze_prefixes)
    if (matches(prefix)) return true;
  return false;
}

std::vector<int> detector_text_ids(const DataSample& sample, const Vocab& vocab) {
  std::string text;
  if (sample.type() == DataType::Od) {
    for (size_t i = 0; i < sample.category_list.size(); ++i) {
      if (i) text += " . ";
      text += sample.category_list[i];
    }
  } else {
    text = sample.detector_text;
  }
  require(!text.empty(), "detector text empty for sample " + sample.id);
  return vocab.tokenize(text);
}

namespace {

struct AdamState {
  std::vector<float> m, v;
  int t = 0;
};

struct LoadedSample {
  const DataSample* sample = nullptr;
  EncodedConv enc;
  Tensor<float> lm_patches;
  Tensor<float> det_patches;
  std::vector<int> det_txt_ids;
  bool has_boxes = false;
};

}  // namespace

TrainResult train(const RunConfig& cfg_in) {
  RunConfig cfg = cfg_in;
  cfg.validate();
  require(!cfg.out_dir.empty(), "train: out_dir required");
  fs::create_directories(cfg.out_dir);

  const Vocab& vocab = Vocab::standard();
  auto pipe = Pipeline<float>::create(cfg);
  cfg = pipe->cfg;  // vocab sizes resolved

  // resolved config rides alongside the weights
  {
    std::ofstream out(fs::path(cfg.out_dir) / "config.json", std::ios::trunc);
    out << run_config_to_json(cfg) << "\n";
    require(bool(out), "train: cannot write config.json");
  }

  auto samples = read_jsonl(cfg.train_jsonl);
  if (!cfg.enabled_data_types.empty()) {
    std::vector<DataSample> kept;
    for (auto& s : samples)
      if (std::find(cfg.enabled_data_types.begin(), cfg.enabled_data_types.end(), s.data_type) !=
          cfg.enabled_data_types.end())
        kept.push_back(std::move(s));
    samples = std::move(kept);
  }
  require(!samples.empty(), "train: no training samples after filtering");

  const fs::path data_root = fs::path(cfg.train_jsonl).parent_path();
  std::unordered_map<std::string, Image> image_cache;
  std::vector<LoadedSample> loaded(samples.size());
  for (size_t i = 0; i < samples.size(); ++i) {
    LoadedSample& ls = loaded[i];
    ls.sample = &samples[i];
    Conversation conv;
    conv.turns = samples[i].conversation;
    conv.data_type = samples[i].type();
    ls.enc = encode_conversation(conv, vocab, cfg.det_only_supervision);
    auto it = image_cache.find(samples[i].image);
    if (it == image_cache.end())
      it = image_cache.emplace(samples[i].image,
                               read_ppm((data_root / samples[i].image).string())).first;
    ls.lm_patches = LanguageModel<float>::patchify(it->second, cfg.mllm.patch);
    ls.det_patches = LanguageModel<float>::patchify(it->second, cfg.det.patch);
    ls.has_boxes = has_detection(samples[i].type()) && !samples[i].boxes.empty();
    if (ls.has_boxes) ls.det_txt_ids = detector_text_ids(samples[i], vocab);
  }

  std::ofstream log(fs::path(cfg.out_dir) / "metrics.jsonl", std::ios::trunc);
  require(bool(log), "train: cannot open metrics.jsonl");

  std::vector<AdamState> adam(pipe->store.count());
  Rng data_rng = Rng(cfg.seed).fork(kStreamData);
  Graph<float> g;
  TrainResult result;
  const std::string final_ckpt = (fs::path(cfg.out_dir) / "model.ckpt").string();

  for (int step = 1; step <= cfg.total_steps; ++step) {
    const double lr = lr_at_step(cfg, step);
    g.reset();
    Bind<float> bind(g);
    Graph<float>::Id batch_loss = -1;
    double tok_sum = 0, det_sum = 0;
    int det_count = 0;

    for (int b = 0; b < cfg.batch_size; ++b) {
      const LoadedSample& ls = loaded[size_t(data_rng.randint(i64(loaded.size())))];
      std::vector<int> det_token_pos;
      for (size_t t = 0; t < ls.enc.ids.size(); ++t)
        if (ls.enc.ids[t] == Vocab::kDet) det_token_pos.push_back(int(t));
      const auto fwd = pipe->lm.fwd(bind, ls.lm_patches, ls.enc.ids, ls.enc.image_pos,
                                    det_token_pos);
      const auto l_tok = pipe->lm.token_loss(bind, fwd, ls.enc.ids, ls.enc.loss_mask,
                                             cfg.lm_loss_mean);
      tok_sum += double(g.scalar_value(l_tok));

      const bool run_det = ls.has_boxes && !cfg.lm_only && cfg.weights.det > 0;
      Graph<float>::Id sample_loss;
      if (run_det) {
        require(!fwd.det_expanded.empty(), "train: detection sample without <DET> in the answer");
        const auto hdet = cfg.use_hdet ? pipe->lm.hdet_row(bind, fwd, 0) : bind(pipe->hdet_const);
        const auto hproj = pipe->det.project_hdet(bind, hdet);
        const auto enc = pipe->det.encode_pair(bind, ls.det_patches, ls.det_txt_ids);
        const auto sel = pipe->det.select_queries(bind, hproj, enc.f_img, enc.f_txt,
                                                  cfg.det.num_queries);
        const auto dec = pipe->det.decode(bind, hproj, sel, enc.f_txt);
        const auto l_det = detection_loss(bind, dec.boxes, dec.logits, ls.sample->boxes,
                                          cfg.weights, cfg.objectness_focal);
        det_sum += double(g.scalar_value(l_det));
        ++det_count;
        sample_loss = total_loss(bind, l_tok, l_det, true, cfg.weights);
      } else {
        sample_loss = total_loss(bind, l_tok, -1, false, cfg.weights);
      }
      batch_loss = b == 0 ? sample_loss : g.add(batch_loss, sample_loss);
    }
    batch_loss = g.scale(batch_loss, 1.0f / float(cfg.batch_size));
    const double loss_value = double(g.scalar_value(batch_loss));
    if (!std::isfinite(loss_value)) {
      log << json{{"step", step}, {"event", "non_finite_loss"}}.dump() << "\n";
      result.aborted_non_finite = true;
      result.steps = step - 1;
      return result;  // last-good checkpoint (if any) stays on disk
    }
    g.backward(batch_loss);

    size_t param_idx = 0;
    pipe->store.for_each([&](const std::string& name, Tensor<float>& t) {
      const size_t idx = param_idx++;
      if (!bind.bound(&t) || pipe->frozen(name)) return;
      const auto grad = g.grad(bind.id_of(&t));
      AdamState& st = adam[idx];
      if (st.m.empty()) {
        st.m.assign(t.data.size(), 0.f);
        st.v.assign(t.data.size(), 0.f);
      }
      st.t += 1;
      const float bc1 = 1.f - std::pow(float(cfg.beta1), float(st.t));
      const float bc2 = 1.f - std::pow(float(cfg.beta2), float(st.t));
      const float b1 = float(cfg.beta1), b2 = float(cfg.beta2);
      const float eps = float(cfg.adam_eps), wd = float(cfg.weight_decay);
      const float step_lr = float(lr);
      for (size_t i = 0; i < t.data.size(); ++i) {
        const float gi = grad[i];
        st.m[i] = b1 * st.m[i] + (1.f - b1) * gi;
        st.v[i] = b2 * st.v[i] + (1.f - b2) * gi * gi;
        const float mhat = st.m[i] / bc1;
        const float vhat = st.v[i] / bc2;
        t.data[i] -= step_lr * (mhat / (std::sqrt(vhat) + eps) + wd * t.data[i]);
      }
    });

    result.final_loss = loss_value;
    result.steps = step;
    if (step % std::max(1, cfg.log_every) == 0) {
      log << json{{"step", step},
                  {"loss", loss_value},
                  {"loss_tok", tok_sum / cfg.batch_size},
                  {"loss_det", det_count ? det_sum / det_count : 0.0},
                  {"lr", lr}}
                 .dump()
          << "\n";
    }
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.total_steps) {
      const std::string path =
          (fs::path(cfg.out_dir) / ("model_step" + std::to_string(step) + ".ckpt")).string();
      pipe->save_weights(path);
      result.checkpoint = path;
    }
  }
  pipe->save_weights(final_ckpt);
  result.checkpoint = final_ckpt;
  return result;
}

std::unique_ptr<Pipeline<float>> load_pipeline(const std::string& ckpt_path,
                                               const std::string& config_path) {
  const std::string cfg_path =
      config_path.empty() ? (fs::path(ckpt_path).parent_path() / "config.json").string()
                          : config_path;
  RunConfig cfg = load_run_config(cfg_path);
  auto pipe = Pipeline<float>::create(cfg);
  pipe->load_weights(ckpt_path);
  return pipe;
}

template struct Pipeline<float>;
template struct Pipeline<double>;

}  // namespace lmdet
