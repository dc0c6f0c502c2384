#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "lmdet/dataset.hpp"
#include "lmdet/evaluate.hpp"
#include "lmdet/gradcheck.hpp"
#include "lmdet/trainer.hpp"

namespace fs = std::filesystem;
using namespace lmdet;

namespace {

std::vector<double> parse_mix(const std::string& spec) {
  // "od=0.3,rec=0.4,rd_short=0.1,rd_long=0.1,vqa=0.1"
  std::vector<double> mix(5, 0.0);
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    require(eq != std::string::npos, "mix: expected name=weight, got '" + item + "'");
    const auto type = data_type_from(item.substr(0, eq));
    mix[size_t(type)] = std::stod(item.substr(eq + 1));
  }
  return mix;
}

int cmd_gen_data(uint64_t seed, const std::string& out, int counts, const std::string& mix,
                 int val_scenes, i64 image_size) {
  GenConfig cfg;
  cfg.seed = seed;
  cfg.out_dir = out;
  cfg.train_count = counts;
  if (!mix.empty()) cfg.mix = parse_mix(mix);
  cfg.val_scenes = val_scenes;
  cfg.image_size = image_size;
  const auto manifest = generate_dataset(cfg);
  std::printf("%s\n", manifest_to_json(manifest).c_str());
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& out) {
  RunConfig cfg = load_run_config(config_path);
  if (!out.empty()) cfg.out_dir = out;
  const auto result = train(cfg);
  if (result.aborted_non_finite) {
    std::fprintf(stderr, "train: aborted on non-finite loss at step %d\n", result.steps + 1);
    return 1;
  }
  std::printf("trained %d steps, final loss %.6f, checkpoint %s\n", result.steps,
              result.final_loss, result.checkpoint.c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& report_path,
             const std::string& config_path) {
  auto pipe = load_pipeline(ckpt, config_path);
  const auto samples = read_jsonl(data);
  const auto report = evaluate_accuracy(*pipe, samples, fs::path(data).parent_path().string());
  std::printf("%s", report.to_table().c_str());
  if (!report_path.empty()) {
    std::ofstream out(report_path, std::ios::trunc);
    require(bool(out), "eval: cannot write report to " + report_path);
    out << report.to_json() << "\n";
  }
  return 0;
}

int cmd_infer(const std::string& ckpt, const std::string& image_path, const std::string& prompt,
              const std::string& out_dir, const std::string& config_path) {
  auto pipe = load_pipeline(ckpt, config_path);
  const Image img = read_ppm(image_path);
  const auto result = infer_sample(*pipe, img, prompt);
  fs::create_directories(out_dir);
  {
    std::ofstream out(fs::path(out_dir) / "result.json", std::ios::trunc);
    require(bool(out), "infer: cannot write result.json");
    out << infer_result_to_json(result) << "\n";
  }
  Image annotated = img;
  if (result.has_box) draw_box(annotated, result.det.pred, 255, 0, 255);
  write_ppm((fs::path(out_dir) / "annotated.ppm").string(), annotated);
  std::printf("%s\n", infer_result_to_json(result).c_str());
  return 0;
}

int cmd_gradcheck(const std::string& module, uint64_t seed) {
  bool ok = false;
  if (module == "all") ok = gradcheck_all(seed);
  else if (module == "diffcore") ok = gradcheck_diffcore(seed);
  else if (module == "geometry") ok = gradcheck_geometry(seed);
  else if (module == "detector") ok = gradcheck_detector(seed);
  else if (module == "loss") ok = gradcheck_loss(seed);
  else throw Error("gradcheck: unknown module '" + module + "'");
  std::printf("gradcheck %s: %s\n", module.c_str(), ok ? "PASS" : "FAIL");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multimodal detection-token pipeline"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  uint64_t gen_seed = 0;
  std::string gen_out, gen_mix;
  int gen_counts = 1000, gen_val_scenes = 200;
  i64 gen_img = 64;
  gen->add_option("--seed", gen_seed, "base seed");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--counts", gen_counts, "training sample count");
  gen->add_option("--mix", gen_mix, "type weights, e.g. od=0.3,rec=0.4,rd_short=0.1,rd_long=0.1,vqa=0.1");
  gen->add_option("--val-scenes", gen_val_scenes, "held-out validation scenes");
  gen->add_option("--img-size", gen_img, "image side in pixels");

  auto* tr = app.add_subcommand("train", "train from a run-config json");
  std::string tr_config, tr_out;
  tr->add_option("--config", tr_config, "run config json")->required();
  tr->add_option("--out", tr_out, "output directory (overrides config)");

  auto* ev = app.add_subcommand("eval", "accuracy@IoU-0.5 over a jsonl dataset");
  std::string ev_ckpt, ev_data, ev_report, ev_config;
  ev->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
  ev->add_option("--data", ev_data, "dataset jsonl")->required();
  ev->add_option("--report", ev_report, "write the json report here");
  ev->add_option("--config", ev_config, "run config (default: config.json beside the checkpoint)");

  auto* in = app.add_subcommand("infer", "answer a prompt and localize");
  std::string in_ckpt, in_image, in_prompt, in_out = "infer_out", in_config;
  in->add_option("--ckpt", in_ckpt, "checkpoint path")->required();
  in->add_option("--image", in_image, "ppm image")->required();
  in->add_option("--prompt", in_prompt, "user prompt text")->required();
  in->add_option("--out", in_out, "output directory");
  in->add_option("--config", in_config, "run config (default: config.json beside the checkpoint)");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  std::string gc_module = "all";
  uint64_t gc_seed = 20240611;
  gc->add_option("--module", gc_module, "all|diffcore|geometry|detector|loss");
  gc->add_option("--seed", gc_seed, "check seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) return cmd_gen_data(gen_seed, gen_out, gen_counts, gen_mix, gen_val_scenes, gen_img);
    if (*tr) return cmd_train(tr_config, tr_out);
    if (*ev) return cmd_eval(ev_ckpt, ev_data, ev_report, ev_config);
    if (*in) return cmd_infer(in_ckpt, in_image, in_prompt, in_out, in_config);
    if (*gc) return cmd_gradcheck(gc_module, gc_seed);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
