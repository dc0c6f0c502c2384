#include <pybind11/pybind11.h>
#include <pybind11/numpy.h>
#include <pybind11/stl.h>

#include <filesystem>

#include "lmdet/dataset.hpp"
#include "lmdet/evaluate.hpp"
#include "lmdet/gradcheck.hpp"
#include "lmdet/trainer.hpp"

namespace py = pybind11;
using namespace lmdet;

namespace {

Box box_from_seq(const std::vector<double>& v) {
  if (v.size() != 4) throw Error("box must have 4 elements [cx, cy, w, h]");
  return Box{v[0], v[1], v[2], v[3]};
}

py::tuple box_to_tuple(const Box& b) { return py::make_tuple(b.cx, b.cy, b.w, b.h); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "multimodal detection-token pipeline";

  m.def("iou", [](const std::vector<double>& a, const std::vector<double>& b) {
    return iou(box_from_seq(a), box_from_seq(b));
  });
  m.def("giou", [](const std::vector<double>& a, const std::vector<double>& b) {
    return giou_loss(box_from_seq(a), box_from_seq(b)).giou;
  });
  m.def("giou_loss", [](const std::vector<double>& a, const std::vector<double>& b) {
    return giou_loss(box_from_seq(a), box_from_seq(b)).loss;
  });
  m.def("l1_box_loss", [](const std::vector<double>& a, const std::vector<double>& b) {
    return l1_box_loss(box_from_seq(a), box_from_seq(b));
  });
  m.def("box_to_corners", [](const std::vector<double>& b) {
    const auto c = to_corners(box_from_seq(b));
    return py::make_tuple(c[0], c[1], c[2], c[3]);
  });
  m.def("box_to_center", [](const std::vector<double>& c) {
    if (c.size() != 4) throw Error("corners must have 4 elements [x1, y1, x2, y2]");
    return box_to_tuple(to_center({c[0], c[1], c[2], c[3]}));
  });
  m.def("mask_to_box", [](py::array_t<uint8_t, py::array::c_style | py::array::forcecast> mask) {
    if (mask.ndim() != 2) throw Error("mask must be 2-D");
    std::vector<uint8_t> data(mask.data(), mask.data() + mask.size());
    return box_to_tuple(mask_to_box(data, mask.shape(0), mask.shape(1)));
  });

  m.def("hungarian_match",
        [](py::array_t<double, py::array::c_style | py::array::forcecast> cost) {
          if (cost.ndim() != 2) throw Error("cost must be 2-D");
          std::vector<std::vector<double>> rows(size_t(cost.shape(0)));
          for (py::ssize_t i = 0; i < cost.shape(0); ++i)
            rows[size_t(i)].assign(cost.data(i, 0), cost.data(i, 0) + cost.shape(1));
          const auto match = hungarian_match(rows);
          py::list pairs;
          for (auto [g, q] : match.pairs) pairs.append(py::make_tuple(g, q));
          return py::make_tuple(pairs, match.total_cost);
        });

  m.def("tokenize",
        [](const std::string& text) { return Vocab::standard().tokenize(text); });
  m.def("detokenize",
        [](const std::vector<int>& ids) { return Vocab::standard().detokenize(ids); });
  m.def("vocab_size", []() { return Vocab::standard().size(); });
  m.def("det_token_id", []() { return int(Vocab::kDet); });

  m.def("format_sample", [](const std::string& data_type, const py::dict& fields, uint64_t seed) {
    RawAnnotation raw;
    raw.data_type = data_type_from(data_type);
    auto take = [&](const char* key, std::string& out) {
      if (fields.contains(key)) out = fields[key].cast<std::string>();
    };
    take("category", raw.category);
    take("caption", raw.caption);
    take("question", raw.question);
    take("reason", raw.reason);
    take("vqa_question", raw.vqa_question);
    take("vqa_answer", raw.vqa_answer);
    raw.gt_boxes = {{0.5, 0.5, 0.2, 0.2}};
    Rng rng(seed);
    const auto conv = format_sample(raw, raw.data_type, rng);
    py::list turns;
    for (const auto& t : conv.turns) {
      py::dict turn;
      turn["role"] = t.role;
      turn["text"] = t.text;
      turns.append(turn);
    }
    py::dict out;
    out["turns"] = turns;
    out["detector_text"] = conv.detector_text;
    out["det_positions"] = conv.det_positions;
    return out;
  }, py::arg("data_type"), py::arg("fields"), py::arg("seed") = 0);

  m.def(
      "generate_dataset",
      [](uint64_t seed, const std::string& out_dir, int count, const std::vector<double>& mix,
         int val_scenes, i64 image_size) {
        GenConfig cfg;
        cfg.seed = seed;
        cfg.out_dir = out_dir;
        cfg.train_count = count;
        if (!mix.empty()) cfg.mix = mix;
        cfg.val_scenes = val_scenes;
        cfg.image_size = image_size;
        return manifest_to_json(generate_dataset(cfg));
      },
      py::arg("seed"), py::arg("out_dir"), py::arg("count"),
      py::arg("mix") = std::vector<double>{}, py::arg("val_scenes") = 200,
      py::arg("image_size") = 64);

  m.def("train", [](const std::string& config_json) {
    const auto result = train(run_config_from_json(config_json));
    py::dict out;
    out["checkpoint"] = result.checkpoint;
    out["steps"] = result.steps;
    out["aborted_non_finite"] = result.aborted_non_finite;
    out["final_loss"] = result.final_loss;
    return out;
  });

  m.def(
      "evaluate",
      [](const std::string& ckpt, const std::string& data_jsonl, const std::string& config_path) {
        auto pipe = load_pipeline(ckpt, config_path);
        const auto samples = read_jsonl(data_jsonl);
        const auto report = evaluate_accuracy(
            *pipe, samples, std::filesystem::path(data_jsonl).parent_path().string());
        return report.to_json();
      },
      py::arg("ckpt"), py::arg("data_jsonl"), py::arg("config_path") = std::string());

  m.def(
      "infer",
      [](const std::string& ckpt, const std::string& image_path, const std::string& prompt,
         const std::string& config_path) {
        auto pipe = load_pipeline(ckpt, config_path);
        const auto result = infer_sample(*pipe, read_ppm(image_path), prompt);
        return infer_result_to_json(result);
      },
      py::arg("ckpt"), py::arg("image_path"), py::arg("prompt"),
      py::arg("config_path") = std::string());

  m.def(
      "gradcheck",
      [](const std::string& module, uint64_t seed) {
        if (module == "all") return gradcheck_all(seed, false);
        if (module == "diffcore") return gradcheck_diffcore(seed, false);
        if (module == "geometry") return gradcheck_geometry(seed, false);
        if (module == "detector") return gradcheck_detector(seed, false);
        if (module == "loss") return gradcheck_loss(seed, false);
        throw Error("unknown gradcheck module: " + module);
      },
      py::arg("module") = "all", py::arg("seed") = 20240611);

  py::register_exception<Error>(m, "LmdetError");
}
