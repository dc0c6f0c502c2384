#include <cmath>
#include <cstdio>

#include "lmdet/detector.hpp"
#include "lmdet/gradcheck.hpp"
#include "lmdet/lm.hpp"
#include "lmdet/matchloss.hpp"

namespace lmdet {

namespace {

using Id = Graph<double>::Id;

// Gradcheck against a parameter store: the builder reconstructs the loss from
// the current tensor values, so central differences re-run the whole forward
// (top-k selection and matching included; instances are chosen with margins
// far above h so the discrete choices stay put).
GradCheckResult check_model(const std::string& name,
                            const std::function<Id(Bind<double>&)>& build,
                            const std::vector<Tensor<double>*>& leaves, double h = 1e-5,
                            double tol = 1e-4) {
  Graph<double> g;
  Bind<double> bind(g);
  const Id loss = build(bind);
  g.backward(loss);

  GradCheckResult res{name, 0.0, true};
  auto eval = [&]() {
    Graph<double> g2;
    Bind<double> b2(g2);
    return g2.scalar_value(build(b2));
  };
  for (Tensor<double>* t : leaves) {
    std::vector<double> analytic(t->data.size(), 0.0);
    if (bind.bound(t)) {
      const auto span = g.grad(bind.id_of(t));
      analytic.assign(span.begin(), span.end());
    }
    for (size_t i = 0; i < t->data.size(); ++i) {
      const double keep = t->data[i];
      t->data[i] = keep + h;
      const double fp = eval();
      t->data[i] = keep - h;
      const double fm = eval();
      t->data[i] = keep;
      const double numeric = (fp - fm) / (2 * h);
      const double rel = std::abs(analytic[i] - numeric) /
                         std::max({std::abs(analytic[i]), std::abs(numeric), 0.01});
      res.max_rel_err = std::max(res.max_rel_err, rel);
    }
  }
  res.ok = res.max_rel_err <= tol;
  return res;
}

bool report(const GradCheckResult& r, bool verbose) {
  if (verbose)
    std::printf("  [%s] %-42s max rel err %.3e\n", r.ok ? "ok" : "FAIL", r.name.c_str(),
                r.max_rel_err);
  return r.ok;
}

DetConfig micro_det_config() {
  DetConfig cfg;
  cfg.d_det = 8;
  cfg.heads = 2;
  cfg.num_queries = 2;
  cfg.dec_layers = 1;
  cfg.patch = 4;
  cfg.image_size = 16;  // 4x4 feature grid
  cfg.text_cap = 4;
  cfg.vocab_size = Vocab::standard().size();
  return cfg;
}

struct MicroDet {
  ParamStore<double> store;
  Detector<double> det;
  Tensor<double> patches;
  Tensor<double> hdet;
  std::vector<int> txt_ids;
  std::vector<Tensor<double>*> leaves;

  explicit MicroDet(uint64_t seed) {
    Rng rng(seed);
    const DetConfig cfg = micro_det_config();
    det = Detector<double>::create(store, cfg, /*d_lm=*/8, rng);
    patches = Tensor<double>({cfg.feature_count(), cfg.patch_dim()});
    patches.fill_uniform(rng, -1.0, 1.0);
    hdet = Tensor<double>({1, 8});
    hdet.fill_uniform(rng, -1.0, 1.0);
    const Vocab& vocab = Vocab::standard();
    txt_ids = vocab.tokenize("the red circle");
    store.for_each([&](const std::string&, Tensor<double>& t) { leaves.push_back(&t); });
    leaves.push_back(&patches);
    leaves.push_back(&hdet);
  }
};

}  // namespace

bool gradcheck_detector(uint64_t seed, bool verbose) {
  bool ok = true;
  Rng coeff_rng(seed ^ 0x5eedULL);
  {
    MicroDet micro(seed);
    const i64 F = micro.det.cfg.feature_count();
    const i64 d = micro.det.cfg.d_det;
    Tensor<double> wq({micro.det.cfg.num_queries, d});
    wq.fill_uniform(coeff_rng, -1.0, 1.0);
    Tensor<double> wf({F, d});
    wf.fill_uniform(coeff_rng, -1.0, 1.0);
    auto build = [&](Bind<double>& bind) {
      auto& g = bind.g;
      const auto enc = micro.det.encode_pair(bind, bind(&micro.patches), micro.txt_ids);
      const auto hproj = micro.det.project_hdet(bind, bind(&micro.hdet));
      const auto sel = micro.det.select_queries(bind, hproj, enc.f_img, enc.f_txt,
                                                micro.det.cfg.num_queries);
      return g.add(g.sum_all(g.mul(sel.queries, g.input(wq))),
                   g.sum_all(g.mul(sel.f_img_act, g.input(wf))));
    };
    ok &= report(check_model("mqs_forward", build, micro.leaves), verbose);
  }
  {
    MicroDet micro(seed + 1);
    const i64 k = micro.det.cfg.num_queries;
    Tensor<double> wb({k, 4});
    wb.fill_uniform(coeff_rng, -1.0, 1.0);
    Tensor<double> wl({k, 1});
    wl.fill_uniform(coeff_rng, -1.0, 1.0);
    auto build = [&](Bind<double>& bind) {
      auto& g = bind.g;
      const auto enc = micro.det.encode_pair(bind, bind(&micro.patches), micro.txt_ids);
      const auto hproj = micro.det.project_hdet(bind, bind(&micro.hdet));
      const auto sel = micro.det.select_queries(bind, hproj, enc.f_img, enc.f_txt, k);
      const auto dec = micro.det.decode(bind, hproj, sel, enc.f_txt);
      return g.add(g.sum_all(g.mul(dec.boxes, g.input(wb))),
                   g.sum_all(g.mul(dec.logits, g.input(wl))));
    };
    ok &= report(check_model("det_decode_k2", build, micro.leaves), verbose);
  }
  return ok;
}

bool gradcheck_loss(uint64_t seed, bool verbose) {
  bool ok = true;
  {
    // detection_loss on a 2-query instance; boxes go through sigmoid so the
    // leaf space is unconstrained
    Rng rng(seed);
    Tensor<double> raw_boxes({2, 4});
    raw_boxes.fill_uniform(rng, -1.0, 1.0);
    Tensor<double> raw_logits({2, 1});
    raw_logits.fill_uniform(rng, -1.0, 1.0);
    const std::vector<Box> gts = {{0.3, 0.4, 0.2, 0.25}, {0.7, 0.6, 0.3, 0.2}};
    LossWeights w;
    auto build = [&](Bind<double>& bind) {
      auto& g = bind.g;
      const auto boxes = g.sigmoid(bind(&raw_boxes));
      return detection_loss(bind, boxes, bind(&raw_logits), gts, w);
    };
    ok &= report(check_model("detection_loss", build, {&raw_boxes, &raw_logits}), verbose);
  }
  {
    // token loss through a one-layer toy LM on a short conversation
    Rng rng(seed + 7);
    MllmConfig cfg;
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.patch = 8;
    cfg.image_size = 16;  // 4 image tokens
    cfg.context = 32;
    cfg.vocab_size = Vocab::standard().size();
    ParamStore<double> store;
    auto lm = LanguageModel<double>::create(store, cfg, rng);
    Tensor<double> patches({cfg.image_tokens(), cfg.patch_dim()});
    patches.fill_uniform(rng, -1.0, 1.0);
    const Vocab& vocab = Vocab::standard();
    Conversation conv = format_sample(
        [] {
          RawAnnotation raw;
          raw.data_type = DataType::Rec;
          raw.caption = "the red circle";
          raw.gt_boxes = {{0.5, 0.5, 0.2, 0.2}};
          return raw;
        }(),
        DataType::Rec, rng);
    const auto enc = encode_conversation(conv, vocab);
    std::vector<Tensor<double>*> leaves;
    store.for_each([&](const std::string&, Tensor<double>& t) { leaves.push_back(&t); });
    leaves.push_back(&patches);
    auto build = [&](Bind<double>& bind) {
      const auto fwd = lm.fwd(bind, bind(&patches), enc.ids, enc.image_pos, {});
      return lm.token_loss(bind, fwd, enc.ids, enc.loss_mask, true);
    };
    ok &= report(check_model("lm_token_loss", build, leaves), verbose);
  }
  return ok;
}

bool gradcheck_all(uint64_t seed, bool verbose) {
  bool ok = true;
  if (verbose) std::printf("diffcore primitives:\n");
  ok &= gradcheck_diffcore(seed, verbose);
  if (verbose) std::printf("geometry losses:\n");
  ok &= gradcheck_geometry(seed + 1, verbose);
  if (verbose) std::printf("detector composites:\n");
  ok &= gradcheck_detector(seed + 2, verbose);
  if (verbose) std::printf("loss composites:\n");
  ok &= gradcheck_loss(seed + 3, verbose);
  return ok;
}

}  // namespace lmdet
