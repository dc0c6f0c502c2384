#include "lmdet/detector.hpp"

#include <algorithm>
#include <numeric>

#include "lmdet/error.hpp"

namespace lmdet {

void DetConfig::validate() const {
  require(d_det % heads == 0, "det config: d_det must be divisible by heads");
  require(image_size % patch == 0, "det config: image_size must be divisible by patch");
  require(num_queries <= feature_count(), "det config: more queries than image features");
  require(vocab_size > 0, "det config: vocab_size not set");
  require(text_cap >= 1, "det config: text_cap must be positive");
}

DetConfig DetConfig::with_preset(const std::string& preset) {
  DetConfig c;
  if (preset == "T") {
    c.d_det = 64;
    c.dec_layers = 1;
  } else if (preset == "B") {
    c.d_det = 128;
    c.dec_layers = 2;
  } else if (preset == "L") {
    c.d_det = 192;
    c.dec_layers = 3;
  } else {
    throw Error("det config: unknown preset '" + preset + "' (expected T, B or L)");
  }
  return c;
}

template <class Real>
Detector<Real> Detector<Real>::create(ParamStore<Real>& store, const DetConfig& cfg, i64 d_lm,
                                      Rng& rng) {
  cfg.validate();
  Detector d;
  d.cfg = cfg;
  d.d_lm = d_lm;
  const i64 dd = cfg.d_det;
  d.patch_embed = Linear<Real>::create(store, "det.enc.patch_embed", cfg.patch_dim(), dd, rng);
  d.img_pos = store.create("det.enc.img_pos", {cfg.feature_count(), dd});
  d.img_pos->fill_normal(rng, Real(0), Real(kInitStd));
  d.img_block = TransformerBlock<Real>::create(store, "det.enc.img_block", dd, cfg.heads, 4 * dd, rng);
  d.txt_embed = store.create("det.enc.txt_embed", {cfg.vocab_size, dd});
  d.txt_embed->fill_normal(rng, Real(0), Real(kInitStd));
  d.txt_pos = store.create("det.enc.txt_pos", {cfg.text_cap, dd});
  d.txt_pos->fill_normal(rng, Real(0), Real(kInitStd));
  d.txt_block = TransformerBlock<Real>::create(store, "det.enc.txt_block", dd, cfg.heads, 4 * dd, rng);
  d.fus_img_ln = LayerNormParams<Real>::create(store, "det.enc.fus_img_ln", dd);
  d.fus_txt_ln = LayerNormParams<Real>::create(store, "det.enc.fus_txt_ln", dd);
  d.img2txt = MultiHeadAttention<Real>::create(store, "det.enc.img2txt", dd, cfg.heads, rng);
  d.txt2img = MultiHeadAttention<Real>::create(store, "det.enc.txt2img", dd, cfg.heads, rng);
  d.bridge1 = Linear<Real>::create(store, "bridge.fc1", d_lm, dd, rng);
  d.bridge2 = Linear<Real>::create(store, "bridge.fc2", dd, dd, rng);
  d.qs_ln = LayerNormParams<Real>::create(store, "det.qs.ln", dd);
  d.qs_attn = MultiHeadAttention<Real>::create(store, "det.qs.attn", dd, cfg.heads, rng);
  for (i64 l = 0; l < cfg.dec_layers; ++l) {
    const std::string p = "det.dec.layer" + std::to_string(l);
    DecLayer layer;
    layer.ln1 = LayerNormParams<Real>::create(store, p + ".ln1", dd);
    layer.self_attn = MultiHeadAttention<Real>::create(store, p + ".self", dd, cfg.heads, rng);
    layer.ln2 = LayerNormParams<Real>::create(store, p + ".ln2", dd);
    layer.img_cross = MultiHeadAttention<Real>::create(store, p + ".img_cross", dd, cfg.heads, rng);
    layer.ln3 = LayerNormParams<Real>::create(store, p + ".ln3", dd);
    layer.txt_cross = MultiHeadAttention<Real>::create(store, p + ".txt_cross", dd, cfg.heads, rng);
    layer.ln4 = LayerNormParams<Real>::create(store, p + ".ln4", dd);
    layer.mlp = Mlp<Real>::create(store, p + ".mlp", dd, 4 * dd, rng);
    d.dec.push_back(std::move(layer));
  }
  d.dec_ln = LayerNormParams<Real>::create(store, "det.dec.final_ln", dd);
  d.box1 = Linear<Real>::create(store, "det.head.box1", dd, dd, rng);
  d.box2 = Linear<Real>::create(store, "det.head.box2", dd, dd, rng);
  d.box3 = Linear<Real>::create(store, "det.head.box3", dd, 4, rng);
  return d;
}

template <class Real>
typename Detector<Real>::Encoded Detector<Real>::encode_pair(Bind<Real>& bind, Id patches,
                                                             const std::vector<int>& txt_ids) const {
  auto& g = bind.g;
  require(!txt_ids.empty(), "encode_pair: empty detector text");
  require(g.rows(patches) == cfg.feature_count() && g.cols(patches) == cfg.patch_dim(),
          "encode_pair: patch tensor has wrong shape");
  std::vector<i64> ids(txt_ids.begin(), txt_ids.end());
  if (i64(ids.size()) > cfg.text_cap) ids.resize(size_t(cfg.text_cap));
  const i64 T = i64(ids.size());

  Id img = g.add(patch_embed.fwd(bind, patches), bind(img_pos));
  img = img_block.fwd(bind, img);
  Id txt = g.add(g.gather_rows(bind(txt_embed), ids), g.slice(bind(txt_pos), 0, T, 0, cfg.d_det));
  txt = txt_block.fwd(bind, txt);

  // bidirectional fusion from the pre-update pair
  const Id img_n = fus_img_ln.fwd(bind, img);
  const Id txt_n = fus_txt_ln.fwd(bind, txt);
  const Id img_out = g.add(img, img2txt.fwd(bind, img_n, txt_n));
  const Id txt_out = g.add(txt, txt2img.fwd(bind, txt_n, img_n));
  return {img_out, txt_out};
}

template <class Real>
typename Detector<Real>::Id Detector<Real>::project_hdet(Bind<Real>& bind, Id hdet) const {
  require(bind.g.cols(hdet) == d_lm, "project_hdet: embedding width mismatch");
  return bridge2.fwd(bind, bind.g.gelu(bridge1.fwd(bind, hdet)));
}

std::vector<i64> top_k_indices(const std::vector<double>& scores, i64 k) {
  require(k >= 1 && k <= i64(scores.size()), "top_k: k out of range");
  std::vector<i64> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](i64 a, i64 b) {
    if (scores[size_t(a)] != scores[size_t(b)]) return scores[size_t(a)] > scores[size_t(b)];
    return a < b;
  });
  order.resize(size_t(k));
  return order;
}

template <class Real>
typename Detector<Real>::Selected Detector<Real>::select_queries(Bind<Real>& bind, Id hdet_proj,
                                                                 Id f_img, Id f_txt, i64 k) const {
  auto& g = bind.g;
  require(k <= g.rows(f_img), "select_queries: k exceeds the feature count");
  Selected sel;
  // cross-attention activation: Q = image features, K = V = bridged embedding
  sel.f_img_act = g.add(f_img, qs_attn.fwd(bind, qs_ln.fwd(bind, f_img), hdet_proj));
  // relevance = max over text tokens of the feature/text dot product
  const Id rel = g.row_max(g.matmul(sel.f_img_act, f_txt, false, true));
  const auto rel_vals = g.value(rel);
  sel.indices = top_k_indices(std::vector<double>(rel_vals.begin(), rel_vals.end()), k);
  sel.queries = g.gather_rows(sel.f_img_act, sel.indices);
  sel.query_pos = g.gather_rows(bind(img_pos), sel.indices);
  return sel;
}

template <class Real>
typename Detector<Real>::Decoded Detector<Real>::decode(Bind<Real>& bind, Id hdet_proj,
                                                        const Selected& sel, Id f_txt,
                                                        bool zero_hdet_slot) const {
  auto& g = bind.g;
  Id hdet_slot = hdet_proj;
  if (zero_hdet_slot)
    hdet_slot = g.input(Tensor<Real>({g.rows(hdet_proj), g.cols(hdet_proj)}, Real(0)));
  const Id txt_kv = g.concat(f_txt, hdet_slot, 0);
  const Id img_kv = g.add(sel.f_img_act, bind(img_pos));

  Id q = g.add(sel.queries, sel.query_pos);
  for (const auto& layer : dec) {
    const Id n1 = layer.ln1.fwd(bind, q);
    q = g.add(q, layer.self_attn.fwd(bind, n1, n1));
    q = g.add(q, layer.img_cross.fwd(bind, layer.ln2.fwd(bind, q), img_kv));
    q = g.add(q, layer.txt_cross.fwd(bind, layer.ln3.fwd(bind, q), txt_kv));
    q = g.add(q, layer.mlp.fwd(bind, layer.ln4.fwd(bind, q)));
  }
  q = dec_ln.fwd(bind, q);

  Decoded out;
  out.boxes = g.sigmoid(box3.fwd(bind, g.gelu(box2.fwd(bind, g.gelu(box1.fwd(bind, q))))));
  out.logits = g.row_max(g.matmul(q, f_txt, false, true));
  return out;
}

template <class Real>
DetPrediction Detector<Real>::read_prediction(const Graph<Real>& g, const Decoded& d) {
  DetPrediction pred;
  const auto boxes = g.value(d.boxes);
  const auto logits = g.value(d.logits);
  const i64 k = g.rows(d.boxes);
  for (i64 i = 0; i < k; ++i) {
    pred.boxes.push_back(Box{double(boxes[size_t(4 * i)]), double(boxes[size_t(4 * i + 1)]),
                             double(boxes[size_t(4 * i + 2)]), double(boxes[size_t(4 * i + 3)])});
    pred.logits.push_back(double(logits[size_t(i)]));
  }
  pred.selected = 0;
  for (i64 i = 1; i < k; ++i)
    if (pred.logits[size_t(i)] > pred.logits[size_t(pred.selected)]) pred.selected = int(i);
  pred.pred = pred.boxes[size_t(pred.selected)];
  return pred;
}

template struct Detector<float>;
template struct Detector<double>;

}  // namespace lmdet
