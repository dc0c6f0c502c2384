#include "lmdet/lm.hpp"

#include <algorithm>

#include "lmdet/error.hpp"

namespace lmdet {

void MllmConfig::validate() const {
  require(d_model % n_heads == 0, "mllm config: d_model must be divisible by n_heads");
  require(image_size % patch == 0, "mllm config: image_size must be divisible by patch");
  require(vocab_size > 0, "mllm config: vocab_size not set");
  require(context >= image_tokens() + 2, "mllm config: context smaller than the image prefix");
}

template <class Real>
LanguageModel<Real> LanguageModel<Real>::create(ParamStore<Real>& store, const MllmConfig& cfg,
                                                Rng& rng) {
  cfg.validate();
  LanguageModel lm;
  lm.cfg = cfg;
  lm.patch_embed = Linear<Real>::create(store, "lm.patch_embed", cfg.patch_dim(), cfg.d_model, rng);
  lm.tok_embed = store.create("lm.tok_embed", {cfg.vocab_size, cfg.d_model});
  lm.tok_embed->fill_normal(rng, Real(0), Real(kInitStd));
  lm.pos_embed = store.create("lm.pos_embed", {cfg.context, cfg.d_model});
  lm.pos_embed->fill_normal(rng, Real(0), Real(kInitStd));
  for (i64 i = 0; i < cfg.n_layers; ++i)
    lm.blocks.push_back(TransformerBlock<Real>::create(store, "lm.block" + std::to_string(i),
                                                       cfg.d_model, cfg.n_heads, 4 * cfg.d_model,
                                                       rng));
  lm.final_ln = LayerNormParams<Real>::create(store, "lm.final_ln", cfg.d_model);
  lm.head = Linear<Real>::create(store, "lm.head", cfg.d_model, cfg.vocab_size, rng);
  return lm;
}

template <class Real>
Tensor<Real> LanguageModel<Real>::patchify(const Image& img, i64 patch) {
  require(img.width == img.height && img.width % patch == 0,
          "patchify: image must be square and divisible by the patch size");
  const i64 grid = img.width / patch;
  Tensor<Real> out({grid * grid, 3 * patch * patch});
  for (i64 gy = 0; gy < grid; ++gy)
    for (i64 gx = 0; gx < grid; ++gx) {
      Real* row = out.data.data() + (gy * grid + gx) * out.cols();
      i64 k = 0;
      for (i64 py = 0; py < patch; ++py)
        for (i64 px = 0; px < patch; ++px) {
          const uint8_t* p = img.at(gx * patch + px, gy * patch + py);
          // map to [-1, 1]
          row[k++] = Real(p[0]) / Real(127.5) - Real(1);
          row[k++] = Real(p[1]) / Real(127.5) - Real(1);
          row[k++] = Real(p[2]) / Real(127.5) - Real(1);
        }
    }
  return out;
}

template <class Real>
typename LanguageModel<Real>::Forward LanguageModel<Real>::fwd(
    Bind<Real>& bind, Id patches, const std::vector<int>& ids, int image_pos,
    const std::vector<int>& det_positions) const {
  auto& g = bind.g;
  const i64 P = cfg.image_tokens();
  require(image_pos >= 0 && size_t(image_pos) < ids.size() && ids[size_t(image_pos)] == Vocab::kImage,
          "mllm forward: <image> placeholder absent from the token stream");
  require(g.rows(patches) == P && g.cols(patches) == cfg.patch_dim(),
          "mllm forward: patch tensor has wrong shape");
  const i64 T = i64(ids.size());
  const i64 N = T - 1 + P;
  require(N <= cfg.context, "mllm forward: sequence length " + std::to_string(N) +
                                " exceeds context " + std::to_string(cfg.context));

  Forward f;
  f.expanded_len = N;
  f.expanded_pos.resize(size_t(T));
  for (i64 t = 0; t < T; ++t)
    f.expanded_pos[size_t(t)] = t < image_pos ? t : (t == image_pos ? image_pos : t - 1 + P);
  for (int dp : det_positions) f.det_expanded.push_back(f.expanded_pos[size_t(dp)]);

  // embeddings: text before <image>, patch block, text after
  std::vector<i64> before_ids, after_ids;
  for (i64 t = 0; t < image_pos; ++t) before_ids.push_back(ids[size_t(t)]);
  for (i64 t = image_pos + 1; t < T; ++t) after_ids.push_back(ids[size_t(t)]);
  const Id tok = bind(tok_embed);
  const Id img_emb = patch_embed.fwd(bind, patches);
  Id seq = before_ids.empty() ? img_emb : g.concat(g.gather_rows(tok, before_ids), img_emb, 0);
  if (!after_ids.empty()) seq = g.concat(seq, g.gather_rows(tok, after_ids), 0);
  seq = g.add(seq, g.slice(bind(pos_embed), 0, N, 0, cfg.d_model));

  // mask: image keys visible to everyone, text keys causal for text queries,
  // image queries never look at text
  std::vector<uint8_t> blocked(size_t(N * N), 0);
  const i64 img_begin = image_pos, img_end = image_pos + P;
  auto is_img = [&](i64 p) { return p >= img_begin && p < img_end; };
  for (i64 q = 0; q < N; ++q)
    for (i64 k = 0; k < N; ++k) {
      if (is_img(k)) continue;
      blocked[size_t(q * N + k)] = (is_img(q) || k > q) ? 1 : 0;
    }

  Id x = seq;
  for (const auto& block : blocks) x = block.fwd(bind, x, &blocked);
  f.hidden_pre = x;
  f.hidden = final_ln.fwd(bind, x);
  f.logits = head.fwd(bind, f.hidden);
  return f;
}

template <class Real>
typename LanguageModel<Real>::Id LanguageModel<Real>::hdet_row(Bind<Real>& bind, const Forward& f,
                                                               size_t which) const {
  require(which < f.det_expanded.size(), "hdet_row: no <DET> occurrence at that index");
  const i64 p = f.det_expanded[which];
  const Id src = cfg.hdet_post_norm ? f.hidden : f.hidden_pre;
  return bind.g.slice(src, p, p + 1, 0, cfg.d_model);
}

template <class Real>
typename LanguageModel<Real>::Id LanguageModel<Real>::token_loss(
    Bind<Real>& bind, const Forward& f, const std::vector<int>& ids,
    const std::vector<uint8_t>& loss_mask, bool mean_reduction) const {
  require(ids.size() == loss_mask.size(), "token_loss: mask length != token count");
  const i64 N = f.expanded_len;
  std::vector<i64> targets(size_t(N), -1);
  std::vector<Real> weights(size_t(N), Real(0));
  i64 supervised = 0;
  // position p predicts the token whose expanded position is p + 1
  for (size_t t = 1; t < ids.size(); ++t) {
    if (!loss_mask[t]) continue;
    const i64 p = f.expanded_pos[t] - 1;
    require(p >= 0 && p < N, "token_loss: bad supervision position");
    targets[size_t(p)] = ids[t];
    weights[size_t(p)] = Real(1);
    ++supervised;
  }
  require(supervised > 0, "token_loss: all-zero supervision mask");
  if (mean_reduction)
    for (auto& w : weights) w /= Real(supervised);
  return bind.g.cross_entropy(f.logits, std::move(targets), std::move(weights));
}

std::vector<int> encode_prompt(const std::string& user_text, const Vocab& vocab, int* image_pos) {
  std::vector<int> ids = {Vocab::kBos, Vocab::kUser};
  if (image_pos) *image_pos = -1;
  for (int id : vocab.tokenize(user_text)) {
    if (id == Vocab::kImage && image_pos) *image_pos = int(ids.size());
    ids.push_back(id);
  }
  ids.push_back(Vocab::kAssistant);
  return ids;
}

GenerationResult generate_greedy(LanguageModel<float>& lm, const Tensor<float>& patches,
                                 std::vector<int> prompt_ids, int image_pos, int max_steps) {
  GenerationResult res;
  std::vector<int> ids = std::move(prompt_ids);
  const size_t prompt_len = ids.size();
  Graph<float> g;
  for (int step = 0; step < max_steps; ++step) {
    g.reset();
    Bind<float> bind(g);
    const auto f = lm.fwd(bind, patches, ids, image_pos, {});
    const auto logits = g.value(f.logits);
    const i64 V = g.cols(f.logits);
    const float* last = logits.data() + (f.expanded_len - 1) * V;
    int best = 0;
    for (i64 c = 1; c < V; ++c)
      if (last[c] > last[best]) best = int(c);
    ids.push_back(best);
    res.ids.push_back(best);
    if (best == Vocab::kDet)
      res.det_positions_generated.push_back(int(res.ids.size()) - 1);
    if (best == Vocab::kEos) break;
    if (step == max_steps - 1) res.truncated = true;
  }
  if (!res.det_positions_generated.empty()) {
    // hidden states depend only on the prefix, so one pass over the final
    // sequence reproduces the step-time activations at each <DET>
    g.reset();
    Bind<float> bind(g);
    std::vector<int> det_global;
    for (int p : res.det_positions_generated) det_global.push_back(int(prompt_len) + p);
    const auto f = lm.fwd(bind, patches, ids, image_pos, det_global);
    for (size_t i = 0; i < det_global.size(); ++i)
      res.hdet.push_back(g.value_tensor(lm.hdet_row(bind, f, i)));
  }
  return res;
}

template struct LanguageModel<float>;
template struct LanguageModel<double>;

}  // namespace lmdet
