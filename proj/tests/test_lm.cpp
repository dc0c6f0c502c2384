#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "lmdet/lm.hpp"
#include "lmdet/scenegen.hpp"

using namespace lmdet;

namespace {

MllmConfig small_cfg() {
  MllmConfig cfg;
  cfg.d_model = 32;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.patch = 8;
  cfg.image_size = 32;  // 16 image tokens
  cfg.context = 96;
  cfg.vocab_size = Vocab::standard().size();
  return cfg;
}

struct Fixture {
  MllmConfig cfg = small_cfg();
  ParamStore<float> store;
  LanguageModel<float> lm;
  Scene scene;
  Image img;
  Tensor<float> patches;
  EncodedConv enc;

  Fixture() {
    Rng rng(2025);
    lm = LanguageModel<float>::create(store, cfg, rng);
    Rng scene_rng(11);
    scene = generate_scene(scene_rng, cfg.image_size);
    img = render(scene);
    patches = LanguageModel<float>::patchify(img, cfg.patch);
    RawAnnotation raw;
    raw.data_type = DataType::Rec;
    raw.caption = std::string("the ") + color_word(scene.objects[0].color) + " " +
                  shape_word(scene.objects[0].shape);
    raw.gt_boxes = {scene.objects[0].box};
    Rng fmt_rng(0);
    const auto conv = format_sample(raw, DataType::Rec, fmt_rng);
    enc = encode_conversation(conv, Vocab::standard());
  }
};

// bare Adam keeps the test self-contained
void adam_step(ParamStore<float>& store, Bind<float>& bind, Graph<float>& g, int t,
               std::vector<std::vector<float>>& m, std::vector<std::vector<float>>& v, float lr) {
  size_t idx = 0;
  store.for_each([&](const std::string&, Tensor<float>& p) {
    const size_t i = idx++;
    if (!bind.bound(&p)) return;
    const auto grad = g.grad(bind.id_of(&p));
    if (m[i].empty()) {
      m[i].assign(p.data.size(), 0.f);
      v[i].assign(p.data.size(), 0.f);
    }
    const float bc1 = 1.f - std::pow(0.9f, float(t));
    const float bc2 = 1.f - std::pow(0.999f, float(t));
    for (size_t k = 0; k < p.data.size(); ++k) {
      m[i][k] = 0.9f * m[i][k] + 0.1f * grad[k];
      v[i][k] = 0.999f * v[i][k] + 0.001f * grad[k] * grad[k];
      p.data[k] -= lr * (m[i][k] / bc1) / (std::sqrt(v[i][k] / bc2) + 1e-8f);
    }
  });
}

}  // namespace

TEST_CASE("shape contract and uniform-logit loss") {
  Fixture f;
  Graph<float> g;
  Bind<float> bind(g);
  std::vector<int> det_pos;
  for (size_t i = 0; i < f.enc.ids.size(); ++i)
    if (f.enc.ids[i] == Vocab::kDet) det_pos.push_back(int(i));
  const auto fwd = f.lm.fwd(bind, f.patches, f.enc.ids, f.enc.image_pos, det_pos);
  const i64 N = i64(f.enc.ids.size()) - 1 + f.cfg.image_tokens();
  CHECK(g.rows(fwd.logits) == N);
  CHECK(g.cols(fwd.logits) == f.cfg.vocab_size);
  CHECK(g.rows(fwd.hidden) == N);
  CHECK(g.cols(fwd.hidden) == f.cfg.d_model);
  REQUIRE(fwd.det_expanded.size() == det_pos.size());
  const auto hdet = f.lm.hdet_row(bind, fwd, 0);
  CHECK(g.rows(hdet) == 1);
  CHECK(g.cols(hdet) == f.cfg.d_model);

  SUBCASE("uniform logits mean loss ln(vocab)") {
    // zero every weight: constant logits => per-token loss ln V
    f.store.for_each([](const std::string&, Tensor<float>& t) {
      for (auto& v : t.data) v = 0.f;
    });
    Graph<float> g2;
    Bind<float> b2(g2);
    const auto fwd2 = f.lm.fwd(b2, f.patches, f.enc.ids, f.enc.image_pos, {});
    const auto loss = f.lm.token_loss(b2, fwd2, f.enc.ids, f.enc.loss_mask, true);
    CHECK(double(g2.scalar_value(loss)) ==
          doctest::Approx(std::log(double(f.cfg.vocab_size))).epsilon(1e-4));
  }
  SUBCASE("sum reduction scales by the supervised count") {
    Graph<float> g2;
    Bind<float> b2(g2);
    const auto fwd2 = f.lm.fwd(b2, f.patches, f.enc.ids, f.enc.image_pos, {});
    const auto mean_loss = f.lm.token_loss(b2, fwd2, f.enc.ids, f.enc.loss_mask, true);
    const auto sum_loss = f.lm.token_loss(b2, fwd2, f.enc.ids, f.enc.loss_mask, false);
    size_t supervised = 0;
    for (uint8_t m : f.enc.loss_mask) supervised += m;
    CHECK(double(g2.scalar_value(sum_loss)) ==
          doctest::Approx(double(g2.scalar_value(mean_loss)) * double(supervised)).epsilon(1e-5));
  }
  SUBCASE("all-zero mask errors") {
    Graph<float> g2;
    Bind<float> b2(g2);
    const auto fwd2 = f.lm.fwd(b2, f.patches, f.enc.ids, f.enc.image_pos, {});
    std::vector<uint8_t> zero_mask(f.enc.ids.size(), 0);
    CHECK_THROWS_AS(f.lm.token_loss(b2, fwd2, f.enc.ids, zero_mask, true), Error);
  }
  SUBCASE("missing <image> placeholder errors") {
    Graph<float> g2;
    Bind<float> b2(g2);
    std::vector<int> ids = f.enc.ids;
    ids[size_t(f.enc.image_pos)] = Vocab::kPad;
    CHECK_THROWS_AS(f.lm.fwd(b2, f.patches, ids, f.enc.image_pos, {}), Error);
  }
  SUBCASE("context overflow errors") {
    Graph<float> g2;
    Bind<float> b2(g2);
    std::vector<int> ids = f.enc.ids;
    while (i64(ids.size()) - 1 + f.cfg.image_tokens() <= f.cfg.context)
      ids.push_back(Vocab::kPad);
    CHECK_THROWS_AS(f.lm.fwd(b2, f.patches, ids, f.enc.image_pos, {}), Error);
  }
}

TEST_CASE("causality: a text perturbation never changes earlier logits") {
  Fixture f;
  auto run = [&](const std::vector<int>& ids) {
    Graph<float> g;
    Bind<float> bind(g);
    const auto fwd = f.lm.fwd(bind, f.patches, ids, f.enc.image_pos, {});
    return g.value_tensor(fwd.logits);
  };
  const auto base = run(f.enc.ids);
  // perturb a token near the end of the stream
  std::vector<int> mutated = f.enc.ids;
  const size_t j = mutated.size() - 3;
  mutated[j] = mutated[j] == Vocab::kPad ? Vocab::kEos : Vocab::kPad;
  const auto changed = run(mutated);
  const i64 V = f.cfg.vocab_size;
  const i64 j_expanded = i64(j) - 1 + f.cfg.image_tokens();
  for (i64 p = 0; p < j_expanded; ++p)
    for (i64 c = 0; c < V; ++c)
      CHECK(base.data[size_t(p * V + c)] == changed.data[size_t(p * V + c)]);
}

TEST_CASE("image prefix reaches the text logits") {
  Fixture f;
  auto run = [&](const Tensor<float>& patches) {
    Graph<float> g;
    Bind<float> bind(g);
    const auto fwd = f.lm.fwd(bind, patches, f.enc.ids, f.enc.image_pos, {});
    return g.value_tensor(fwd.logits);
  };
  const auto base = run(f.patches);
  Tensor<float> zeroed = f.patches;
  std::fill(zeroed.data.begin(), zeroed.data.end(), 0.f);
  const auto changed = run(zeroed);
  double max_diff = 0;
  for (size_t i = 0; i < base.data.size(); ++i)
    max_diff = std::max(max_diff, std::abs(double(base.data[i]) - double(changed.data[i])));
  CHECK(max_diff > 1e-4);
}

TEST_CASE("overfit one sample: greedy emits the exact answer") {
  Fixture f;
  const Vocab& vocab = Vocab::standard();
  std::vector<std::vector<float>> m(f.store.count()), v(f.store.count());
  Graph<float> g;
  double last_loss = 1e9;
  for (int step = 1; step <= 200; ++step) {
    g.reset();
    Bind<float> bind(g);
    const auto fwd = f.lm.fwd(bind, f.patches, f.enc.ids, f.enc.image_pos, {});
    const auto loss = f.lm.token_loss(bind, fwd, f.enc.ids, f.enc.loss_mask, true);
    last_loss = double(g.scalar_value(loss));
    g.backward(loss);
    adam_step(f.store, bind, g, step, m, v, 3e-3f);
  }
  CHECK(last_loss < 0.05);

  int image_pos = -1;
  const auto prompt = encode_prompt(f.enc.ids.empty() ? "" : [&] {
    // rebuild the user turn text from the encoded ids between User: and Assistant:
    std::vector<int> user_ids;
    for (size_t i = 2; i < f.enc.ids.size() && f.enc.ids[i] != Vocab::kAssistant; ++i)
      user_ids.push_back(f.enc.ids[i]);
    return vocab.detokenize(user_ids);
  }(), vocab, &image_pos);
  const auto gen = generate_greedy(f.lm, f.patches, prompt, image_pos, 12);
  CHECK(vocab.detokenize(gen.ids) == "It is <DET> . <eos>");
  REQUIRE(gen.hdet.size() == 1);
  CHECK(!gen.truncated);

  SUBCASE("generation is deterministic") {
    const auto gen2 = generate_greedy(f.lm, f.patches, prompt, image_pos, 12);
    CHECK(gen2.ids == gen.ids);
    for (size_t i = 0; i < gen.hdet[0].data.size(); ++i)
      CHECK(gen2.hdet[0].data[i] == gen.hdet[0].data[i]);
  }

  SUBCASE("teacher forcing and generation agree on h_det") {
    // forced stream = prompt + generated answer; h_det at the <DET> position
    std::vector<int> forced = prompt;
    forced.insert(forced.end(), gen.ids.begin(), gen.ids.end());
    std::vector<int> det_pos;
    for (size_t i = 0; i < forced.size(); ++i)
      if (forced[i] == Vocab::kDet) det_pos.push_back(int(i));
    REQUIRE(det_pos.size() == 1);
    Graph<float> g2;
    Bind<float> bind(g2);
    const auto fwd = f.lm.fwd(bind, f.patches, forced, image_pos, det_pos);
    const auto hdet = g2.value_tensor(f.lm.hdet_row(bind, fwd, 0));
    for (size_t i = 0; i < hdet.data.size(); ++i)
      CHECK(hdet.data[i] == gen.hdet[0].data[i]);
  }

  SUBCASE("permuting image patches moves h_det") {
    Tensor<float> permuted = f.patches;
    for (i64 c = 0; c < permuted.cols(); ++c)
      std::swap(permuted.at(0, c), permuted.at(permuted.rows() - 1, c));
    const auto gen2 = generate_greedy(f.lm, permuted, prompt, image_pos, 12);
    REQUIRE(!gen2.hdet.empty());
    double diff = 0;
    for (size_t i = 0; i < gen.hdet[0].data.size(); ++i)
      diff = std::max(diff, std::abs(double(gen.hdet[0].data[i]) - double(gen2.hdet[0].data[i])));
    CHECK(diff > 1e-6);
  }
}
