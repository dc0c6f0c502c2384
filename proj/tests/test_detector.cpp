#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lmdet/detector.hpp"
#include "lmdet/gradcheck.hpp"
#include "lmdet/text.hpp"

using namespace lmdet;

namespace {

template <class Real>
struct Fixture {
  DetConfig cfg;
  ParamStore<Real> store;
  Detector<Real> det;
  Tensor<Real> patches;
  Tensor<Real> hdet;
  std::vector<int> txt_ids;

  explicit Fixture(uint64_t seed, i64 image_size = 24) {
    cfg.d_det = 16;
    cfg.heads = 2;
    cfg.num_queries = 4;
    cfg.dec_layers = 2;
    cfg.patch = 4;
    cfg.image_size = image_size;  // 24 -> 6x6 grid
    cfg.text_cap = 8;
    cfg.vocab_size = Vocab::standard().size();
    Rng rng(seed);
    det = Detector<Real>::create(store, cfg, /*d_lm=*/16, rng);
    patches = Tensor<Real>({cfg.feature_count(), cfg.patch_dim()});
    patches.fill_uniform(rng, -1.0, 1.0);
    hdet = Tensor<Real>({1, 16});
    hdet.fill_uniform(rng, -1.0, 1.0);
    txt_ids = Vocab::standard().tokenize("the red circle");
  }
};

}  // namespace

TEST_CASE("encode_pair shape contract and determinism") {
  Fixture<float> f(7);
  Graph<float> g;
  Bind<float> bind(g);
  const auto enc = f.det.encode_pair(bind, f.patches, f.txt_ids);
  CHECK(g.rows(enc.f_img) == f.cfg.feature_count());
  CHECK(g.cols(enc.f_img) == f.cfg.d_det);
  CHECK(g.rows(enc.f_txt) == i64(f.txt_ids.size()));
  CHECK(g.cols(enc.f_txt) == f.cfg.d_det);

  Graph<float> g2;
  Bind<float> bind2(g2);
  const auto enc2 = f.det.encode_pair(bind2, f.patches, f.txt_ids);
  const auto a = g.value(enc.f_img);
  const auto b = g2.value(enc2.f_img);
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

  SUBCASE("empty text rejected") {
    Graph<float> g3;
    Bind<float> bind3(g3);
    CHECK_THROWS_AS(f.det.encode_pair(bind3, f.patches, {}), Error);
  }
  SUBCASE("long text is truncated to the cap") {
    Graph<float> g3;
    Bind<float> bind3(g3);
    std::vector<int> long_ids(20, f.txt_ids[0]);
    const auto enc3 = f.det.encode_pair(bind3, f.patches, long_ids);
    CHECK(g3.rows(enc3.f_txt) == f.cfg.text_cap);
  }
}

TEST_CASE("fusion couples the modalities") {
  Fixture<float> f(8);
  auto run = [&](const std::vector<int>& ids) {
    Graph<float> g;
    Bind<float> bind(g);
    const auto enc = f.det.encode_pair(bind, f.patches, ids);
    return g.value_tensor(enc.f_img);
  };
  const auto base = run(f.txt_ids);
  std::vector<int> swapped = f.txt_ids;
  std::swap(swapped[0], swapped[2]);
  const auto changed = run(swapped);
  double diff = 0;
  for (size_t i = 0; i < base.data.size(); ++i)
    diff = std::max(diff, std::abs(double(base.data[i]) - double(changed.data[i])));
  CHECK(diff > 1e-6);
}

TEST_CASE("top_k_indices") {
  SUBCASE("matches a full sort on a 6x6 grid of scores") {
    Rng rng(9);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> scores(36);
      for (auto& s : scores) s = rng.uniform(-1, 1);
      const auto got = top_k_indices(scores, 5);
      auto order = scores;
      std::vector<i64> want(36);
      std::iota(want.begin(), want.end(), 0);
      std::sort(want.begin(), want.end(), [&](i64 a, i64 b) {
        if (scores[size_t(a)] != scores[size_t(b)]) return scores[size_t(a)] > scores[size_t(b)];
        return a < b;
      });
      want.resize(5);
      CHECK(got == want);
    }
  }
  SUBCASE("k equal to the pool is a permutation") {
    const auto got = top_k_indices({0.1, 0.5, -0.2, 0.5}, 4);
    std::vector<i64> sorted = got;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<i64>{0, 1, 2, 3});
    CHECK(got[0] == 1);  // ties by index: 1 before 3
    CHECK(got[1] == 3);
  }
  SUBCASE("monotone: raising a score above the k-th threshold includes it") {
    std::vector<double> scores = {0.9, 0.8, 0.7, 0.1, 0.05};
    auto top = top_k_indices(scores, 3);
    CHECK(std::find(top.begin(), top.end(), 4) == top.end());
    scores[4] = 0.85;
    top = top_k_indices(scores, 3);
    CHECK(std::find(top.begin(), top.end(), 4) != top.end());
  }
}

TEST_CASE("query selection consumes the detection embedding") {
  Fixture<float> f(10);
  auto run = [&](const Tensor<float>& hdet) {
    Graph<float> g;
    Bind<float> bind(g);
    const auto enc = f.det.encode_pair(bind, f.patches, f.txt_ids);
    Tensor<float> h = hdet;
    const auto hproj = f.det.project_hdet(bind, g.input(h));
    const auto sel = f.det.select_queries(bind, hproj, enc.f_img, enc.f_txt, f.cfg.num_queries);
    return g.value_tensor(sel.queries);
  };
  const auto base = run(f.hdet);
  Tensor<float> other = f.hdet;
  for (auto& v : other.data) v = -v;
  const auto changed = run(other);
  double diff = 0;
  for (size_t i = 0; i < base.data.size(); ++i)
    diff = std::max(diff, std::abs(double(base.data[i]) - double(changed.data[i])));
  CHECK(diff > 1e-6);

  SUBCASE("k above the feature count is rejected") {
    Graph<float> g;
    Bind<float> bind(g);
    const auto enc = f.det.encode_pair(bind, f.patches, f.txt_ids);
    const auto hproj = f.det.project_hdet(bind, g.input(f.hdet));
    CHECK_THROWS_AS(f.det.select_queries(bind, hproj, enc.f_img, enc.f_txt, 9999), Error);
  }
  SUBCASE("k equal to the feature count keeps every feature") {
    Graph<float> g;
    Bind<float> bind(g);
    const auto enc = f.det.encode_pair(bind, f.patches, f.txt_ids);
    const auto hproj = f.det.project_hdet(bind, g.input(f.hdet));
    const auto sel =
        f.det.select_queries(bind, hproj, enc.f_img, enc.f_txt, f.cfg.feature_count());
    std::vector<i64> sorted = sel.indices;
    std::sort(sorted.begin(), sorted.end());
    for (i64 i = 0; i < f.cfg.feature_count(); ++i) CHECK(sorted[size_t(i)] == i);
  }
}

TEST_CASE("decode contract") {
  Fixture<float> f(12);
  // fresh init is near-linear and tiny; inflate the weights so every pathway
  // carries measurable signal
  f.store.for_each([](const std::string&, Tensor<float>& t) {
    for (auto& v : t.data) v *= 6.f;
  });
  Graph<float> g;
  Bind<float> bind(g);
  const auto enc = f.det.encode_pair(bind, f.patches, f.txt_ids);
  const auto hproj = f.det.project_hdet(bind, g.input(f.hdet));
  const auto sel = f.det.select_queries(bind, hproj, enc.f_img, enc.f_txt, f.cfg.num_queries);
  const auto dec = f.det.decode(bind, hproj, sel, enc.f_txt);
  const auto pred = Detector<float>::read_prediction(g, dec);

  SUBCASE("boxes live in the unit hypercube") {
    REQUIRE(pred.boxes.size() == size_t(f.cfg.num_queries));
    for (const auto& b : pred.boxes) {
      CHECK(b.cx >= 0.0);
      CHECK(b.cx <= 1.0);
      CHECK(b.cy >= 0.0);
      CHECK(b.cy <= 1.0);
      CHECK(b.w >= 0.0);
      CHECK(b.w <= 1.0);
      CHECK(b.h >= 0.0);
      CHECK(b.h <= 1.0);
    }
  }
  SUBCASE("selected equals an independent argmax") {
    int arg = 0;
    for (size_t i = 1; i < pred.logits.size(); ++i)
      if (pred.logits[i] > pred.logits[size_t(arg)]) arg = int(i);
    CHECK(pred.selected == arg);
    CHECK(pred.pred.cx == pred.boxes[size_t(arg)].cx);
  }
  SUBCASE("zeroing the embedding slot in text cross-attention changes predictions") {
    const auto dec_zeroed = f.det.decode(bind, hproj, sel, enc.f_txt, /*zero_hdet_slot=*/true);
    const auto base_boxes = g.value(dec.boxes);
    const auto zero_boxes = g.value(dec_zeroed.boxes);
    double diff = 0;
    for (size_t i = 0; i < base_boxes.size(); ++i)
      diff = std::max(diff, std::abs(double(base_boxes[i]) - double(zero_boxes[i])));
    CHECK(diff > 1e-7);
  }
}

TEST_CASE("decoder is permutation-equivariant over queries") {
  Fixture<double> f(13);
  Graph<double> g;
  Bind<double> bind(g);
  const auto enc = f.det.encode_pair(bind, f.patches, f.txt_ids);
  const auto hproj = f.det.project_hdet(bind, g.input(f.hdet));
  const auto sel = f.det.select_queries(bind, hproj, enc.f_img, enc.f_txt, f.cfg.num_queries);
  const auto dec = f.det.decode(bind, hproj, sel, enc.f_txt);
  const auto base_boxes = g.value_tensor(dec.boxes);
  const auto base_logits = g.value_tensor(dec.logits);

  // permute the selected queries by hand and decode again
  const std::vector<i64> perm = {2, 0, 3, 1};
  typename Detector<double>::Selected permuted = sel;
  permuted.queries = g.gather_rows(sel.queries, perm);
  permuted.query_pos = g.gather_rows(sel.query_pos, perm);
  const auto dec_p = f.det.decode(bind, hproj, permuted, enc.f_txt);
  const auto perm_boxes = g.value_tensor(dec_p.boxes);
  const auto perm_logits = g.value_tensor(dec_p.logits);
  for (i64 q = 0; q < 4; ++q) {
    for (i64 c = 0; c < 4; ++c)
      CHECK(perm_boxes.at(q, c) == doctest::Approx(base_boxes.at(perm[size_t(q)], c)).epsilon(1e-9));
    CHECK(perm_logits.at(q, 0) ==
          doctest::Approx(base_logits.at(perm[size_t(q)], 0)).epsilon(1e-9));
  }
}

TEST_CASE("detector composites pass the gradient check") {
  CHECK(gradcheck_detector(20240611, /*verbose=*/false));
}

TEST_CASE("capacity presets") {
  CHECK(DetConfig::with_preset("T").d_det == 64);
  CHECK(DetConfig::with_preset("B").d_det == 128);
  CHECK(DetConfig::with_preset("L").d_det == 192);
  CHECK(DetConfig::with_preset("T").dec_layers < DetConfig::with_preset("L").dec_layers);
  CHECK_THROWS_AS(DetConfig::with_preset("XL"), Error);
}
