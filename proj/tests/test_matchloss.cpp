#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lmdet/gradcheck.hpp"
#include "lmdet/matchloss.hpp"
#include "lmdet/rng.hpp"
#include "oracles.hpp"

using namespace lmdet;
using oracle::brute_force_assignment;


TEST_CASE("hungarian examples") {
  SUBCASE("single row picks the argmin column") {
    const auto match = hungarian_match({{0.5, 0.2, 0.9, 0.4}});
    REQUIRE(match.pairs.size() == 1);
    CHECK(match.pairs[0] == std::pair<int, int>{0, 1});
    CHECK(match.total_cost == doctest::Approx(0.2));
  }
  SUBCASE("3x3 with optimum 5") {
    const auto match = hungarian_match({{4, 1, 3}, {2, 0, 5}, {3, 2, 2}});
    CHECK(match.total_cost == doctest::Approx(5.0));
    REQUIRE(match.pairs.size() == 3);
    CHECK(match.pairs[0] == std::pair<int, int>{0, 1});
    CHECK(match.pairs[1] == std::pair<int, int>{1, 0});
    CHECK(match.pairs[2] == std::pair<int, int>{2, 2});
  }
  SUBCASE("ties break toward the lowest (gt, query) pair") {
    const auto match = hungarian_match({{1.0, 1.0}, {1.0, 1.0}});
    CHECK(match.pairs[0] == std::pair<int, int>{0, 0});
    CHECK(match.pairs[1] == std::pair<int, int>{1, 1});
  }
  SUBCASE("contract violations") {
    CHECK_THROWS_AS(hungarian_match({{1.0, 2.0}, {3.0, 4.0}, {5.0, 6.0}}), Error);  // m > k
    CHECK_THROWS_AS(hungarian_match({{1.0, std::nan("")}}), Error);
  }
}

TEST_CASE("hungarian matches brute force on random matrices") {
  Rng rng(61);
  for (int trial = 0; trial < 200; ++trial) {
    const int m = 1 + int(rng.randint(5));             // up to 5 rows
    const int k = m + int(rng.randint(i64(9 - m)));    // up to 8 cols
    std::vector<std::vector<double>> cost(static_cast<size_t>(m), std::vector<double>(static_cast<size_t>(k), 0.0));
    for (auto& row : cost)
      for (auto& c : row) c = rng.uniform(-2.0, 5.0);
    const auto match = hungarian_match(cost);
    std::vector<std::pair<int, int>> oracle_pairs;
    const double oracle = brute_force_assignment(cost, &oracle_pairs);
    CHECK(match.total_cost == doctest::Approx(oracle).epsilon(1e-9));
    // injectivity
    std::vector<int> used;
    for (auto [i, j] : match.pairs) {
      CHECK(std::find(used.begin(), used.end(), j) == used.end());
      used.push_back(j);
    }
    CHECK(match.pairs.size() == size_t(m));
    // scaling all costs by c > 0 must keep the argmin assignment
    std::vector<std::vector<double>> scaled = cost;
    for (auto& row : scaled)
      for (auto& c : row) c *= 3.7;
    CHECK(hungarian_match(scaled).pairs == match.pairs);
  }
}

TEST_CASE("detection loss examples") {
  LossWeights w;
  SUBCASE("perfect boxes and saturated logits vanish") {
    Graph<float> g;
    Bind<float> bind(g);
    const std::vector<Box> gts = {{0.3, 0.4, 0.2, 0.2}};
    Tensor<float> boxes({2, 4});
    boxes.at(0, 0) = 0.3f; boxes.at(0, 1) = 0.4f; boxes.at(0, 2) = 0.2f; boxes.at(0, 3) = 0.2f;
    boxes.at(1, 0) = 0.8f; boxes.at(1, 1) = 0.8f; boxes.at(1, 2) = 0.1f; boxes.at(1, 3) = 0.1f;
    Tensor<float> logits({2, 1});
    logits.at(0, 0) = 30.f;   // matched, huge margin
    logits.at(1, 0) = -30.f;  // unmatched, huge negative margin
    const auto loss = detection_loss(bind, g.input(boxes), g.input(logits), gts, w);
    CHECK(double(g.scalar_value(loss)) == doctest::Approx(0.0).epsilon(1e-6));
  }
  SUBCASE("single gt, two queries at logit zero give contrast ln 2") {
    Graph<float> g;
    Bind<float> bind(g);
    const std::vector<Box> gts = {{0.3, 0.4, 0.2, 0.2}};
    Tensor<float> boxes({2, 4});
    boxes.at(0, 0) = 0.3f; boxes.at(0, 1) = 0.4f; boxes.at(0, 2) = 0.2f; boxes.at(0, 3) = 0.2f;
    boxes.at(1, 0) = 0.8f; boxes.at(1, 1) = 0.8f; boxes.at(1, 2) = 0.1f; boxes.at(1, 3) = 0.1f;
    Tensor<float> logits({2, 1});  // both zero
    Matching match;
    const auto loss =
        detection_loss(bind, g.input(boxes), g.input(logits), gts, w, false, &match);
    // box terms vanish; bce = mean(ln 2, ln 2) = ln 2, weighted by contrast
    CHECK(double(g.scalar_value(loss)) == doctest::Approx(w.contrast * std::log(2.0)).epsilon(1e-5));
    REQUIRE(match.pairs.size() == 1);
    CHECK(match.pairs[0].second == 0);
  }
  SUBCASE("empty ground truth for a detection sample is an error") {
    Graph<float> g;
    Bind<float> bind(g);
    Tensor<float> boxes({2, 4}, 0.3f);
    Tensor<float> logits({2, 1});
    CHECK_THROWS_AS(detection_loss(bind, g.input(boxes), g.input(logits), {}, w), Error);
  }
  SUBCASE("gradients match finite differences") {
    CHECK(gradcheck_loss(20240611, /*verbose=*/false));
  }
  SUBCASE("loss is nonnegative on random instances") {
    Rng rng(71);
    for (int trial = 0; trial < 50; ++trial) {
      Graph<float> g;
      Bind<float> bind(g);
      Tensor<float> boxes({4, 4});
      for (i64 q = 0; q < 4; ++q) {
        boxes.at(q, 2) = float(rng.uniform(0.05, 0.4));
        boxes.at(q, 3) = float(rng.uniform(0.05, 0.4));
        boxes.at(q, 0) = float(rng.uniform(0.25, 0.75));
        boxes.at(q, 1) = float(rng.uniform(0.25, 0.75));
      }
      Tensor<float> logits({4, 1});
      logits.fill_uniform(rng, -3.f, 3.f);
      std::vector<Box> gts;
      const int m = 1 + int(rng.randint(3));
      for (int i = 0; i < m; ++i) {
        Box b;
        b.w = rng.uniform(0.05, 0.4);
        b.h = rng.uniform(0.05, 0.4);
        b.cx = rng.uniform(0.25, 0.75);
        b.cy = rng.uniform(0.25, 0.75);
        gts.push_back(b);
      }
      const auto loss = detection_loss(bind, g.input(boxes), g.input(logits), gts, w);
      CHECK(double(g.scalar_value(loss)) >= 0.0);
    }
  }
}

TEST_CASE("total loss composition") {
  LossWeights w;
  Graph<float> g;
  Bind<float> bind(g);
  const auto l_tok = g.input(Tensor<float>::scalar(2.0f));
  const auto l_det = g.input(Tensor<float>::scalar(0.5f));
  SUBCASE("arithmetic") {
    const auto total = total_loss(bind, l_tok, l_det, true, w);
    CHECK(double(g.scalar_value(total)) == doctest::Approx(2.5));
  }
  SUBCASE("vqa drops the detection term entirely") {
    const auto total = total_loss(bind, l_tok, l_det, false, w);
    CHECK(double(g.scalar_value(total)) == doctest::Approx(2.0));
  }
  SUBCASE("det weight zero reduces to the token term") {
    LossWeights w0 = w;
    w0.det = 0.0;
    const auto total = total_loss(bind, l_tok, l_det, true, w0);
    CHECK(double(g.scalar_value(total)) == doctest::Approx(2.0));
  }
}
