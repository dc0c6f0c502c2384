#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "lmdet/geometry.hpp"
#include "lmdet/gradcheck.hpp"
#include "lmdet/rng.hpp"
#include "oracles.hpp"

using namespace lmdet;
using oracle::raster_giou;
using oracle::raster_iou;

namespace {

Box random_box(Rng& rng) {
  Box b;
  b.w = rng.uniform(0.05, 0.6);
  b.h = rng.uniform(0.05, 0.6);
  b.cx = rng.uniform(b.w / 2, 1 - b.w / 2);
  b.cy = rng.uniform(b.h / 2, 1 - b.h / 2);
  return b;
}

}  // namespace

TEST_CASE("box conversion") {
  SUBCASE("full-image box") {
    const auto c = to_corners({0.5, 0.5, 1, 1});
    CHECK(c[0] == doctest::Approx(0));
    CHECK(c[1] == doctest::Approx(0));
    CHECK(c[2] == doctest::Approx(1));
    CHECK(c[3] == doctest::Approx(1));
  }
  SUBCASE("quarter box") {
    const auto c = to_corners({0.25, 0.25, 0.5, 0.5});
    CHECK(c[0] == doctest::Approx(0));
    CHECK(c[1] == doctest::Approx(0));
    CHECK(c[2] == doctest::Approx(0.5));
    CHECK(c[3] == doctest::Approx(0.5));
  }
  SUBCASE("round trip within 1e-7") {
    Rng rng(3);
    for (int i = 0; i < 500; ++i) {
      const Box b = random_box(rng);
      const Box back = to_center(to_corners(b));
      CHECK(std::abs(back.cx - b.cx) <= 1e-7);
      CHECK(std::abs(back.cy - b.cy) <= 1e-7);
      CHECK(std::abs(back.w - b.w) <= 1e-7);
      CHECK(std::abs(back.h - b.h) <= 1e-7);
    }
  }
  SUBCASE("non-positive extent rejected") {
    CHECK_THROWS_AS(to_corners({0.5, 0.5, 0.0, 0.1}), Error);
    CHECK_THROWS_AS(to_center({0.2, 0.2, 0.2, 0.4}), Error);
  }
}

TEST_CASE("iou examples") {
  CHECK(iou({0.5, 0.5, 0.4, 0.4}, {0.5, 0.5, 0.4, 0.4}) == doctest::Approx(1.0));
  // corners (0,0,2,2) vs (1,1,3,3) in a 4-unit frame
  const Box a = to_center({0.0, 0.0, 0.5, 0.5});
  const Box b = to_center({0.25, 0.25, 0.75, 0.75});
  CHECK(iou(a, b) == doctest::Approx(1.0 / 7.0));
  CHECK(iou(a, b) == doctest::Approx(raster_iou(a, b)).epsilon(1e-6));
  // disjoint
  CHECK(iou({0.2, 0.2, 0.2, 0.2}, {0.8, 0.8, 0.2, 0.2}) == doctest::Approx(0.0));
}

TEST_CASE("giou examples") {
  SUBCASE("identical boxes") {
    const auto r = giou_loss({0.5, 0.5, 0.3, 0.3}, {0.5, 0.5, 0.3, 0.3});
    CHECK(r.giou == doctest::Approx(1.0));
    CHECK(r.loss == 0.0);
  }
  SUBCASE("side-by-side with a gap: corners (0,0,1,1) vs (2,0,3,1) scaled by 1/3") {
    const Box a = to_center({0.0, 0.0, 1.0 / 3, 1.0 / 3});
    const Box b = to_center({2.0 / 3, 0.0, 1.0, 1.0 / 3});
    CHECK(giou_loss(a, b).giou == doctest::Approx(-1.0 / 3.0));
  }
  SUBCASE("overlapping: corners (0,0,2,2) vs (1,1,3,3) in a 4-unit frame") {
    const Box a = to_center({0.0, 0.0, 0.5, 0.5});
    const Box b = to_center({0.25, 0.25, 0.75, 0.75});
    CHECK(giou_loss(a, b).giou == doctest::Approx(1.0 / 7.0 - 2.0 / 9.0));
    CHECK(giou_loss(a, b).giou == doctest::Approx(raster_giou(a, b)).epsilon(1e-6));
  }
}

TEST_CASE("iou and giou match the raster oracle on random pairs") {
  Rng rng(17);
  for (int i = 0; i < 1000; ++i) {
    const Box a = random_box(rng), b = random_box(rng);
    CHECK(std::abs(iou(a, b) - raster_iou(a, b)) <= 1e-3);
    CHECK(std::abs(giou_loss(a, b).giou - raster_giou(a, b)) <= 1e-3);
  }
}

TEST_CASE("giou properties") {
  Rng rng(19);
  for (int i = 0; i < 2000; ++i) {
    const Box a = random_box(rng), b = random_box(rng);
    const double v_iou = iou(a, b);
    const double v_giou = giou_loss(a, b).giou;
    CHECK(v_giou <= v_iou + 1e-12);
    CHECK(v_giou > -1.0);
    CHECK(v_giou <= 1.0);
    // giou == iou exactly when the hull equals the union
    const Corners ca = to_corners(a), cb = to_corners(b);
    const Corners hull = {std::min(ca[0], cb[0]), std::min(ca[1], cb[1]), std::max(ca[2], cb[2]),
                          std::max(ca[3], cb[3])};
    const double inter = std::max(0.0, std::min(ca[2], cb[2]) - std::max(ca[0], cb[0])) *
                         std::max(0.0, std::min(ca[3], cb[3]) - std::max(ca[1], cb[1]));
    const double uni = a.w * a.h + b.w * b.h - inter;
    const double hull_area = (hull[2] - hull[0]) * (hull[3] - hull[1]);
    if (std::abs(v_giou - v_iou) < 1e-12) CHECK(hull_area == doctest::Approx(uni));
    // symmetry and joint translation/scale invariance of iou
    CHECK(iou(a, b) == doctest::Approx(iou(b, a)));
    Box at = a, bt = b;
    at.cx += 0.1;
    bt.cx += 0.1;
    CHECK(iou(at, bt) == doctest::Approx(v_iou).epsilon(1e-9));
    Box as = a, bs = b;
    as.cx *= 0.5;
    as.cy *= 0.5;
    as.w *= 0.5;
    as.h *= 0.5;
    bs.cx *= 0.5;
    bs.cy *= 0.5;
    bs.w *= 0.5;
    bs.h *= 0.5;
    CHECK(iou(as, bs) == doctest::Approx(v_iou).epsilon(1e-9));
  }
}

TEST_CASE("l1 box loss") {
  CHECK(l1_box_loss({0.5, 0.5, 0.2, 0.2}, {0.5, 0.5, 0.2, 0.2}) == 0.0);
  CHECK(l1_box_loss({0.5, 0.5, 0.2, 0.2}, {0.4, 0.5, 0.2, 0.3}) == doctest::Approx(0.2));
  CHECK(gradcheck_geometry(20240611, /*verbose=*/false));
}

TEST_CASE("mask_to_box") {
  SUBCASE("full mask") {
    std::vector<uint8_t> mask(64, 1);
    const Box b = mask_to_box(mask, 8, 8);
    CHECK(b.cx == doctest::Approx(0.5));
    CHECK(b.cy == doctest::Approx(0.5));
    CHECK(b.w == doctest::Approx(1.0));
    CHECK(b.h == doctest::Approx(1.0));
  }
  SUBCASE("single cell r=2 c=3 in 8x8") {
    std::vector<uint8_t> mask(64, 0);
    mask[2 * 8 + 3] = 1;
    const auto c = to_corners(mask_to_box(mask, 8, 8));
    CHECK(c[0] == doctest::Approx(3.0 / 8));
    CHECK(c[1] == doctest::Approx(2.0 / 8));
    CHECK(c[2] == doctest::Approx(4.0 / 8));
    CHECK(c[3] == doctest::Approx(3.0 / 8));
  }
  SUBCASE("L shape spans its row/col extremes") {
    // exhaustive-scan oracle: min/max over foreground cells
    std::vector<uint8_t> mask(64, 0);
    std::vector<std::pair<int, int>> cells = {{1, 1}, {2, 1}, {3, 1}, {3, 2}, {3, 5}};
    int rmin = 8, rmax = -1, cmin = 8, cmax = -1;
    for (auto [r, c] : cells) {
      mask[size_t(r * 8 + c)] = 1;
      rmin = std::min(rmin, r);
      rmax = std::max(rmax, r);
      cmin = std::min(cmin, c);
      cmax = std::max(cmax, c);
    }
    const auto got = to_corners(mask_to_box(mask, 8, 8));
    CHECK(got[0] == doctest::Approx(cmin / 8.0));
    CHECK(got[1] == doctest::Approx(rmin / 8.0));
    CHECK(got[2] == doctest::Approx((cmax + 1) / 8.0));
    CHECK(got[3] == doctest::Approx((rmax + 1) / 8.0));
  }
  SUBCASE("empty mask signals no instance") {
    std::vector<uint8_t> mask(64, 0);
    CHECK_THROWS_AS(mask_to_box(mask, 8, 8), Error);
  }
  SUBCASE("rasterized box round-trips within one cell per coordinate") {
    Rng rng(29);
    const int res = 64;
    for (int trial = 0; trial < 200; ++trial) {
      Box b = random_box(rng);
      std::vector<uint8_t> mask(size_t(res * res), 0);
      const Corners c = to_corners(b);
      for (int r = 0; r < res; ++r)
        for (int col = 0; col < res; ++col) {
          const double x = (col + 0.5) / res, y = (r + 0.5) / res;
          if (x >= c[0] && x <= c[2] && y >= c[1] && y <= c[3]) mask[size_t(r * res + col)] = 1;
        }
      const Box got = mask_to_box(mask, res, res);
      CHECK(std::abs(got.cx - b.cx) <= 1.0 / res);
      CHECK(std::abs(got.cy - b.cy) <= 1.0 / res);
      CHECK(std::abs(got.w - b.w) <= 2.0 / res);
      CHECK(std::abs(got.h - b.h) <= 2.0 / res);
    }
  }
}
