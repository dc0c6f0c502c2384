#include "lmdet/geometry.hpp"

#include <algorithm>
#include <cmath>

#include "lmdet/error.hpp"

namespace lmdet {

Corners to_corners(const Box& b) {
  require(b.w > 0 && b.h > 0, "box: non-positive width or height");
  return {b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2};
}

Box to_center(const Corners& c) {
  require(c[2] > c[0] && c[3] > c[1], "box: corners must satisfy x2 > x1, y2 > y1");
  return {(c[0] + c[2]) / 2, (c[1] + c[3]) / 2, c[2] - c[0], c[3] - c[1]};
}

namespace {

double inter_area(const Corners& a, const Corners& b) {
  // max(0, overlap) per axis; no epsilon branching.
  const double iw = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
  const double ih = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
  return iw * ih;
}

double area(const Corners& c) { return (c[2] - c[0]) * (c[3] - c[1]); }

}  // namespace

double iou(const Box& a, const Box& b) {
  const Corners ca = to_corners(a), cb = to_corners(b);
  const double inter = inter_area(ca, cb);
  const double uni = area(ca) + area(cb) - inter;
  return inter / uni;
}

GiouResult giou_loss(const Box& pred, const Box& gt) {
  const Corners ca = to_corners(pred), cb = to_corners(gt);
  const double inter = inter_area(ca, cb);
  const double uni = area(ca) + area(cb) - inter;
  const Corners enc = {std::min(ca[0], cb[0]), std::min(ca[1], cb[1]), std::max(ca[2], cb[2]),
                       std::max(ca[3], cb[3])};
  const double enc_area = area(enc);
  require(enc_area > 0, "giou: degenerate enclosing box");
  const double g = inter / uni - (enc_area - uni) / enc_area;
  return {g, 1.0 - g};
}

double l1_box_loss(const Box& pred, const Box& gt) {
  return std::abs(pred.cx - gt.cx) + std::abs(pred.cy - gt.cy) + std::abs(pred.w - gt.w) +
         std::abs(pred.h - gt.h);
}

Box mask_to_box(const std::vector<uint8_t>& mask, i64 rows, i64 cols) {
  require(i64(mask.size()) == rows * cols, "mask_to_box: mask length != rows*cols");
  i64 rmin = rows, rmax = -1, cmin = cols, cmax = -1;
  for (i64 r = 0; r < rows; ++r)
    for (i64 c = 0; c < cols; ++c)
      if (mask[size_t(r * cols + c)]) {
        rmin = std::min(rmin, r);
        rmax = std::max(rmax, r);
        cmin = std::min(cmin, c);
        cmax = std::max(cmax, c);
      }
  require(rmax >= 0, "mask_to_box: empty mask, no instance");
  const Corners corners = {double(cmin) / double(cols), double(rmin) / double(rows),
                           double(cmax + 1) / double(cols), double(rmax + 1) / double(rows)};
  return to_center(corners);
}

Box clamp_box(const Box& b) {
  Corners c = to_corners(b);
  c[0] = std::clamp(c[0], 0.0, 1.0);
  c[1] = std::clamp(c[1], 0.0, 1.0);
  c[2] = std::clamp(c[2], 0.0, 1.0);
  c[3] = std::clamp(c[3], 0.0, 1.0);
  if (c[2] <= c[0]) c[2] = std::min(c[0] + 1e-6, 1.0);
  if (c[3] <= c[1]) c[3] = std::min(c[1] + 1e-6, 1.0);
  return to_center(c);
}

namespace {

template <class Real>
struct BoxCols {
  using Id = typename Graph<Real>::Id;
  Id x1, y1, x2, y2;
};

template <class Real>
BoxCols<Real> corner_cols(Graph<Real>& g, typename Graph<Real>::Id boxes) {
  using Id = typename Graph<Real>::Id;
  const i64 m = g.rows(boxes);
  const Id cx = g.slice(boxes, 0, m, 0, 1);
  const Id cy = g.slice(boxes, 0, m, 1, 2);
  const Id hw = g.scale(g.slice(boxes, 0, m, 2, 3), Real(0.5));
  const Id hh = g.scale(g.slice(boxes, 0, m, 3, 4), Real(0.5));
  return {g.sub(cx, hw), g.sub(cy, hh), g.add(cx, hw), g.add(cy, hh)};
}

}  // namespace

template <class Real>
typename Graph<Real>::Id giou_column(Graph<Real>& g, typename Graph<Real>::Id pred,
                                     typename Graph<Real>::Id gt) {
  using Id = typename Graph<Real>::Id;
  require(g.cols(pred) == 4 && g.cols(gt) == 4 && g.rows(pred) == g.rows(gt),
          "giou_column: operands must both be (m x 4)");
  const auto a = corner_cols(g, pred);
  const auto b = corner_cols(g, gt);
  const Id zero = g.input(Tensor<Real>({g.rows(pred), 1}, Real(0)));
  const Id iw = g.maximum(zero, g.sub(g.minimum(a.x2, b.x2), g.maximum(a.x1, b.x1)));
  const Id ih = g.maximum(zero, g.sub(g.minimum(a.y2, b.y2), g.maximum(a.y1, b.y1)));
  const Id inter = g.mul(iw, ih);
  const Id area_a = g.mul(g.sub(a.x2, a.x1), g.sub(a.y2, a.y1));
  const Id area_b = g.mul(g.sub(b.x2, b.x1), g.sub(b.y2, b.y1));
  const Id uni = g.sub(g.add(area_a, area_b), inter);
  const Id iou_col = g.div(inter, uni);
  const Id ew = g.sub(g.maximum(a.x2, b.x2), g.minimum(a.x1, b.x1));
  const Id eh = g.sub(g.maximum(a.y2, b.y2), g.minimum(a.y1, b.y1));
  const Id enc = g.mul(ew, eh);
  return g.sub(iou_col, g.div(g.sub(enc, uni), enc));
}

template <class Real>
typename Graph<Real>::Id l1_column(Graph<Real>& g, typename Graph<Real>::Id pred,
                                   typename Graph<Real>::Id gt) {
  using Id = typename Graph<Real>::Id;
  require(g.cols(pred) == 4 && g.cols(gt) == 4 && g.rows(pred) == g.rows(gt),
          "l1_column: operands must both be (m x 4)");
  const i64 m = g.rows(pred);
  const Id d = g.abs(g.sub(pred, gt));
  Id acc = g.slice(d, 0, m, 0, 1);
  for (i64 c = 1; c < 4; ++c) acc = g.add(acc, g.slice(d, 0, m, c, c + 1));
  return acc;
}

template Graph<float>::Id giou_column<float>(Graph<float>&, Graph<float>::Id, Graph<float>::Id);
template Graph<double>::Id giou_column<double>(Graph<double>&, Graph<double>::Id, Graph<double>::Id);
template Graph<float>::Id l1_column<float>(Graph<float>&, Graph<float>::Id, Graph<float>::Id);
template Graph<double>::Id l1_column<double>(Graph<double>&, Graph<double>::Id, Graph<double>::Id);

}  // namespace lmdet
