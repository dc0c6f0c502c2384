#pragma once

#include <array>
#include <vector>

#include "lmdet/graph.hpp"
#include "lmdet/tensor.hpp"

namespace lmdet {

// One rectangle in normalized center format. Width/height stay positive;
// clamping to [0,1] happens only when rendering or reporting, never inside a
// loss.
struct Box {
  double cx = 0, cy = 0, w = 0, h = 0;
};

// Corner format (x1, y1, x2, y2).
using Corners = std::array<double, 4>;

Corners to_corners(const Box& b);
Box to_center(const Corners& c);

double iou(const Box& a, const Box& b);

// giou = IoU - |C \ (A u B)| / |C| with C the smallest enclosing box.
// Returns {giou, 1 - giou}.
struct GiouResult {
  double giou;
  double loss;
};
GiouResult giou_loss(const Box& pred, const Box& gt);

// Sum of absolute coordinate differences over (cx, cy, w, h).
double l1_box_loss(const Box& pred, const Box& gt);

// Tightest axis-aligned box covering all foreground cells, normalized by the
// grid extents. Throws if the mask has no foreground.
Box mask_to_box(const std::vector<uint8_t>& mask, i64 rows, i64 cols);

Box clamp_box(const Box& b);

// --- differentiable versions -------------------------------------------------
//
// pred and gt are (m x 4) nodes in normalized center format; both return an
// (m x 1) column. Conversion to corners happens inside.

template <class Real>
typename Graph<Real>::Id giou_column(Graph<Real>& g, typename Graph<Real>::Id pred,
                                     typename Graph<Real>::Id gt);

template <class Real>
typename Graph<Real>::Id l1_column(Graph<Real>& g, typename Graph<Real>::Id pred,
                                   typename Graph<Real>::Id gt);

}  // namespace lmdet
