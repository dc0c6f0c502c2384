#include "lmdet/matchloss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "lmdet/error.hpp"

namespace lmdet {

void LossWeights::validate() const {
  require(tok >= 0 && det >= 0 && l1 >= 0 && giou >= 0 && contrast >= 0,
          "loss weights must be non-negative");
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Shortest-augmenting-path assignment with potentials; rows m <= cols k.
// Returns the column assigned to each row.
std::vector<int> solve_assignment(const std::vector<std::vector<double>>& a, double* cost_out) {
  const int m = int(a.size());
  const int k = int(a[0].size());
  std::vector<double> u(size_t(m) + 1), v(size_t(k) + 1);
  std::vector<int> p(size_t(k) + 1), way(size_t(k) + 1);
  for (int i = 1; i <= m; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(size_t(k) + 1, kInf);
    std::vector<char> used(size_t(k) + 1, 0);
    do {
      used[size_t(j0)] = 1;
      const int i0 = p[size_t(j0)];
      double delta = kInf;
      int j1 = -1;
      for (int j = 1; j <= k; ++j) {
        if (used[size_t(j)]) continue;
        const double cur = a[size_t(i0) - 1][size_t(j) - 1] - u[size_t(i0)] - v[size_t(j)];
        if (cur < minv[size_t(j)]) {
          minv[size_t(j)] = cur;
          way[size_t(j)] = j0;
        }
        if (minv[size_t(j)] < delta) {
          delta = minv[size_t(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= k; ++j) {
        if (used[size_t(j)]) {
          u[size_t(p[size_t(j)])] += delta;
          v[size_t(j)] -= delta;
        } else {
          minv[size_t(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[size_t(j0)] != 0);
    do {
      const int j1 = way[size_t(j0)];
      p[size_t(j0)] = p[size_t(j1)];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(size_t(m), -1);
  double cost = 0;
  for (int j = 1; j <= k; ++j)
    if (p[size_t(j)] != 0) {
      row_to_col[size_t(p[size_t(j)]) - 1] = j - 1;
      cost += a[size_t(p[size_t(j)]) - 1][size_t(j) - 1];
    }
  if (cost_out) *cost_out = cost;
  return row_to_col;
}

// Minimum assignment cost of the submatrix with the given rows/cols removed.
double reduced_cost(const std::vector<std::vector<double>>& a, const std::vector<char>& row_done,
                    const std::vector<char>& col_done) {
  std::vector<std::vector<double>> sub;
  std::vector<int> cols;
  for (size_t j = 0; j < col_done.size(); ++j)
    if (!col_done[j]) cols.push_back(int(j));
  for (size_t i = 0; i < row_done.size(); ++i) {
    if (row_done[i]) continue;
    std::vector<double> row;
    for (int j : cols) row.push_back(a[i][size_t(j)]);
    sub.push_back(std::move(row));
  }
  if (sub.empty()) return 0;
  double cost = 0;
  solve_assignment(sub, &cost);
  return cost;
}

}  // namespace

Matching hungarian_match(const std::vector<std::vector<double>>& cost) {
  require(!cost.empty() && !cost[0].empty(), "hungarian: empty cost matrix");
  const int m = int(cost.size());
  const int k = int(cost[0].size());
  require(m <= k, "hungarian: more ground truths than queries (m > k)");
  for (const auto& row : cost) {
    require(int(row.size()) == k, "hungarian: ragged cost matrix");
    for (double c : row) require(std::isfinite(c), "hungarian: non-finite cost");
  }

  Matching match;
  solve_assignment(cost, &match.total_cost);

  // Rebuild the assignment greedily so that among all optimal assignments the
  // lexicographically smallest (gt, query) list wins.
  std::vector<char> row_done(size_t(m), 0), col_done(size_t(k), 0);
  double remaining = match.total_cost;
  const double tol = 1e-9 * std::max(1.0, std::abs(match.total_cost));
  for (int i = 0; i < m; ++i) {
    bool fixed = false;
    for (int j = 0; j < k && !fixed; ++j) {
      if (col_done[size_t(j)]) continue;
      row_done[size_t(i)] = 1;
      col_done[size_t(j)] = 1;
      const double rest = reduced_cost(cost, row_done, col_done);
      if (cost[size_t(i)][size_t(j)] + rest <= remaining + tol) {
        match.pairs.emplace_back(i, j);
        remaining -= cost[size_t(i)][size_t(j)];
        fixed = true;
      } else {
        row_done[size_t(i)] = 0;
        col_done[size_t(j)] = 0;
      }
    }
    require(fixed, "hungarian: tie-break refinement failed to fix a pair");
  }
  return match;
}

template <class Real>
typename Graph<Real>::Id detection_loss(Bind<Real>& bind, typename Graph<Real>::Id boxes,
                                        typename Graph<Real>::Id logits,
                                        const std::vector<Box>& gts, const LossWeights& w,
                                        bool focal, Matching* out_match) {
  auto& g = bind.g;
  require(!gts.empty(), "detection_loss: detection-bearing sample with no ground-truth boxes");
  const i64 k = g.rows(boxes);
  require(g.cols(boxes) == 4, "detection_loss: boxes must be (k x 4)");
  require(g.rows(logits) == k && g.cols(logits) == 1, "detection_loss: logits must be (k x 1)");
  const i64 m = i64(gts.size());
  require(m <= k, "detection_loss: more ground truths than queries");

  // assignment cost from current values, mirroring the loss weights
  const auto box_vals = g.value(boxes);
  const auto logit_vals = g.value(logits);
  std::vector<std::vector<double>> cost(static_cast<size_t>(m),
                                        std::vector<double>(static_cast<size_t>(k), 0.0));
  for (i64 i = 0; i < m; ++i)
    for (i64 j = 0; j < k; ++j) {
      const Box pb{double(box_vals[size_t(4 * j)]), double(box_vals[size_t(4 * j + 1)]),
                   double(box_vals[size_t(4 * j + 2)]), double(box_vals[size_t(4 * j + 3)])};
      cost[size_t(i)][size_t(j)] = w.l1 * l1_box_loss(pb, gts[size_t(i)]) +
                                   w.giou * giou_loss(pb, gts[size_t(i)]).loss -
                                   w.contrast * double(logit_vals[size_t(j)]);
    }
  const Matching match = hungarian_match(cost);
  if (out_match) *out_match = match;

  std::vector<i64> matched_queries;
  Tensor<Real> gt_tensor({m, 4});
  for (i64 i = 0; i < m; ++i) {
    matched_queries.push_back(match.pairs[size_t(i)].second);
    gt_tensor.at(i, 0) = Real(gts[size_t(i)].cx);
    gt_tensor.at(i, 1) = Real(gts[size_t(i)].cy);
    gt_tensor.at(i, 2) = Real(gts[size_t(i)].w);
    gt_tensor.at(i, 3) = Real(gts[size_t(i)].h);
  }
  const auto matched = g.gather_rows(boxes, matched_queries);
  const auto gt_id = g.input(gt_tensor);

  // box terms normalized by the ground-truth count
  const auto l1_term = g.scale(g.sum_all(l1_column(g, matched, gt_id)), Real(w.l1 / double(m)));
  const auto giou_term = g.scale(
      g.sum_all(g.add_const(g.scale(giou_column(g, matched, gt_id), Real(-1)), Real(1))),
      Real(w.giou / double(m)));

  // classification over every query, matched -> 1
  std::vector<Real> targets(size_t(k), Real(0));
  for (i64 q : matched_queries) targets[size_t(q)] = Real(1);
  typename Graph<Real>::Id contrast_term;
  if (!focal) {
    std::vector<Real> weights(size_t(k), Real(1.0 / double(k)));
    contrast_term = g.scale(g.bce_logits(logits, targets, weights), Real(w.contrast));
  } else {
    // focal weighting (alpha 0.25, gamma 2) composed from primitives
    const Real alpha = Real(0.25), gamma = Real(2);
    const auto t = g.input(Tensor<Real>::from({k, 1}, std::vector<Real>(targets)));
    const auto p = g.sigmoid(logits);
    const auto one = g.input(Tensor<Real>({k, 1}, Real(1)));
    const auto pt = g.add(g.mul(t, p), g.mul(g.sub(one, t), g.sub(one, p)));
    const auto focal_w = g.mul(g.sub(one, pt), g.sub(one, pt));  // gamma = 2
    (void)gamma;
    const auto alpha_w =
        g.add(g.scale(t, alpha), g.scale(g.sub(one, t), Real(1) - alpha));
    const auto ce = g.scale(g.log(g.maximum(pt, g.input(Tensor<Real>({k, 1}, Real(1e-12))))), Real(-1));
    contrast_term =
        g.scale(g.mean_all(g.mul(g.mul(alpha_w, focal_w), ce)), Real(w.contrast));
  }
  return g.add(g.add(l1_term, giou_term), contrast_term);
}

template <class Real>
typename Graph<Real>::Id total_loss(Bind<Real>& bind, typename Graph<Real>::Id l_tok,
                                    typename Graph<Real>::Id l_det, bool has_det,
                                    const LossWeights& w) {
  auto& g = bind.g;
  const auto tok_term = g.scale(l_tok, Real(w.tok));
  if (!has_det) return tok_term;
  require(l_det >= 0, "total_loss: detection term missing for a detection-bearing sample");
  return g.add(tok_term, g.scale(l_det, Real(w.det)));
}

template Graph<float>::Id detection_loss<float>(Bind<float>&, Graph<float>::Id, Graph<float>::Id,
                                                const std::vector<Box>&, const LossWeights&, bool,
                                                Matching*);
template Graph<double>::Id detection_loss<double>(Bind<double>&, Graph<double>::Id,
                                                  Graph<double>::Id, const std::vector<Box>&,
                                                  const LossWeights&, bool, Matching*);
template Graph<float>::Id total_loss<float>(Bind<float>&, Graph<float>::Id, Graph<float>::Id, bool,
                                            const LossWeights&);
template Graph<double>::Id total_loss<double>(Bind<double>&, Graph<double>::Id, Graph<double>::Id,
                                              bool, const LossWeights&);

}  // namespace lmdet
