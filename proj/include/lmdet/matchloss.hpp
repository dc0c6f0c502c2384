#pragma once

#include <vector>

#include "lmdet/detector.hpp"
#include "lmdet/geometry.hpp"
#include "lmdet/nn.hpp"

namespace lmdet {

struct LossWeights {
  double tok = 1.0;
  double det = 1.0;
  double l1 = 5.0;
  double giou = 2.0;
  double contrast = 1.0;
  void validate() const;
};

struct Matching {
  std::vector<std::pair<int, int>> pairs;  // (gt, query), ordered by gt index
  double total_cost = 0;
};

// Minimum-cost injective assignment of the m rows (ground truths) to the k
// columns (queries), m <= k, finite costs. Among optimal assignments the
// lexicographically smallest (gt, query) pairing wins.
Matching hungarian_match(const std::vector<std::vector<double>>& cost);

// Objectness classification loss over all query logits: BCE (optionally
// focal-weighted), matched queries -> 1, mean over queries.
template <class Real>
typename Graph<Real>::Id detection_loss(Bind<Real>& bind, typename Graph<Real>::Id boxes,
                                        typename Graph<Real>::Id logits,
                                        const std::vector<Box>& gts, const LossWeights& w,
                                        bool focal = false, Matching* out_match = nullptr);

// L = tok_weight * L_tok + det_weight * L_det; the detection term is dropped
// entirely for samples without boxes.
template <class Real>
typename Graph<Real>::Id total_loss(Bind<Real>& bind, typename Graph<Real>::Id l_tok,
                                    typename Graph<Real>::Id l_det, bool has_det,
                                    const LossWeights& w);

}  // namespace lmdet
