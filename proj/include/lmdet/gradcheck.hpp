#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lmdet/graph.hpp"

namespace lmdet {

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0;
  bool ok = false;
};

// Builds the loss twice: once for backward(), then per-coordinate for central
// finite differences (64-bit, default h = 1e-5). Every input is treated as a
// differentiable leaf.
using LossBuilder =
    std::function<Graph<double>::Id(Graph<double>&, const std::vector<Graph<double>::Id>&)>;

GradCheckResult check_gradient(const std::string& name, const LossBuilder& build,
                               const std::vector<Tensor<double>>& inputs, double h = 1e-5,
                               double tol = 1e-4);

// Named batteries behind `gradcheck --module ...`. Prints one line per check,
// returns false if any check fails.
bool gradcheck_diffcore(uint64_t seed, bool verbose = true);
bool gradcheck_geometry(uint64_t seed, bool verbose = true);
bool gradcheck_detector(uint64_t seed, bool verbose = true);
bool gradcheck_loss(uint64_t seed, bool verbose = true);
bool gradcheck_all(uint64_t seed, bool verbose = true);

}  // namespace lmdet
