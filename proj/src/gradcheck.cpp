#include "lmdet/gradcheck.hpp"

#include <cmath>
#include <cstdio>

#include "lmdet/geometry.hpp"
#include "lmdet/rng.hpp"

namespace lmdet {

GradCheckResult check_gradient(const std::string& name, const LossBuilder& build,
                               const std::vector<Tensor<double>>& inputs, double h, double tol) {
  Graph<double> g;
  std::vector<Graph<double>::Id> ids;
  ids.reserve(inputs.size());
  for (const auto& t : inputs) ids.push_back(g.param(t));
  const auto loss = build(g, ids);
  g.backward(loss);

  GradCheckResult res{name, 0.0, true};
  for (size_t i = 0; i < inputs.size(); ++i) {
    const auto analytic = g.grad_tensor(ids[i]);
    auto f = [&](const Tensor<double>& probe) {
      Graph<double> gg;
      std::vector<Graph<double>::Id> pids;
      for (size_t j = 0; j < inputs.size(); ++j)
        pids.push_back(gg.param(j == i ? probe : inputs[j]));
      return gg.scalar_value(build(gg, pids));
    };
    Tensor<double> flat = inputs[i];
    const auto numeric = finite_diff_grad<double>(f, flat, h);
    for (size_t k = 0; k < numeric.data.size(); ++k) {
      const double a = analytic.data[k];
      const double n = numeric.data[k];
      const double rel = std::abs(a - n) / std::max({std::abs(a), std::abs(n), 0.01});
      res.max_rel_err = std::max(res.max_rel_err, rel);
    }
  }
  res.ok = res.max_rel_err <= tol;
  return res;
}

namespace {

bool report(const GradCheckResult& r, bool verbose) {
  if (verbose)
    std::printf("  [%s] %-42s max rel err %.3e\n", r.ok ? "ok" : "FAIL", r.name.c_str(),
                r.max_rel_err);
  return r.ok;
}

// Random tensor kept away from non-smooth points by the caller's construction.
Tensor<double> rand_tensor(Rng& rng, i64 r, i64 c, double lo = -1.5, double hi = 1.5) {
  Tensor<double> t({r, c});
  t.fill_uniform(rng, lo, hi);
  return t;
}

// Weighted sum against fixed coefficients so every output coordinate of the
// primitive under test contributes to the scalar loss.
Graph<double>::Id weigh(Graph<double>& g, Graph<double>::Id x, const Tensor<double>& coeff) {
  return g.sum_all(g.mul(x, g.input(coeff)));
}

}  // namespace

bool gradcheck_diffcore(uint64_t seed, bool verbose) {
  Rng rng(seed);
  bool ok = true;
  const i64 m = 4, n = 5;
  const auto wA = rand_tensor(rng, m, n);
  const auto wB = rand_tensor(rng, n, m);
  const auto wSq = rand_tensor(rng, m, m);

  auto bin = [&](const char* name, auto fn) {
    auto a = rand_tensor(rng, m, n);
    auto b = rand_tensor(rng, m, n);
    // keep elementwise min/max and div away from ties and zero denominators
    for (size_t k = 0; k < b.data.size(); ++k) {
      if (std::abs(a.data[k] - b.data[k]) < 1e-2) b.data[k] += 5e-2;
      if (std::abs(b.data[k]) < 0.1) b.data[k] += b.data[k] < 0 ? -0.2 : 0.2;
    }
    ok &= report(check_gradient(
                     name,
                     [&](Graph<double>& g, const std::vector<Graph<double>::Id>& in) {
                       return weigh(g, fn(g, in[0], in[1]), wA);
                     },
                     {a, b}),
                 verbose);
  };
  bin("add", [](Graph<double>& g, auto a, auto b) { return g.add(a, b); });
  bin("sub", [](Graph<double>& g, auto a, auto b) { return g.sub(a, b); });
  bin("mul", [](Graph<double>& g, auto a, auto b) { return g.mul(a, b); });
  bin("div", [](Graph<double>& g, auto a, auto b) { return g.div(a, b); });
  bin("minimum", [](Graph<double>& g, auto a, auto b) { return g.minimum(a, b); });
  bin("maximum", [](Graph<double>& g, auto a, auto b) { return g.maximum(a, b); });

  auto un = [&](const char* name, auto fn, double lo, double hi) {
    auto a = rand_tensor(rng, m, n, lo, hi);
    ok &= report(check_gradient(
                     name,
                     [&](Graph<double>& g, const std::vector<Graph<double>::Id>& in) {
                       return weigh(g, fn(g, in[0]), wA);
                     },
                     {a}),
                 verbose);
  };
  un("scale", [](Graph<double>& g, auto a) { return g.scale(a, -2.5); }, -1.5, 1.5);
  un("add_const", [](Graph<double>& g, auto a) { return g.add_const(a, 0.75); }, -1.5, 1.5);
  un("gelu", [](Graph<double>& g, auto a) { return g.gelu(a); }, -2.0, 2.0);
  un("sigmoid", [](Graph<double>& g, auto a) { return g.sigmoid(a); }, -3.0, 3.0);
  un("log", [](Graph<double>& g, auto a) { return g.log(a); }, 0.2, 3.0);
  un("exp", [](Graph<double>& g, auto a) { return g.exp(a); }, -2.0, 1.5);
  un("softmax_rows", [](Graph<double>& g, auto a) { return g.softmax_rows(a); }, -2.0, 2.0);
  auto un_scalar = [&](const char* name, auto fn, double lo, double hi) {
    auto a = rand_tensor(rng, m, n, lo, hi);
    ok &= report(check_gradient(
                     name,
                     [&](Graph<double>& g, const std::vector<Graph<double>::Id>& in) {
                       return fn(g, in[0]);
                     },
                     {a}),
                 verbose);
  };
  un_scalar("transpose", [&](Graph<double>& g, auto a) { return weigh(g, g.transpose(a), wB); },
            -1.5, 1.5);
  un_scalar("row_max_margin", [](Graph<double>& g, auto a) { return g.sum_all(g.row_max(a)); },
            -1.5, 1.5);
  un_scalar("sum_all", [](Graph<double>& g, auto a) { return g.sum_all(a); }, -1.5, 1.5);
  un_scalar("mean_all", [](Graph<double>& g, auto a) { return g.mean_all(a); }, -1.5, 1.5);

  {
    // relu / abs sampled >= 1e-3 from the kink; subgradient 0 at the kink itself
    auto a = rand_tensor(rng, m, n);
    for (auto& v : a.data)
      if (std::abs(v) < 1e-2) v = v < 0 ? v - 0.1 : v + 0.1;
    ok &= report(check_gradient(
                     "relu",
                     [&](Graph<double>& g, const std::vector<Graph<double>::Id>& in) {
                       return weigh(g, g.relu(in[0]), wA);
                     },
                     {a}),
                 verbose);
    ok &= report(check_gradient(
                     "abs",
                     [&](Graph<double>& g, const std::vector<Graph<double>::Id>& in) {
                       return weigh(g, g.abs(in[0]), wA);
                     },
                     {a}),
                 verbose);
  }
  {
    auto a = rand_tensor(rng, m, n);
    auto b = rand_tensor(rng, n, m);
    ok &= report(check_gradient(
                     "matmul",
                     [&](Graph<double>& g, const std::vector<Graph<double>::Id>& in) {
                       return weigh(g, g.matmul(in[0], in[1]), wSq);
                     },
                     {a, b}),
                 verbose);
    ok &= report(check_gradient(
                     "matmul_nt",
                     [&](Graph<double>& g, const std::vector<Graph<double>::Id>& in) {
                       return weigh(g, g.matmul(in[0], g.transpose(in[1]), false, true), wSq);
                     },
                     {a, b}),
                 verbose);
    ok &= report(check_gradient(
                     "matmul_tn",
                     [&](Graph<double>& g, const std::vector<Graph<double>::Id>& in) {
                       return g.sum_all(g.matmul(in[0], in[1], true, false));
                     },
                     {rand_tensor(rng, n, m), rand_tensor(rng, n, m)}),
                 verbose);
  }
  {
    auto v = rand_tensor(rng, 1, n);
    auto a = rand_tensor(rng, m, n);
    ok &= report(check_gradient(
                     "add_rowvec",
                     [&](Graph<double>& g, const std::vector<Graph<double>::Id>& in) {
                       return weigh(g, g.add_rowvec(in[0], in[1]), wA);
                     },
                     {a, v}),
                 verbose);
  }
  {
    auto a = rand_tensor(rng, m, n);
    ok &= report(check_gradient(
                     "slice_concat",
                     [&](Graph<double>& g, const std::vector<Graph<double>::Id>& in) {
                       auto left = g.slice(in[0], 0, m, 0, 2);
                       auto right = g.slice(in[0], 0, m, 2, n);
                       auto back = g.concat(left, right, 1);
                       auto top = g.slice(back, 0, 2, 0, n);
                       auto bottom = g.slice(back, 2, m, 0, n);
                       return weigh(g, g.concat(top, bottom, 0), wA);
                     },
                     {a}),
                 verbose);
    const auto wG = rand_tensor(rng, 3, n);
    ok &= report(check_gradient(
                     "gather_rows",
                     [&](Graph<double>& g, const std::vector<Graph<double>::Id>& in) {
                       return g.sum_all(g.mul(g.gather_rows(in[0], {2, 0, 2}), g.input(wG)));
                     },
                     {a}),
                 verbose);
    std::vector<uint8_t> mask(size_t(m * n), 0);
    for (size_t k = 0; k < mask.size(); k += 3) mask[k] = 1;
    ok &= report(check_gradient(
                     "masked_fill",
                     [&](Graph<double>& g, const std::vector<Graph<double>::Id>& in) {
                       return weigh(g, g.masked_fill(in[0], mask, -7.0), wA);
                     },
                     {a}),
                 verbose);
  }
  {
    auto x = rand_tensor(rng, m, n);
    auto gamma = rand_tensor(rng, 1, n, 0.5, 1.5);
    auto beta = rand_tensor(rng, 1, n, -0.5, 0.5);
    ok &= report(check_gradient(
                     "layer_norm",
                     [&](Graph<double>& g, const std::vector<Graph<double>::Id>& in) {
                       return weigh(g, g.layer_norm(in[0], in[1], in[2]), wA);
                     },
                     {x, gamma, beta}),
                 verbose);
  }
  {
    auto logits = rand_tensor(rng, m, n);
    std::vector<i64> targets = {1, 4, 0, 2};
    std::vector<double> weights = {0.25, 0.25, 0.0, 0.5};
    ok &= report(check_gradient(
                     "cross_entropy",
                     [&](Graph<double>& g, const std::vector<Graph<double>::Id>& in) {
                       return g.cross_entropy(in[0], targets, weights);
                     },
                     {logits}),
                 verbose);
    auto l2 = rand_tensor(rng, m, 1);
    std::vector<double> bt = {1.0, 0.0, 1.0, 0.0};
    std::vector<double> bw = {0.25, 0.25, 0.25, 0.25};
    ok &= report(check_gradient(
                     "bce_logits",
                     [&](Graph<double>& g, const std::vector<Graph<double>::Id>& in) {
                       return g.bce_logits(in[0], bt, bw);
                     },
                     {l2}),
                 verbose);
  }
  {
    // composite: cross_entropy(W v, target), the classic 3x3 case
    auto W = rand_tensor(rng, 3, 3);
    auto v = rand_tensor(rng, 3, 1);
    ok &= report(check_gradient(
                     "ce_linear_composite",
                     [&](Graph<double>& g, const std::vector<Graph<double>::Id>& in) {
                       auto logits = g.transpose(g.matmul(in[0], g.input(v)));
                       return g.cross_entropy(logits, {1}, {1.0});
                     },
                     {W}, 1e-5, 1e-5),
                 verbose);
  }
  return ok;
}

bool gradcheck_geometry(uint64_t seed, bool verbose) {
  Rng rng(seed);
  bool ok = true;
  auto rand_boxes = [&](i64 m) {
    Tensor<double> t({m, 4});
    for (i64 r = 0; r < m; ++r) {
      t.at(r, 2) = rng.uniform(0.15, 0.5);
      t.at(r, 3) = rng.uniform(0.15, 0.5);
      t.at(r, 0) = rng.uniform(t.at(r, 2) / 2, 1 - t.at(r, 2) / 2);
      t.at(r, 1) = rng.uniform(t.at(r, 3) / 2, 1 - t.at(r, 3) / 2);
    }
    return t;
  };
  for (int trial = 0; trial < 4; ++trial) {
    auto pred = rand_boxes(3);
    auto gt = rand_boxes(3);
    ok &= report(check_gradient(
                     "giou_column/" + std::to_string(trial),
                     [&](Graph<double>& g, const std::vector<Graph<double>::Id>& in) {
                       return g.sum_all(giou_column(g, in[0], g.input(gt)));
                     },
                     {pred}),
                 verbose);
    // keep L1 away from exact coordinate ties
    for (i64 r = 0; r < 3; ++r)
      for (i64 c = 0; c < 4; ++c)
        if (std::abs(pred.at(r, c) - gt.at(r, c)) < 1e-2) gt.at(r, c) += 0.03;
    ok &= report(check_gradient(
                     "l1_column/" + std::to_string(trial),
                     [&](Graph<double>& g, const std::vector<Graph<double>::Id>& in) {
                       return g.sum_all(l1_column(g, in[0], g.input(gt)));
                     },
                     {pred}, 1e-5, 1e-5),
                 verbose);
  }
  return ok;
}

}  // namespace lmdet
