#include "lmdet/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace lmdet {

const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Param: return "param";
    case Op::Matmul: return "matmul";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Minimum: return "minimum";
    case Op::Maximum: return "maximum";
    case Op::AddRowVec: return "add_rowvec";
    case Op::Scale: return "scale";
    case Op::AddConst: return "add_const";
    case Op::Relu: return "relu";
    case Op::Gelu: return "gelu";
    case Op::Sigmoid: return "sigmoid";
    case Op::Log: return "log";
    case Op::Exp: return "exp";
    case Op::Abs: return "abs";
    case Op::Transpose: return "transpose";
    case Op::Slice: return "slice";
    case Op::Concat: return "concat";
    case Op::GatherRows: return "gather_rows";
    case Op::MaskedFill: return "masked_fill";
    case Op::SoftmaxRows: return "softmax_rows";
    case Op::LayerNorm: return "layer_norm";
    case Op::RowMax: return "row_max";
    case Op::SumAll: return "sum_all";
    case Op::MeanAll: return "mean_all";
    case Op::CrossEntropy: return "cross_entropy";
    case Op::BceLogits: return "bce_logits";
  }
  return "?";
}

namespace {

// C (+)= opA(A) * opB(B). A transposed right operand is first copied into a
// scratch buffer so every case runs the contiguous FMA kernel; the dot-product
// layout would otherwise block vectorization under strict IEEE ordering.
template <class Real>
void gemm(const Real* A, const Real* B, Real* C, i64 M, i64 K, i64 N, bool ta, bool tb, bool acc) {
  if (!acc) std::fill(C, C + M * N, Real(0));
  thread_local std::vector<Real> scratch;
  if (tb) {
    // B is (N x K); materialize (K x N)
    scratch.resize(size_t(K * N));
    for (i64 j = 0; j < N; ++j)
      for (i64 k = 0; k < K; ++k) scratch[size_t(k * N + j)] = B[j * K + k];
    B = scratch.data();
    tb = false;
  }
  if (!ta) {
    for (i64 i = 0; i < M; ++i) {
      Real* c = C + i * N;
      const Real* a = A + i * K;
      for (i64 k = 0; k < K; ++k) {
        const Real av = a[k];
        const Real* b = B + k * N;
        for (i64 j = 0; j < N; ++j) c[j] += av * b[j];
      }
    }
  } else {
    // A is (K x M) holding opA = A^T
    for (i64 k = 0; k < K; ++k) {
      const Real* a = A + k * M;
      const Real* b = B + k * N;
      for (i64 i = 0; i < M; ++i) {
        const Real av = a[i];
        Real* c = C + i * N;
        for (i64 j = 0; j < N; ++j) c[j] += av * b[j];
      }
    }
  }
}

template <class Real>
Real gelu_fwd(Real x) {
  return Real(0.5) * x * Real(std::erfc(-double(x) * 0.7071067811865475244));
}

template <class Real>
Real gelu_bwd(Real x) {
  const double xd = double(x);
  const double phi = 0.5 * std::erfc(-xd * 0.7071067811865475244);
  const double pdf = std::exp(-0.5 * xd * xd) * 0.3989422804014326779;
  return Real(phi + xd * pdf);
}

template <class Real>
Real sigmoid_fwd(Real x) {
  return x >= Real(0) ? Real(1) / (Real(1) + Real(std::exp(-double(x))))
                      : Real(1) - Real(1) / (Real(1) + Real(std::exp(double(x))));
}

}  // namespace

template <class Real>
const typename Graph<Real>::Node& Graph<Real>::at(Id id) const {
  require(id >= 0 && size_t(id) < nodes_.size(), "graph: bad node id");
  return nodes_[size_t(id)];
}

template <class Real>
typename Graph<Real>::Node& Graph<Real>::at(Id id) {
  require(id >= 0 && size_t(id) < nodes_.size(), "graph: bad node id");
  return nodes_[size_t(id)];
}

template <class Real>
typename Graph<Real>::Id Graph<Real>::push(Node n) {
  const size_t count = size_t(n.rows * n.cols);
  n.val = vals_.size();
  n.grd = grads_.size();
  vals_.resize(vals_.size() + count);
  grads_.resize(grads_.size() + count);
  nodes_.push_back(n);
  const size_t i = nodes_.size() - 1;
  if (n.op != Op::Input && n.op != Op::Param) exec(i);
  return Id(i);
}

template <class Real>
typename Graph<Real>::Id Graph<Real>::input(const Tensor<Real>& t) {
  require(t.shape.size() <= 2, "graph input: rank must be <= 2, got " + shape_str(t.shape));
  Node n;
  n.op = Op::Input;
  n.rows = t.rows();
  n.cols = t.cols();
  Id id = push(n);
  std::copy(t.data.begin(), t.data.end(), val_ptr(nodes_.back()));
  return id;
}

template <class Real>
typename Graph<Real>::Id Graph<Real>::param(const Tensor<Real>& t) {
  require(t.shape.size() <= 2, "graph param: rank must be <= 2, got " + shape_str(t.shape));
  Node n;
  n.op = Op::Param;
  n.rows = t.rows();
  n.cols = t.cols();
  n.needs_grad = true;
  Id id = push(n);
  std::copy(t.data.begin(), t.data.end(), val_ptr(nodes_.back()));
  return id;
}

template <class Real>
typename Graph<Real>::Id Graph<Real>::unary(Op op, Id a) {
  const Node& na = at(a);
  Node n;
  n.op = op;
  n.rows = na.rows;
  n.cols = na.cols;
  n.in0 = a;
  n.needs_grad = na.needs_grad;
  return push(n);
}

template <class Real>
typename Graph<Real>::Id Graph<Real>::binary(Op op, Id a, Id b) {
  const Node& na = at(a);
  const Node& nb = at(b);
  require(na.rows == nb.rows && na.cols == nb.cols,
          std::string(op_name(op)) + ": shape mismatch " + shape_str({na.rows, na.cols}) + " vs " +
              shape_str({nb.rows, nb.cols}));
  Node n;
  n.op = op;
  n.rows = na.rows;
  n.cols = na.cols;
  n.in0 = a;
  n.in1 = b;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  return push(n);
}

template <class Real>
typename Graph<Real>::Id Graph<Real>::matmul(Id a, Id b, bool ta, bool tb) {
  const Node& na = at(a);
  const Node& nb = at(b);
  const i64 m = ta ? na.cols : na.rows;
  const i64 ka = ta ? na.rows : na.cols;
  const i64 kb = tb ? nb.cols : nb.rows;
  const i64 nn = tb ? nb.rows : nb.cols;
  require(ka == kb, "matmul: inner dims differ, " + shape_str({na.rows, na.cols}) + (ta ? "^T" : "") +
                        " * " + shape_str({nb.rows, nb.cols}) + (tb ? "^T" : ""));
  Node n;
  n.op = Op::Matmul;
  n.rows = m;
  n.cols = nn;
  n.in0 = a;
  n.in1 = b;
  n.ta = ta;
  n.tb = tb;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  return push(n);
}

template <class Real>
typename Graph<Real>::Id Graph<Real>::add(Id a, Id b) { return binary(Op::Add, a, b); }
template <class Real>
typename Graph<Real>::Id Graph<Real>::sub(Id a, Id b) { return binary(Op::Sub, a, b); }
template <class Real>
typename Graph<Real>::Id Graph<Real>::mul(Id a, Id b) { return binary(Op::Mul, a, b); }
template <class Real>
typename Graph<Real>::Id Graph<Real>::div(Id a, Id b) { return binary(Op::Div, a, b); }
template <class Real>
typename Graph<Real>::Id Graph<Real>::minimum(Id a, Id b) { return binary(Op::Minimum, a, b); }
template <class Real>
typename Graph<Real>::Id Graph<Real>::maximum(Id a, Id b) { return binary(Op::Maximum, a, b); }

template <class Real>
typename Graph<Real>::Id Graph<Real>::add_rowvec(Id a, Id v) {
  const Node& na = at(a);
  const Node& nv = at(v);
  require(nv.rows == 1 && nv.cols == na.cols, "add_rowvec: vector must be (1 x cols)");
  Node n;
  n.op = Op::AddRowVec;
  n.rows = na.rows;
  n.cols = na.cols;
  n.in0 = a;
  n.in1 = v;
  n.needs_grad = na.needs_grad || nv.needs_grad;
  return push(n);
}

template <class Real>
typename Graph<Real>::Id Graph<Real>::scale(Id a, Real c) {
  Id id = unary(Op::Scale, a);
  at(id).c = c;
  exec(size_t(id));
  return id;
}

template <class Real>
typename Graph<Real>::Id Graph<Real>::add_const(Id a, Real c) {
  Id id = unary(Op::AddConst, a);
  at(id).c = c;
  exec(size_t(id));
  return id;
}

template <class Real>
typename Graph<Real>::Id Graph<Real>::relu(Id a) { return unary(Op::Relu, a); }
template <class Real>
typename Graph<Real>::Id Graph<Real>::gelu(Id a) { return unary(Op::Gelu, a); }
template <class Real>
typename Graph<Real>::Id Graph<Real>::sigmoid(Id a) { return unary(Op::Sigmoid, a); }
template <class Real>
typename Graph<Real>::Id Graph<Real>::log(Id a) { return unary(Op::Log, a); }
template <class Real>
typename Graph<Real>::Id Graph<Real>::exp(Id a) { return unary(Op::Exp, a); }
template <class Real>
typename Graph<Real>::Id Graph<Real>::abs(Id a) { return unary(Op::Abs, a); }

template <class Real>
typename Graph<Real>::Id Graph<Real>::transpose(Id a) {
  const Node& na = at(a);
  Node n;
  n.op = Op::Transpose;
  n.rows = na.cols;
  n.cols = na.rows;
  n.in0 = a;
  n.needs_grad = na.needs_grad;
  return push(n);
}

template <class Real>
typename Graph<Real>::Id Graph<Real>::slice(Id a, i64 r0, i64 r1, i64 c0, i64 c1) {
  const Node& na = at(a);
  require(0 <= r0 && r0 < r1 && r1 <= na.rows && 0 <= c0 && c0 < c1 && c1 <= na.cols,
          "slice: bounds out of range");
  Node n;
  n.op = Op::Slice;
  n.rows = r1 - r0;
  n.cols = c1 - c0;
  n.in0 = a;
  n.r0 = r0;
  n.r1 = r1;
  n.c0 = c0;
  n.c1 = c1;
  n.needs_grad = na.needs_grad;
  return push(n);
}

template <class Real>
typename Graph<Real>::Id Graph<Real>::concat(Id a, Id b, int axis) {
  const Node& na = at(a);
  const Node& nb = at(b);
  require(axis == 0 || axis == 1, "concat: axis must be 0 or 1");
  Node n;
  n.op = Op::Concat;
  n.in0 = a;
  n.in1 = b;
  n.axis = axis;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  if (axis == 0) {
    require(na.cols == nb.cols, "concat axis 0: column counts differ");
    n.rows = na.rows + nb.rows;
    n.cols = na.cols;
  } else {
    require(na.rows == nb.rows, "concat axis 1: row counts differ");
    n.rows = na.rows;
    n.cols = na.cols + nb.cols;
  }
  return push(n);
}

template <class Real>
typename Graph<Real>::Id Graph<Real>::gather_rows(Id a, std::vector<i64> indices) {
  const Node& na = at(a);
  require(!indices.empty(), "gather_rows: empty index list");
  for (i64 ix : indices) require(0 <= ix && ix < na.rows, "gather_rows: index out of range");
  Node n;
  n.op = Op::GatherRows;
  n.rows = i64(indices.size());
  n.cols = na.cols;
  n.in0 = a;
  n.needs_grad = na.needs_grad;
  n.iattr = int32_t(idx_attrs_.size());
  idx_attrs_.push_back(std::move(indices));
  return push(n);
}

template <class Real>
typename Graph<Real>::Id Graph<Real>::masked_fill(Id a, std::vector<uint8_t> mask, Real value) {
  const Node& na = at(a);
  require(i64(mask.size()) == na.rows * na.cols, "masked_fill: mask length != numel");
  Node n;
  n.op = Op::MaskedFill;
  n.rows = na.rows;
  n.cols = na.cols;
  n.in0 = a;
  n.c = value;
  n.needs_grad = na.needs_grad;
  n.iattr = int32_t(mask_attrs_.size());
  mask_attrs_.push_back(std::move(mask));
  return push(n);
}

template <class Real>
typename Graph<Real>::Id Graph<Real>::softmax_rows(Id a) { return unary(Op::SoftmaxRows, a); }

template <class Real>
typename Graph<Real>::Id Graph<Real>::layer_norm(Id x, Id gamma, Id beta) {
  const Node& nx = at(x);
  const Node& ng = at(gamma);
  const Node& nb = at(beta);
  require(ng.rows == 1 && ng.cols == nx.cols && nb.rows == 1 && nb.cols == nx.cols,
          "layer_norm: gamma/beta must be (1 x cols)");
  Node n;
  n.op = Op::LayerNorm;
  n.rows = nx.rows;
  n.cols = nx.cols;
  n.in0 = x;
  n.in1 = gamma;
  n.in2 = beta;
  n.needs_grad = nx.needs_grad || ng.needs_grad || nb.needs_grad;
  return push(n);
}

template <class Real>
typename Graph<Real>::Id Graph<Real>::row_max(Id a) {
  const Node& na = at(a);
  Node n;
  n.op = Op::RowMax;
  n.rows = na.rows;
  n.cols = 1;
  n.in0 = a;
  n.needs_grad = na.needs_grad;
  return push(n);
}

template <class Real>
typename Graph<Real>::Id Graph<Real>::sum_all(Id a) {
  Node n;
  n.op = Op::SumAll;
  n.rows = 1;
  n.cols = 1;
  n.in0 = a;
  n.needs_grad = at(a).needs_grad;
  return push(n);
}

template <class Real>
typename Graph<Real>::Id Graph<Real>::mean_all(Id a) {
  Node n;
  n.op = Op::MeanAll;
  n.rows = 1;
  n.cols = 1;
  n.in0 = a;
  n.needs_grad = at(a).needs_grad;
  return push(n);
}

template <class Real>
typename Graph<Real>::Id Graph<Real>::cross_entropy(Id logits, std::vector<i64> targets,
                                                    std::vector<Real> weights) {
  const Node& nl = at(logits);
  require(i64(targets.size()) == nl.rows, "cross_entropy: one target per row required");
  require(weights.size() == targets.size(), "cross_entropy: weights length != targets length");
  for (size_t p = 0; p < targets.size(); ++p)
    if (weights[p] != Real(0))
      require(0 <= targets[p] && targets[p] < nl.cols, "cross_entropy: target id out of range");
  Node n;
  n.op = Op::CrossEntropy;
  n.rows = 1;
  n.cols = 1;
  n.in0 = logits;
  n.needs_grad = nl.needs_grad;
  n.iattr = int32_t(idx_attrs_.size());
  idx_attrs_.push_back(std::move(targets));
  n.rattr = int32_t(real_attrs_.size());
  real_attrs_.push_back(std::move(weights));
  return push(n);
}

template <class Real>
typename Graph<Real>::Id Graph<Real>::bce_logits(Id logits, std::vector<Real> targets,
                                                 std::vector<Real> weights) {
  const Node& nl = at(logits);
  require(i64(targets.size()) == nl.rows * nl.cols, "bce_logits: targets length != numel");
  require(weights.size() == targets.size(), "bce_logits: weights length != targets length");
  Node n;
  n.op = Op::BceLogits;
  n.rows = 1;
  n.cols = 1;
  n.in0 = logits;
  n.needs_grad = nl.needs_grad;
  n.rattr = int32_t(real_attrs_.size());
  real_attrs_.push_back(std::move(targets));
  real_attrs_.push_back(std::move(weights));
  return push(n);
}

template <class Real>
void Graph<Real>::exec(size_t i) {
  Node& n = nodes_[i];
  Real* out = val_ptr(n);
  const i64 count = n.rows * n.cols;
  const Node* a = n.in0 >= 0 ? &nodes_[size_t(n.in0)] : nullptr;
  const Node* b = n.in1 >= 0 ? &nodes_[size_t(n.in1)] : nullptr;
  const Real* av = a ? val_ptr(*a) : nullptr;
  const Real* bv = b ? val_ptr(*b) : nullptr;
  switch (n.op) {
    case Op::Input:
    case Op::Param:
      break;
    case Op::Matmul: {
      const i64 K = n.ta ? a->rows : a->cols;
      gemm(av, bv, out, n.rows, K, n.cols, n.ta, n.tb, false);
      break;
    }
    case Op::Add:
      for (i64 k = 0; k < count; ++k) out[k] = av[k] + bv[k];
      break;
    case Op::Sub:
      for (i64 k = 0; k < count; ++k) out[k] = av[k] - bv[k];
      break;
    case Op::Mul:
      for (i64 k = 0; k < count; ++k) out[k] = av[k] * bv[k];
      break;
    case Op::Div:
      for (i64 k = 0; k < count; ++k) out[k] = av[k] / bv[k];
      break;
    case Op::Minimum:
      for (i64 k = 0; k < count; ++k) out[k] = av[k] <= bv[k] ? av[k] : bv[k];
      break;
    case Op::Maximum:
      for (i64 k = 0; k < count; ++k) out[k] = av[k] >= bv[k] ? av[k] : bv[k];
      break;
    case Op::AddRowVec:
      for (i64 r = 0; r < n.rows; ++r)
        for (i64 c = 0; c < n.cols; ++c) out[r * n.cols + c] = av[r * n.cols + c] + bv[c];
      break;
    case Op::Scale:
      for (i64 k = 0; k < count; ++k) out[k] = av[k] * n.c;
      break;
    case Op::AddConst:
      for (i64 k = 0; k < count; ++k) out[k] = av[k] + n.c;
      break;
    case Op::Relu:
      for (i64 k = 0; k < count; ++k) out[k] = av[k] > Real(0) ? av[k] : Real(0);
      break;
    case Op::Gelu:
      for (i64 k = 0; k < count; ++k) out[k] = gelu_fwd(av[k]);
      break;
    case Op::Sigmoid:
      for (i64 k = 0; k < count; ++k) out[k] = sigmoid_fwd(av[k]);
      break;
    case Op::Log:
      for (i64 k = 0; k < count; ++k) out[k] = Real(std::log(double(av[k])));
      break;
    case Op::Exp:
      for (i64 k = 0; k < count; ++k) out[k] = Real(std::exp(double(av[k])));
      break;
    case Op::Abs:
      for (i64 k = 0; k < count; ++k) out[k] = av[k] < Real(0) ? -av[k] : av[k];
      break;
    case Op::Transpose:
      for (i64 r = 0; r < n.rows; ++r)
        for (i64 c = 0; c < n.cols; ++c) out[r * n.cols + c] = av[c * a->cols + r];
      break;
    case Op::Slice:
      for (i64 r = 0; r < n.rows; ++r)
        std::copy(av + (n.r0 + r) * a->cols + n.c0, av + (n.r0 + r) * a->cols + n.c1,
                  out + r * n.cols);
      break;
    case Op::Concat:
      if (n.axis == 0) {
        std::copy(av, av + a->rows * a->cols, out);
        std::copy(bv, bv + b->rows * b->cols, out + a->rows * a->cols);
      } else {
        for (i64 r = 0; r < n.rows; ++r) {
          std::copy(av + r * a->cols, av + (r + 1) * a->cols, out + r * n.cols);
          std::copy(bv + r * b->cols, bv + (r + 1) * b->cols, out + r * n.cols + a->cols);
        }
      }
      break;
    case Op::GatherRows: {
      const auto& idx = idx_attrs_[size_t(n.iattr)];
      for (i64 r = 0; r < n.rows; ++r)
        std::copy(av + idx[size_t(r)] * n.cols, av + (idx[size_t(r)] + 1) * n.cols, out + r * n.cols);
      break;
    }
    case Op::MaskedFill: {
      const auto& m = mask_attrs_[size_t(n.iattr)];
      for (i64 k = 0; k < count; ++k) out[k] = m[size_t(k)] ? n.c : av[k];
      break;
    }
    case Op::SoftmaxRows:
      for (i64 r = 0; r < n.rows; ++r) {
        const Real* x = av + r * n.cols;
        Real* y = out + r * n.cols;
        Real mx = x[0];
        for (i64 c = 1; c < n.cols; ++c) mx = std::max(mx, x[c]);
        Real z = Real(0);
        for (i64 c = 0; c < n.cols; ++c) {
          y[c] = Real(std::exp(double(x[c] - mx)));
          z += y[c];
        }
        const Real inv = Real(1) / z;
        for (i64 c = 0; c < n.cols; ++c) y[c] *= inv;
      }
      break;
    case Op::LayerNorm: {
      const Real* g = val_ptr(nodes_[size_t(n.in1)]);
      const Real* be = val_ptr(nodes_[size_t(n.in2)]);
      const Real eps = Real(1e-5);
      for (i64 r = 0; r < n.rows; ++r) {
        const Real* x = av + r * n.cols;
        Real* y = out + r * n.cols;
        Real mu = Real(0);
        for (i64 c = 0; c < n.cols; ++c) mu += x[c];
        mu /= Real(n.cols);
        Real var = Real(0);
        for (i64 c = 0; c < n.cols; ++c) var += (x[c] - mu) * (x[c] - mu);
        var /= Real(n.cols);
        const Real inv = Real(1) / Real(std::sqrt(double(var + eps)));
        for (i64 c = 0; c < n.cols; ++c) y[c] = g[c] * ((x[c] - mu) * inv) + be[c];
      }
      break;
    }
    case Op::RowMax:
      for (i64 r = 0; r < n.rows; ++r) {
        const Real* x = av + r * a->cols;
        Real mx = x[0];
        for (i64 c = 1; c < a->cols; ++c) mx = std::max(mx, x[c]);
        out[r] = mx;
      }
      break;
    case Op::SumAll: {
      Real s = Real(0);
      for (i64 k = 0; k < a->rows * a->cols; ++k) s += av[k];
      out[0] = s;
      break;
    }
    case Op::MeanAll: {
      Real s = Real(0);
      const i64 m = a->rows * a->cols;
      for (i64 k = 0; k < m; ++k) s += av[k];
      out[0] = s / Real(m);
      break;
    }
    case Op::CrossEntropy: {
      const auto& tgt = idx_attrs_[size_t(n.iattr)];
      const auto& w = real_attrs_[size_t(n.rattr)];
      Real loss = Real(0);
      for (i64 r = 0; r < a->rows; ++r) {
        if (w[size_t(r)] == Real(0)) continue;
        const Real* x = av + r * a->cols;
        Real mx = x[0];
        for (i64 c = 1; c < a->cols; ++c) mx = std::max(mx, x[c]);
        Real z = Real(0);
        for (i64 c = 0; c < a->cols; ++c) z += Real(std::exp(double(x[c] - mx)));
        const Real lse = mx + Real(std::log(double(z)));
        loss += w[size_t(r)] * (lse - x[tgt[size_t(r)]]);
      }
      out[0] = loss;
      break;
    }
    case Op::BceLogits: {
      const auto& tgt = real_attrs_[size_t(n.rattr)];
      const auto& w = real_attrs_[size_t(n.rattr) + 1];
      Real loss = Real(0);
      const i64 m = a->rows * a->cols;
      for (i64 k = 0; k < m; ++k) {
        const Real l = av[k];
        const Real t = tgt[size_t(k)];
        const Real absl = l < Real(0) ? -l : l;
        loss += w[size_t(k)] *
                (std::max(l, Real(0)) - l * t + Real(std::log1p(std::exp(-double(absl)))));
      }
      out[0] = loss;
      break;
    }
  }
}

template <class Real>
void Graph<Real>::check_grad_finite(size_t i) const {
  const Node& n = nodes_[i];
  const Real* g = grads_.data() + n.grd;
  const i64 count = n.rows * n.cols;
  for (i64 k = 0; k < count; ++k) {
    if (g[k] != g[k])
      throw Error(std::string("backward: NaN gradient produced by ") + op_name(n.op) + " (node " +
                  std::to_string(i) + ")");
  }
}

template <class Real>
void Graph<Real>::backward(Id loss) {
  const Node& ln = at(loss);
  require(ln.rows == 1 && ln.cols == 1, "backward: loss must be a scalar");
  std::fill(grads_.begin(), grads_.end(), Real(0));
  grads_[at(loss).grd] = Real(1);
  // nodes after the loss cannot influence it
  for (size_t i = size_t(loss) + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (!n.needs_grad || n.op == Op::Input || n.op == Op::Param) continue;
    backstep(i);
    // NaN scan of whatever this primitive just accumulated, attributed to it
    bool nan_in = false;
    for (Id in : {n.in0, n.in1, n.in2}) {
      if (in < 0 || !nodes_[size_t(in)].needs_grad) continue;
      const Node& src = nodes_[size_t(in)];
      const Real* g = grads_.data() + src.grd;
      for (i64 k = 0; k < src.rows * src.cols; ++k)
        if (g[k] != g[k]) nan_in = true;
    }
    if (nan_in)
      throw Error(std::string("backward: NaN gradient produced by ") + op_name(n.op) + " (node " +
                  std::to_string(i) + ")");
  }
}

template <class Real>
void Graph<Real>::backstep(size_t i) {
  Node& n = nodes_[i];
  const Real* go = grads_.data() + n.grd;
  const i64 count = n.rows * n.cols;
  Node* a = n.in0 >= 0 ? &nodes_[size_t(n.in0)] : nullptr;
  Node* b = n.in1 >= 0 ? &nodes_[size_t(n.in1)] : nullptr;
  const Real* av = a ? val_ptr(*a) : nullptr;
  const Real* bv = b ? val_ptr(*b) : nullptr;
  Real* ga = a && a->needs_grad ? grads_.data() + a->grd : nullptr;
  Real* gb = b && b->needs_grad ? grads_.data() + b->grd : nullptr;
  const Real* ov = val_ptr(n);
  switch (n.op) {
    case Op::Input:
    case Op::Param:
      break;
    case Op::Matmul: {
      // C = opA(A) opB(B); accumulate dA and dB only where needed.
      const i64 M = n.rows, N = n.cols;
      const i64 K = n.ta ? a->rows : a->cols;
      if (ga) {
        if (!n.ta && !n.tb) gemm(go, bv, ga, M, N, K, false, true, true);        // dA = G B^T
        else if (!n.ta && n.tb) gemm(go, bv, ga, M, N, K, false, false, true);   // dA = G B
        else if (n.ta && !n.tb) gemm(bv, go, ga, K, N, M, false, true, true);    // dA^T: A(KxM) += B G^T
        else gemm(bv, go, ga, K, N, M, true, true, true);
      }
      if (gb) {
        if (!n.ta && !n.tb) gemm(av, go, gb, K, M, N, true, false, true);        // dB = A^T G
        else if (!n.ta && n.tb) gemm(go, av, gb, N, M, K, true, false, true);    // dB(NxK) = G^T A
        else if (n.ta && !n.tb) gemm(av, go, gb, K, M, N, false, false, true);   // dB = A G
        else gemm(go, av, gb, N, M, K, true, true, true);
      }
      break;
    }
    case Op::Add:
      if (ga)
        for (i64 k = 0; k < count; ++k) ga[k] += go[k];
      if (gb)
        for (i64 k = 0; k < count; ++k) gb[k] += go[k];
      break;
    case Op::Sub:
      if (ga)
        for (i64 k = 0; k < count; ++k) ga[k] += go[k];
      if (gb)
        for (i64 k = 0; k < count; ++k) gb[k] -= go[k];
      break;
    case Op::Mul:
      if (ga)
        for (i64 k = 0; k < count; ++k) ga[k] += go[k] * bv[k];
      if (gb)
        for (i64 k = 0; k < count; ++k) gb[k] += go[k] * av[k];
      break;
    case Op::Div:
      if (ga)
        for (i64 k = 0; k < count; ++k) ga[k] += go[k] / bv[k];
      if (gb)
        for (i64 k = 0; k < count; ++k) gb[k] -= go[k] * av[k] / (bv[k] * bv[k]);
      break;
    case Op::Minimum:
      // Ties route to the first argument.
      for (i64 k = 0; k < count; ++k) {
        if (av[k] <= bv[k]) {
          if (ga) ga[k] += go[k];
        } else if (gb) {
          gb[k] += go[k];
        }
      }
      break;
    case Op::Maximum:
      for (i64 k = 0; k < count; ++k) {
        if (av[k] >= bv[k]) {
          if (ga) ga[k] += go[k];
        } else if (gb) {
          gb[k] += go[k];
        }
      }
      break;
    case Op::AddRowVec:
      if (ga)
        for (i64 k = 0; k < count; ++k) ga[k] += go[k];
      if (gb)
        for (i64 r = 0; r < n.rows; ++r)
          for (i64 c = 0; c < n.cols; ++c) gb[c] += go[r * n.cols + c];
      break;
    case Op::Scale:
      if (ga)
        for (i64 k = 0; k < count; ++k) ga[k] += go[k] * n.c;
      break;
    case Op::AddConst:
      if (ga)
        for (i64 k = 0; k < count; ++k) ga[k] += go[k];
      break;
    case Op::Relu:
      if (ga)
        for (i64 k = 0; k < count; ++k)
          if (av[k] > Real(0)) ga[k] += go[k];
      break;
    case Op::Gelu:
      if (ga)
        for (i64 k = 0; k < count; ++k) ga[k] += go[k] * gelu_bwd(av[k]);
      break;
    case Op::Sigmoid:
      if (ga)
        for (i64 k = 0; k < count; ++k) ga[k] += go[k] * ov[k] * (Real(1) - ov[k]);
      break;
    case Op::Log:
      if (ga)
        for (i64 k = 0; k < count; ++k) ga[k] += go[k] / av[k];
      break;
    case Op::Exp:
      if (ga)
        for (i64 k = 0; k < count; ++k) ga[k] += go[k] * ov[k];
      break;
    case Op::Abs:
      if (ga)
        for (i64 k = 0; k < count; ++k) {
          if (av[k] > Real(0)) ga[k] += go[k];
          else if (av[k] < Real(0)) ga[k] -= go[k];
        }
      break;
    case Op::Transpose:
      if (ga)
        for (i64 r = 0; r < n.rows; ++r)
          for (i64 c = 0; c < n.cols; ++c) ga[c * a->cols + r] += go[r * n.cols + c];
      break;
    case Op::Slice:
      if (ga)
        for (i64 r = 0; r < n.rows; ++r)
          for (i64 c = 0; c < n.cols; ++c)
            ga[(n.r0 + r) * a->cols + n.c0 + c] += go[r * n.cols + c];
      break;
    case Op::Concat:
      if (n.axis == 0) {
        if (ga)
          for (i64 k = 0; k < a->rows * a->cols; ++k) ga[k] += go[k];
        if (gb)
          for (i64 k = 0; k < b->rows * b->cols; ++k) gb[k] += go[a->rows * a->cols + k];
      } else {
        for (i64 r = 0; r < n.rows; ++r) {
          if (ga)
            for (i64 c = 0; c < a->cols; ++c) ga[r * a->cols + c] += go[r * n.cols + c];
          if (gb)
            for (i64 c = 0; c < b->cols; ++c) gb[r * b->cols + c] += go[r * n.cols + a->cols + c];
        }
      }
      break;
    case Op::GatherRows:
      if (ga) {
        const auto& idx = idx_attrs_[size_t(n.iattr)];
        for (i64 r = 0; r < n.rows; ++r)
          for (i64 c = 0; c < n.cols; ++c) ga[idx[size_t(r)] * n.cols + c] += go[r * n.cols + c];
      }
      break;
    case Op::MaskedFill:
      if (ga) {
        const auto& m = mask_attrs_[size_t(n.iattr)];
        for (i64 k = 0; k < count; ++k)
          if (!m[size_t(k)]) ga[k] += go[k];
      }
      break;
    case Op::SoftmaxRows:
      if (ga)
        for (i64 r = 0; r < n.rows; ++r) {
          const Real* y = ov + r * n.cols;
          const Real* gy = go + r * n.cols;
          Real dot = Real(0);
          for (i64 c = 0; c < n.cols; ++c) dot += gy[c] * y[c];
          Real* gx = ga + r * n.cols;
          for (i64 c = 0; c < n.cols; ++c) gx[c] += y[c] * (gy[c] - dot);
        }
      break;
    case Op::LayerNorm: {
      const Real* g = val_ptr(nodes_[size_t(n.in1)]);
      Real* gg = nodes_[size_t(n.in1)].needs_grad ? grads_.data() + nodes_[size_t(n.in1)].grd : nullptr;
      Real* gbeta = nodes_[size_t(n.in2)].needs_grad ? grads_.data() + nodes_[size_t(n.in2)].grd : nullptr;
      const Real eps = Real(1e-5);
      const i64 C = n.cols;
      for (i64 r = 0; r < n.rows; ++r) {
        const Real* x = av + r * C;
        const Real* gy = go + r * C;
        Real mu = Real(0);
        for (i64 c = 0; c < C; ++c) mu += x[c];
        mu /= Real(C);
        Real var = Real(0);
        for (i64 c = 0; c < C; ++c) var += (x[c] - mu) * (x[c] - mu);
        var /= Real(C);
        const Real inv = Real(1) / Real(std::sqrt(double(var + eps)));
        Real mean_dxhat = Real(0), mean_dxhat_xhat = Real(0);
        for (i64 c = 0; c < C; ++c) {
          const Real xhat = (x[c] - mu) * inv;
          const Real dxhat = gy[c] * g[c];
          mean_dxhat += dxhat;
          mean_dxhat_xhat += dxhat * xhat;
          if (gg) gg[c] += gy[c] * xhat;
          if (gbeta) gbeta[c] += gy[c];
        }
        mean_dxhat /= Real(C);
        mean_dxhat_xhat /= Real(C);
        if (ga) {
          Real* gx = ga + r * C;
          for (i64 c = 0; c < C; ++c) {
            const Real xhat = (x[c] - mu) * inv;
            gx[c] += inv * (gy[c] * g[c] - mean_dxhat - xhat * mean_dxhat_xhat);
          }
        }
      }
      break;
    }
    case Op::RowMax:
      if (ga)
        for (i64 r = 0; r < n.rows; ++r) {
          const Real* x = av + r * a->cols;
          i64 arg = 0;
          for (i64 c = 1; c < a->cols; ++c)
            if (x[c] > x[arg]) arg = c;
          ga[r * a->cols + arg] += go[r];
        }
      break;
    case Op::SumAll:
      if (ga)
        for (i64 k = 0; k < a->rows * a->cols; ++k) ga[k] += go[0];
      break;
    case Op::MeanAll:
      if (ga) {
        const Real s = go[0] / Real(a->rows * a->cols);
        for (i64 k = 0; k < a->rows * a->cols; ++k) ga[k] += s;
      }
      break;
    case Op::CrossEntropy:
      if (ga) {
        const auto& tgt = idx_attrs_[size_t(n.iattr)];
        const auto& w = real_attrs_[size_t(n.rattr)];
        for (i64 r = 0; r < a->rows; ++r) {
          if (w[size_t(r)] == Real(0)) continue;
          const Real* x = av + r * a->cols;
          Real mx = x[0];
          for (i64 c = 1; c < a->cols; ++c) mx = std::max(mx, x[c]);
          Real z = Real(0);
          for (i64 c = 0; c < a->cols; ++c) z += Real(std::exp(double(x[c] - mx)));
          const Real scale = go[0] * w[size_t(r)];
          Real* gx = ga + r * a->cols;
          for (i64 c = 0; c < a->cols; ++c) {
            const Real p = Real(std::exp(double(x[c] - mx))) / z;
            gx[c] += scale * (p - (c == tgt[size_t(r)] ? Real(1) : Real(0)));
          }
        }
      }
      break;
    case Op::BceLogits:
      if (ga) {
        const auto& tgt = real_attrs_[size_t(n.rattr)];
        const auto& w = real_attrs_[size_t(n.rattr) + 1];
        const i64 m = a->rows * a->cols;
        for (i64 k = 0; k < m; ++k)
          ga[k] += go[0] * w[size_t(k)] * (sigmoid_fwd(av[k]) - tgt[size_t(k)]);
      }
      break;
  }
}

template <class Real>
std::span<const Real> Graph<Real>::value(Id id) const {
  const Node& n = at(id);
  return {vals_.data() + n.val, size_t(n.rows * n.cols)};
}

template <class Real>
std::span<const Real> Graph<Real>::grad(Id id) const {
  const Node& n = at(id);
  return {grads_.data() + n.grd, size_t(n.rows * n.cols)};
}

template <class Real>
Real Graph<Real>::scalar_value(Id id) const {
  const Node& n = at(id);
  require(n.rows == 1 && n.cols == 1, "scalar_value: node is not a scalar");
  return vals_[n.val];
}

template <class Real>
Tensor<Real> Graph<Real>::value_tensor(Id id) const {
  const Node& n = at(id);
  auto v = value(id);
  return Tensor<Real>::from({n.rows, n.cols}, std::vector<Real>(v.begin(), v.end()));
}

template <class Real>
Tensor<Real> Graph<Real>::grad_tensor(Id id) const {
  const Node& n = at(id);
  auto g = grad(id);
  return Tensor<Real>::from({n.rows, n.cols}, std::vector<Real>(g.begin(), g.end()));
}

template <class Real>
void Graph<Real>::set_leaf(Id id, const Tensor<Real>& t) {
  Node& n = at(id);
  require(n.op == Op::Input || n.op == Op::Param, "set_leaf: node is not a leaf");
  require(t.rows() == n.rows && t.cols() == n.cols, "set_leaf: shape mismatch");
  std::copy(t.data.begin(), t.data.end(), val_ptr(n));
}

template <class Real>
void Graph<Real>::replay() {
  for (size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].op != Op::Input && nodes_[i].op != Op::Param) exec(i);
}

template <class Real>
void Graph<Real>::reset() {
  nodes_.clear();
  vals_.clear();
  grads_.clear();
  idx_attrs_.clear();
  mask_attrs_.clear();
  real_attrs_.clear();
}

template <class Real>
Tensor<Real> finite_diff_grad(const std::function<Real(const Tensor<Real>&)>& f, const Tensor<Real>& x,
                              Real h) {
  Tensor<Real> g(x.shape, Real(0));
  Tensor<Real> probe = x;
  for (size_t i = 0; i < x.data.size(); ++i) {
    probe.data[i] = x.data[i] + h;
    const Real fp = f(probe);
    probe.data[i] = x.data[i] - h;
    const Real fm = f(probe);
    probe.data[i] = x.data[i];
    if (!std::isfinite(double(fp)) || !std::isfinite(double(fm)))
      throw Error("finite_diff_grad: non-finite value at coordinate " + std::to_string(i));
    g.data[i] = (fp - fm) / (Real(2) * h);
  }
  return g;
}

template class Graph<float>;
template class Graph<double>;
template Tensor<float> finite_diff_grad<float>(const std::function<float(const Tensor<float>&)>&,
                                               const Tensor<float>&, float);
template Tensor<double> finite_diff_grad<double>(const std::function<double(const Tensor<double>&)>&,
                                                 const Tensor<double>&, double);

}  // namespace lmdet
