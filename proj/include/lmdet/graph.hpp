#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lmdet/tensor.hpp"

namespace lmdet {

enum class Op : uint8_t {
  Input,
  Param,
  Matmul,
  Add,
  Sub,
  Mul,
  Div,
  Minimum,
  Maximum,
  AddRowVec,
  Scale,
  AddConst,
  Relu,
  Gelu,
  Sigmoid,
  Log,
  Exp,
  Abs,
  Transpose,
  Slice,
  Concat,
  GatherRows,
  MaskedFill,
  SoftmaxRows,
  LayerNorm,
  RowMax,
  SumAll,
  MeanAll,
  CrossEntropy,
  BceLogits,
};

const char* op_name(Op op);

// Recorded computation over rank-2 tensors. Recording executes eagerly; the
// node list is a topologically ordered tape that backward() walks in reverse
// and replay() re-executes forward. Values and gradients live in arenas that
// keep their capacity across reset(), so a training loop reuses storage.
template <class Real>
class Graph {
 public:
  using Id = int32_t;

  Graph() = default;

  // Leaves. input() is a non-differentiable constant, param() receives a
  // gradient. Both copy the tensor's current values into the graph.
  Id input(const Tensor<Real>& t);
  Id param(const Tensor<Real>& t);

  Id matmul(Id a, Id b, bool ta = false, bool tb = false);
  Id add(Id a, Id b);
  Id sub(Id a, Id b);
  Id mul(Id a, Id b);
  Id div(Id a, Id b);
  Id minimum(Id a, Id b);
  Id maximum(Id a, Id b);
  Id add_rowvec(Id a, Id v);  // (m x n) + (1 x n), broadcast over rows
  Id scale(Id a, Real c);
  Id add_const(Id a, Real c);
  Id relu(Id a);
  Id gelu(Id a);
  Id sigmoid(Id a);
  Id log(Id a);
  Id exp(Id a);
  Id abs(Id a);
  Id transpose(Id a);
  Id slice(Id a, i64 r0, i64 r1, i64 c0, i64 c1);
  Id concat(Id a, Id b, int axis);
  Id gather_rows(Id a, std::vector<i64> indices);
  Id masked_fill(Id a, std::vector<uint8_t> mask, Real value);
  Id softmax_rows(Id a);
  Id layer_norm(Id x, Id gamma, Id beta);
  Id row_max(Id a);  // (m x n) -> (m x 1)
  Id sum_all(Id a);
  Id mean_all(Id a);
  // Weighted token cross-entropy: sum_p w[p] * (logsumexp(row p) - row_p[t[p]]).
  // Positions with w == 0 are ignored (target may be -1 there).
  Id cross_entropy(Id logits, std::vector<i64> targets, std::vector<Real> weights);
  // Weighted binary cross-entropy on logits: sum_i w[i] * bce(l[i], t[i]).
  Id bce_logits(Id logits, std::vector<Real> targets, std::vector<Real> weights);

  i64 rows(Id id) const { return nodes_[size_t(id)].rows; }
  i64 cols(Id id) const { return nodes_[size_t(id)].cols; }
  std::span<const Real> value(Id id) const;
  std::span<const Real> grad(Id id) const;
  Real scalar_value(Id id) const;
  Tensor<Real> value_tensor(Id id) const;
  Tensor<Real> grad_tensor(Id id) const;

  // Reverse-mode sweep from a scalar loss. Gradients accumulate; leaves not
  // on a path to the loss end with zero gradient. NaN in any produced
  // gradient reports the originating primitive.
  void backward(Id loss);

  // Overwrite a leaf's values (shape must match), e.g. before replay().
  void set_leaf(Id id, const Tensor<Real>& t);

  // Re-execute every non-leaf node from current leaf values.
  void replay();

  void reset();  // drop all nodes, keep arena capacity
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Op op;
    i64 rows = 0, cols = 0;
    size_t val = 0;   // offset into vals_
    size_t grd = 0;   // offset into grads_
    Id in0 = -1, in1 = -1, in2 = -1;
    bool needs_grad = false;
    Real c = Real(0);      // Scale / AddConst / MaskedFill fill value
    bool ta = false, tb = false;
    i64 r0 = 0, r1 = 0, c0 = 0, c1 = 0;  // Slice
    int axis = 0;                        // Concat
    int32_t iattr = -1;                  // index into idx_attrs_ / mask_attrs_
    int32_t rattr = -1;                  // index into real_attrs_ (x2 for CE/BCE)
  };

  Id push(Node n);
  void exec(size_t i);
  void backstep(size_t i);
  Real* val_ptr(const Node& n) { return vals_.data() + n.val; }
  const Real* val_ptr(const Node& n) const { return vals_.data() + n.val; }
  Real* grd_ptr(const Node& n) { return grads_.data() + n.grd; }
  const Node& at(Id id) const;
  Node& at(Id id);
  Id unary(Op op, Id a);
  Id binary(Op op, Id a, Id b);
  void check_grad_finite(size_t i) const;

  std::vector<Node> nodes_;
  std::vector<Real> vals_;
  std::vector<Real> grads_;
  std::vector<std::vector<i64>> idx_attrs_;
  std::vector<std::vector<uint8_t>> mask_attrs_;
  std::vector<std::vector<Real>> real_attrs_;
};

// Central finite differences, (f(x + h e_i) - f(x - h e_i)) / 2h per
// coordinate. The independent oracle for every backward() check.
template <class Real>
Tensor<Real> finite_diff_grad(const std::function<Real(const Tensor<Real>&)>& f, const Tensor<Real>& x,
                              Real h);

using GraphF = Graph<float>;
using GraphD = Graph<double>;

}  // namespace lmdet
