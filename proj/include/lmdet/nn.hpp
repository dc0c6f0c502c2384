#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "lmdet/graph.hpp"
#include "lmdet/rng.hpp"
#include "lmdet/tensor.hpp"

namespace lmdet {

// Named parameter registry. Creation order is the initialization-draw order
// and the checkpoint order, so construction must be deterministic.
template <class Real>
class ParamStore {
 public:
  Tensor<Real>* create(const std::string& name, std::vector<i64> shape);
  Tensor<Real>* find(const std::string& name);
  void for_each(const std::function<void(const std::string&, Tensor<Real>&)>& fn);
  i64 total_params() const;
  size_t count() const { return entries_.size(); }

  std::vector<std::pair<std::string, Tensor<float>>> snapshot() const;
  // Strict by name and shape: every store entry must be present in weights.
  void load(const std::map<std::string, Tensor<float>>& weights);

 private:
  struct Entry {
    std::string name;
    std::unique_ptr<Tensor<Real>> tensor;
  };
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

// Per-step association of parameter tensors with graph leaves. Parameters are
// inserted lazily on first use so a step only pays for what it touches.
template <class Real>
class Bind {
 public:
  explicit Bind(Graph<Real>& graph) : g(graph) {}

  typename Graph<Real>::Id operator()(Tensor<Real>* t) {
    auto it = ids_.find(t);
    if (it != ids_.end()) return it->second;
    const auto id = g.param(*t);
    ids_.emplace(t, id);
    return id;
  }

  bool bound(Tensor<Real>* t) const { return ids_.count(t) > 0; }
  typename Graph<Real>::Id id_of(Tensor<Real>* t) const { return ids_.at(t); }

  Graph<Real>& g;

 private:
  std::unordered_map<Tensor<Real>*, typename Graph<Real>::Id> ids_;
};

template <class Real>
struct Linear {
  Tensor<Real>* w = nullptr;  // (in x out)
  Tensor<Real>* b = nullptr;  // (1 x out)

  static Linear create(ParamStore<Real>& store, const std::string& name, i64 in, i64 out,
                       Rng& rng);
  typename Graph<Real>::Id fwd(Bind<Real>& bind, typename Graph<Real>::Id x) const;
};

template <class Real>
struct LayerNormParams {
  Tensor<Real>* gamma = nullptr;
  Tensor<Real>* beta = nullptr;

  static LayerNormParams create(ParamStore<Real>& store, const std::string& name, i64 dim);
  typename Graph<Real>::Id fwd(Bind<Real>& bind, typename Graph<Real>::Id x) const;
};

// Multi-head attention; `blocked` is an optional (Lq x Lkv) mask with 1 where
// attention is forbidden.
template <class Real>
struct MultiHeadAttention {
  Linear<Real> q, k, v, o;
  i64 heads = 1;
  i64 dim = 0;

  static MultiHeadAttention create(ParamStore<Real>& store, const std::string& name, i64 dim,
                                   i64 heads, Rng& rng);
  typename Graph<Real>::Id fwd(Bind<Real>& bind, typename Graph<Real>::Id q_src,
                               typename Graph<Real>::Id kv_src,
                               const std::vector<uint8_t>* blocked = nullptr) const;
};

template <class Real>
struct Mlp {
  Linear<Real> fc1, fc2;

  static Mlp create(ParamStore<Real>& store, const std::string& name, i64 dim, i64 hidden,
                    Rng& rng);
  typename Graph<Real>::Id fwd(Bind<Real>& bind, typename Graph<Real>::Id x) const;
};

// Pre-norm self-attention block: x += attn(ln1(x)); x += mlp(ln2(x)).
template <class Real>
struct TransformerBlock {
  LayerNormParams<Real> ln1, ln2;
  MultiHeadAttention<Real> attn;
  Mlp<Real> mlp;

  static TransformerBlock create(ParamStore<Real>& store, const std::string& name, i64 dim,
                                 i64 heads, i64 mlp_hidden, Rng& rng);
  typename Graph<Real>::Id fwd(Bind<Real>& bind, typename Graph<Real>::Id x,
                               const std::vector<uint8_t>* blocked = nullptr) const;
};

// Embedding init scale shared by every table and linear map.
inline constexpr double kInitStd = 0.02;

}  // namespace lmdet
