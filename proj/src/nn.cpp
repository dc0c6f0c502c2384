#include "lmdet/nn.hpp"

#include <cmath>

#include "lmdet/error.hpp"

namespace lmdet {

template <class Real>
Tensor<Real>* ParamStore<Real>::create(const std::string& name, std::vector<i64> shape) {
  require(index_.find(name) == index_.end(), "param store: duplicate name " + name);
  Entry e;
  e.name = name;
  e.tensor = std::make_unique<Tensor<Real>>(std::move(shape));
  e.tensor->set_requires_grad(true);
  entries_.push_back(std::move(e));
  index_.emplace(name, entries_.size() - 1);
  return entries_.back().tensor.get();
}

template <class Real>
Tensor<Real>* ParamStore<Real>::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : entries_[it->second].tensor.get();
}

template <class Real>
void ParamStore<Real>::for_each(const std::function<void(const std::string&, Tensor<Real>&)>& fn) {
  for (auto& e : entries_) fn(e.name, *e.tensor);
}

template <class Real>
i64 ParamStore<Real>::total_params() const {
  i64 n = 0;
  for (const auto& e : entries_) n += e.tensor->numel();
  return n;
}

template <class Real>
std::vector<std::pair<std::string, Tensor<float>>> ParamStore<Real>::snapshot() const {
  std::vector<std::pair<std::string, Tensor<float>>> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.emplace_back(e.name, e.tensor->template cast<float>());
  return out;
}

template <class Real>
void ParamStore<Real>::load(const std::map<std::string, Tensor<float>>& weights) {
  for (auto& e : entries_) {
    auto it = weights.find(e.name);
    require(it != weights.end(), "checkpoint: missing tensor " + e.name);
    require(it->second.shape == e.tensor->shape,
            "checkpoint: shape mismatch for " + e.name + ": file " + shape_str(it->second.shape) +
                " vs model " + shape_str(e.tensor->shape));
    for (size_t i = 0; i < e.tensor->data.size(); ++i)
      e.tensor->data[i] = Real(it->second.data[i]);
  }
}

template <class Real>
Linear<Real> Linear<Real>::create(ParamStore<Real>& store, const std::string& name, i64 in,
                                  i64 out, Rng& rng) {
  Linear l;
  l.w = store.create(name + ".w", {in, out});
  l.b = store.create(name + ".b", {1, out});
  l.w->fill_normal(rng, Real(0), Real(kInitStd));
  return l;
}

template <class Real>
typename Graph<Real>::Id Linear<Real>::fwd(Bind<Real>& bind, typename Graph<Real>::Id x) const {
  return bind.g.add_rowvec(bind.g.matmul(x, bind(w)), bind(b));
}

template <class Real>
LayerNormParams<Real> LayerNormParams<Real>::create(ParamStore<Real>& store,
                                                    const std::string& name, i64 dim) {
  LayerNormParams p;
  p.gamma = store.create(name + ".g", {1, dim});
  p.beta = store.create(name + ".b", {1, dim});
  for (auto& v : p.gamma->data) v = Real(1);
  return p;
}

template <class Real>
typename Graph<Real>::Id LayerNormParams<Real>::fwd(Bind<Real>& bind,
                                                    typename Graph<Real>::Id x) const {
  return bind.g.layer_norm(x, bind(gamma), bind(beta));
}

template <class Real>
MultiHeadAttention<Real> MultiHeadAttention<Real>::create(ParamStore<Real>& store,
                                                          const std::string& name, i64 dim,
                                                          i64 heads, Rng& rng) {
  require(dim % heads == 0, "attention: dim must be divisible by heads");
  MultiHeadAttention m;
  m.heads = heads;
  m.dim = dim;
  m.q = Linear<Real>::create(store, name + ".q", dim, dim, rng);
  m.k = Linear<Real>::create(store, name + ".k", dim, dim, rng);
  m.v = Linear<Real>::create(store, name + ".v", dim, dim, rng);
  m.o = Linear<Real>::create(store, name + ".o", dim, dim, rng);
  return m;
}

template <class Real>
typename Graph<Real>::Id MultiHeadAttention<Real>::fwd(Bind<Real>& bind,
                                                       typename Graph<Real>::Id q_src,
                                                       typename Graph<Real>::Id kv_src,
                                                       const std::vector<uint8_t>* blocked) const {
  auto& g = bind.g;
  const i64 lq = g.rows(q_src);
  const i64 lk = g.rows(kv_src);
  const i64 hd = dim / heads;
  const auto qm = q.fwd(bind, q_src);
  const auto km = k.fwd(bind, kv_src);
  const auto vm = v.fwd(bind, kv_src);
  const Real inv_sqrt = Real(1.0 / std::sqrt(double(hd)));
  typename Graph<Real>::Id ctx = -1;
  for (i64 h = 0; h < heads; ++h) {
    const auto qh = g.slice(qm, 0, lq, h * hd, (h + 1) * hd);
    const auto kh = g.slice(km, 0, lk, h * hd, (h + 1) * hd);
    const auto vh = g.slice(vm, 0, lk, h * hd, (h + 1) * hd);
    auto scores = g.scale(g.matmul(qh, kh, false, true), inv_sqrt);
    if (blocked) scores = g.masked_fill(scores, *blocked, Real(-1e9));
    const auto attn = g.softmax_rows(scores);
    const auto ctx_h = g.matmul(attn, vh);
    ctx = h == 0 ? ctx_h : g.concat(ctx, ctx_h, 1);
  }
  return o.fwd(bind, ctx);
}

template <class Real>
Mlp<Real> Mlp<Real>::create(ParamStore<Real>& store, const std::string& name, i64 dim, i64 hidden,
                            Rng& rng) {
  Mlp m;
  m.fc1 = Linear<Real>::create(store, name + ".fc1", dim, hidden, rng);
  m.fc2 = Linear<Real>::create(store, name + ".fc2", hidden, dim, rng);
  return m;
}

template <class Real>
typename Graph<Real>::Id Mlp<Real>::fwd(Bind<Real>& bind, typename Graph<Real>::Id x) const {
  return fc2.fwd(bind, bind.g.gelu(fc1.fwd(bind, x)));
}

template <class Real>
TransformerBlock<Real> TransformerBlock<Real>::create(ParamStore<Real>& store,
                                                      const std::string& name, i64 dim, i64 heads,
                                                      i64 mlp_hidden, Rng& rng) {
  TransformerBlock b;
  b.ln1 = LayerNormParams<Real>::create(store, name + ".ln1", dim);
  b.attn = MultiHeadAttention<Real>::create(store, name + ".attn", dim, heads, rng);
  b.ln2 = LayerNormParams<Real>::create(store, name + ".ln2", dim);
  b.mlp = Mlp<Real>::create(store, name + ".mlp", dim, mlp_hidden, rng);
  return b;
}

template <class Real>
typename Graph<Real>::Id TransformerBlock<Real>::fwd(Bind<Real>& bind, typename Graph<Real>::Id x,
                                                     const std::vector<uint8_t>* blocked) const {
  auto& g = bind.g;
  const auto normed = ln1.fwd(bind, x);
  auto h = g.add(x, attn.fwd(bind, normed, normed, blocked));
  return g.add(h, mlp.fwd(bind, ln2.fwd(bind, h)));
}

template class ParamStore<float>;
template class ParamStore<double>;
template struct Linear<float>;
template struct Linear<double>;
template struct LayerNormParams<float>;
template struct LayerNormParams<double>;
template struct MultiHeadAttention<float>;
template struct MultiHeadAttention<double>;
template struct Mlp<float>;
template struct Mlp<double>;
template struct TransformerBlock<float>;
template struct TransformerBlock<double>;

}  // namespace lmdet
