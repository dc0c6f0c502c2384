#pragma once

#include <string>
#include <vector>

#include "lmdet/geometry.hpp"
#include "lmdet/image.hpp"
#include "lmdet/nn.hpp"

namespace lmdet {

struct DetConfig {
  i64 d_det = 128;
  i64 heads = 4;
  i64 num_queries = 10;
  i64 dec_layers = 2;
  i64 fusion_layers = 1;
  i64 patch = 4;        // feature stride in pixels
  i64 image_size = 64;  // pixels
  i64 text_cap = 24;    // detector text length cap
  i64 vocab_size = 0;

  i64 grid() const { return image_size / patch; }
  i64 feature_count() const { return grid() * grid(); }
  i64 patch_dim() const { return 3 * patch * patch; }
  void validate() const;

  // Capacity presets scaling width and decoder depth (T < B < L).
  static DetConfig with_preset(const std::string& preset);
};

struct DetPrediction {
  std::vector<Box> boxes;       // one per query, normalized center format
  std::vector<double> logits;   // objectness per query
  int selected = 0;             // argmax of logits
  Box pred;                     // boxes[selected]
};

// Open-set detector: image/text encoders with one bidirectional fusion layer,
// query selection guided by the LM's detection embedding, and a decoder whose
// text cross-attention sees that embedding as an extra key/value slot.
template <class Real>
struct Detector {
  using Id = typename Graph<Real>::Id;

  DetConfig cfg;
  i64 d_lm = 0;  // width of the incoming LM embedding

  Linear<Real> patch_embed;
  Tensor<Real>* img_pos = nullptr;  // (F x d)
  TransformerBlock<Real> img_block;
  Tensor<Real>* txt_embed = nullptr;  // (V x d)
  Tensor<Real>* txt_pos = nullptr;    // (text_cap x d)
  TransformerBlock<Real> txt_block;
  // fusion: both directions computed from pre-update features, residual added
  LayerNormParams<Real> fus_img_ln, fus_txt_ln;
  MultiHeadAttention<Real> img2txt, txt2img;
  // LM embedding bridge, 2-layer MLP
  Linear<Real> bridge1, bridge2;
  // query-selection cross-attention (Q = image features, K = V = bridged embedding)
  LayerNormParams<Real> qs_ln;
  MultiHeadAttention<Real> qs_attn;
  struct DecLayer {
    LayerNormParams<Real> ln1, ln2, ln3, ln4;
    MultiHeadAttention<Real> self_attn, img_cross, txt_cross;
    Mlp<Real> mlp;
  };
  std::vector<DecLayer> dec;
  LayerNormParams<Real> dec_ln;
  Linear<Real> box1, box2, box3;

  static Detector create(ParamStore<Real>& store, const DetConfig& cfg, i64 d_lm, Rng& rng);

  struct Encoded {
    Id f_img = -1;  // (F x d)
    Id f_txt = -1;  // (T x d)
  };
  // Image patches plus non-empty detector text tokens (truncated to the cap).
  Encoded encode_pair(Bind<Real>& bind, Id patches, const std::vector<int>& txt_ids) const;
  Encoded encode_pair(Bind<Real>& bind, const Tensor<Real>& patches,
                      const std::vector<int>& txt_ids) const {
    return encode_pair(bind, bind.g.input(patches), txt_ids);
  }

  // d_lm -> d_det projection of the detection embedding (rows = occurrences).
  Id project_hdet(Bind<Real>& bind, Id hdet) const;

  struct Selected {
    Id queries = -1;     // (k x d) activated content of the chosen features
    Id query_pos = -1;   // (k x d) their positional encodings
    Id f_img_act = -1;   // (F x d) image map after the cross-attention update
    std::vector<i64> indices;  // chosen feature indices, ranked by relevance
  };
  // Cross-attention writes the bridged embedding into the image map, then the
  // top-k features by max text relevance become the decoder queries.
  Selected select_queries(Bind<Real>& bind, Id hdet_proj, Id f_img, Id f_txt, i64 k) const;

  struct Decoded {
    Id boxes = -1;   // (k x 4) after sigmoid
    Id logits = -1;  // (k x 1)
  };
  // zero_hdet_slot blanks the embedding's key/value slot in the decoder text
  // cross-attention (ablation hook; selection still sees the real embedding).
  Decoded decode(Bind<Real>& bind, Id hdet_proj, const Selected& sel, Id f_txt,
                 bool zero_hdet_slot = false) const;

  static DetPrediction read_prediction(const Graph<Real>& g, const Decoded& d);
};

// Descending by score, ties by lower index; returns k indices.
std::vector<i64> top_k_indices(const std::vector<double>& scores, i64 k);

}  // namespace lmdet
