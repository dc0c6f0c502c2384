#pragma once

#include <string>
#include <vector>

#include "lmdet/image.hpp"
#include "lmdet/nn.hpp"
#include "lmdet/text.hpp"

namespace lmdet {

struct MllmConfig {
  i64 d_model = 128;
  i64 n_layers = 4;
  i64 n_heads = 4;
  i64 patch = 8;        // pixels per patch side
  i64 image_size = 64;  // pixels
  i64 context = 192;    // >= image tokens + text tokens
  i64 vocab_size = 0;   // filled from the Vocab
  bool hdet_post_norm = true;

  i64 grid() const { return image_size / patch; }
  i64 image_tokens() const { return grid() * grid(); }
  i64 patch_dim() const { return 3 * patch * patch; }
  void validate() const;
};

// Decoder-only multimodal LM. The <image> token in the stream expands to the
// patch embeddings; image positions attend bidirectionally among themselves
// and are visible to every text position, text attends causally.
template <class Real>
struct LanguageModel {
  using Id = typename Graph<Real>::Id;

  MllmConfig cfg;
  Linear<Real> patch_embed;
  Tensor<Real>* tok_embed = nullptr;  // (V x d)
  Tensor<Real>* pos_embed = nullptr;  // (context x d)
  std::vector<TransformerBlock<Real>> blocks;
  LayerNormParams<Real> final_ln;
  Linear<Real> head;

  static LanguageModel create(ParamStore<Real>& store, const MllmConfig& cfg, Rng& rng);

  struct Forward {
    Id logits = -1;       // (N x V)
    Id hidden = -1;       // (N x d), post final norm
    Id hidden_pre = -1;   // (N x d), pre final norm
    i64 expanded_len = 0;
    std::vector<i64> expanded_pos;  // token index -> expanded index
    std::vector<i64> det_expanded;  // expanded indices of <DET> answer tokens
  };

  Forward fwd(Bind<Real>& bind, Id patches, const std::vector<int>& ids, int image_pos,
              const std::vector<int>& det_positions) const;
  Forward fwd(Bind<Real>& bind, const Tensor<Real>& patches, const std::vector<int>& ids,
              int image_pos, const std::vector<int>& det_positions) const {
    return fwd(bind, bind.g.input(patches), ids, image_pos, det_positions);
  }

  // h_det for one <DET> occurrence: a (1 x d) row of the last layer.
  Id hdet_row(Bind<Real>& bind, const Forward& f, size_t which = 0) const;

  // Mean (or sum) of masked next-token log losses, Eq.-style teacher forcing.
  Id token_loss(Bind<Real>& bind, const Forward& f, const std::vector<int>& ids,
                const std::vector<uint8_t>& loss_mask, bool mean_reduction = true) const;

  static Tensor<Real> patchify(const Image& img, i64 patch);
};

struct GenerationResult {
  std::vector<int> ids;                      // generated tokens, <eos> included when emitted
  bool truncated = false;                    // hit max_steps before <eos>
  std::vector<Tensor<float>> hdet;           // hidden rows at emitted <DET> tokens
  std::vector<int> det_positions_generated;  // indices into `ids`
};

// Greedy decoding from a user prompt (prompt ids must end at the
// assistant-turn boundary). Deterministic given weights and prompt.
GenerationResult generate_greedy(LanguageModel<float>& lm, const Tensor<float>& patches,
                                 std::vector<int> prompt_ids, int image_pos, int max_steps);

// <bos> User: ...text... Assistant:
std::vector<int> encode_prompt(const std::string& user_text, const Vocab& vocab, int* image_pos);

}  // namespace lmdet
