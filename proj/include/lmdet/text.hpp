#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "lmdet/geometry.hpp"
#include "lmdet/rng.hpp"

namespace lmdet {

enum class DataType { Od, Rec, RdShort, RdLong, Vqa };

const char* data_type_name(DataType t);
DataType data_type_from(const std::string& name);
bool has_detection(DataType t);

// Closed-world word vocabulary. Tokenization is whitespace splitting; every
// string the generators can emit is in-vocabulary, and templates always leave
// whitespace around <DET> so it never fuses with punctuation.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kImage = 3;
  static constexpr int kDet = 4;
  static constexpr int kUser = 5;
  static constexpr int kAssistant = 6;

  static const Vocab& standard();

  int id(const std::string& token) const;  // throws naming the word when missing
  const std::string& token(int id) const;
  bool contains(const std::string& token) const;
  i64 size() const { return i64(tokens_.size()); }

  std::vector<int> tokenize(const std::string& text) const;
  std::string detokenize(const std::vector<int>& ids) const;

  explicit Vocab(std::vector<std::string> tokens);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

struct Turn {
  std::string role;  // "user" | "assistant"
  std::string text;
};

struct Conversation {
  std::vector<Turn> turns;
  DataType data_type = DataType::Vqa;
  std::string detector_text;        // t' fed to the detector text encoder
  std::vector<int> det_positions;   // indices of <DET> within the tokenized answer
};

// Scene-level annotation carrying whatever the template for its data type
// needs, plus the regression targets.
struct RawAnnotation {
  DataType data_type = DataType::Vqa;
  std::string category;      // od
  std::string caption;       // rec / rd_short
  std::string question;      // rd_long
  std::string reason;        // rd_long
  std::string vqa_question;  // vqa
  std::string vqa_answer;    // vqa
  std::vector<Box> gt_boxes;
};

// Instantiates the conversation template for the sample's data type. The rng
// only drives the REC/RD-short paraphrase choice; all other templates are
// fixed strings.
Conversation format_sample(const RawAnnotation& raw, DataType type, Rng& rng);

// The detector's text input as originally inserted (stored, not re-parsed).
// Errors on VQA conversations, which have no detector text.
std::string extract_caption(const Conversation& conv);

struct EncodedConv {
  std::vector<int> ids;            // <bos> User: ... Assistant: ... <eos>
  std::vector<uint8_t> loss_mask;  // 1 exactly on assistant answer tokens + <eos>
  std::vector<int> det_positions;  // global indices into ids
  int image_pos = -1;              // index of <image> in ids, -1 if absent
};

// det_only restricts supervision to the <DET> tokens and <eos> (ablation of
// full-answer supervision).
EncodedConv encode_conversation(const Conversation& conv, const Vocab& vocab,
                                bool det_only = false);

std::vector<uint8_t> supervision_mask(const Conversation& conv, const Vocab& vocab);

// Number of REC/RD-short question paraphrases.
int rec_template_count();

}  // namespace lmdet
