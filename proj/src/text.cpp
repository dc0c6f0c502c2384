#include "lmdet/text.hpp"

#include <algorithm>
#include <sstream>

#include "lmdet/error.hpp"

namespace lmdet {

const char* data_type_name(DataType t) {
  switch (t) {
    case DataType::Od: return "od";
    case DataType::Rec: return "rec";
    case DataType::RdShort: return "rd_short";
    case DataType::RdLong: return "rd_long";
    case DataType::Vqa: return "vqa";
  }
  return "?";
}

DataType data_type_from(const std::string& name) {
  if (name == "od") return DataType::Od;
  if (name == "rec") return DataType::Rec;
  if (name == "rd_short") return DataType::RdShort;
  if (name == "rd_long") return DataType::RdLong;
  if (name == "vqa") return DataType::Vqa;
  throw Error("unknown data_type: " + name);
}

bool has_detection(DataType t) { return t != DataType::Vqa; }

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (size_t i = 0; i < tokens_.size(); ++i) {
    require(ids_.emplace(tokens_[i], int(i)).second, "vocab: duplicate token " + tokens_[i]);
  }
}

const Vocab& Vocab::standard() {
  static const Vocab vocab = [] {
    std::vector<std::string> t = {
        "<pad>", "<bos>", "<eos>", "<image>", "<DET>", "User:", "Assistant:",
        // punctuation that stands alone in templates
        ".", ",", "?",
        // instruction words
        "Please", "detect", "the", "in", "this", "image.", "image?", "What", "Where", "Can",
        "you", "locate", "Find", "find", "is", "output", "object", "location", "location.", "and",
        "explain", "reason.", "It", "Sure,", "detection", "result",
        // rd question wrappers
        "I", "am", "looking", "for", "picture.", "need", "my", "task.", "help", "me", "here.",
        // scene attributes
        "red", "green", "blue", "yellow", "circle", "square", "triangle", "small", "large",
        "left", "right", "of", "above", "below",
        // rd lexicon
        "warm-colored", "cool-colored", "round", "big", "little", "corners", "with", "no",
        "three", "four", "it",
        // vqa
        "How", "many", "shapes", "are", "There", "The", "objects", "shape", "color", "colors",
        "colors?", "warm", "cool", "Which", "Is", "does", "a", "A", "has", "have?", "or",
        "round?", "circle?", "square?", "triangle?", "cool-colored?", "1", "2", "3", "4",
    };
    return Vocab(std::move(t));
  }();
  return vocab;
}

int Vocab::id(const std::string& token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) throw Error("out-of-vocabulary word: '" + token + "'");
  return it->second;
}

const std::string& Vocab::token(int id) const {
  require(id >= 0 && size_t(id) < tokens_.size(), "vocab: id out of range: " + std::to_string(id));
  return tokens_[size_t(id)];
}

bool Vocab::contains(const std::string& token) const { return ids_.count(token) > 0; }

std::vector<int> Vocab::tokenize(const std::string& text) const {
  std::vector<int> out;
  std::istringstream in(text);
  std::string word;
  while (in >> word) out.push_back(id(word));
  return out;
}

std::string Vocab::detokenize(const std::vector<int>& ids) const {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

namespace {

const std::vector<std::pair<std::string, std::string>>& rec_templates() {
  // Paraphrase pool; every variant keeps the canonical instruction suffix.
  static const std::vector<std::pair<std::string, std::string>> pool = {
      {"What is ", " in this image? Please output object location."},
      {"Where is ", " in this image? Please output object location."},
      {"Can you locate ", " in this image? Please output object location."},
      {"Find ", " in this image. Please output object location."},
  };
  return pool;
}

int count_det(const std::vector<int>& answer_ids) {
  return int(std::count(answer_ids.begin(), answer_ids.end(), Vocab::kDet));
}

std::vector<int> det_indices_in_answer(const std::string& answer, const Vocab& vocab) {
  std::vector<int> out;
  const auto ids = vocab.tokenize(answer);
  for (size_t i = 0; i < ids.size(); ++i)
    if (ids[i] == Vocab::kDet) out.push_back(int(i));
  return out;
}

}  // namespace

int rec_template_count() { return int(rec_templates().size()); }

Conversation format_sample(const RawAnnotation& raw, DataType type, Rng& rng) {
  Conversation conv;
  conv.data_type = type;
  std::string user, answer;
  switch (type) {
    case DataType::Od:
      require(!raw.category.empty(), "format_sample: od sample missing category");
      user = "<image> Please detect the " + raw.category + " in this image.";
      answer = "Sure, <DET> .";
      conv.detector_text = raw.category;
      break;
    case DataType::Rec:
    case DataType::RdShort: {
      require(!raw.caption.empty(), "format_sample: rec/rd_short sample missing caption");
      const auto& tpl = rng.choice(rec_templates());
      user = "<image> " + tpl.first + raw.caption + tpl.second;
      answer = "It is <DET> .";
      conv.detector_text = raw.caption;
      break;
    }
    case DataType::RdLong:
      require(!raw.question.empty(), "format_sample: rd_long sample missing question");
      require(!raw.reason.empty(), "format_sample: rd_long sample missing reason");
      user = "<image> " + raw.question + " Please output object location and explain the reason.";
      answer = "Sure, the detection result is <DET> , " + raw.reason + " .";
      conv.detector_text = raw.question;
      break;
    case DataType::Vqa:
      require(!raw.vqa_question.empty(), "format_sample: vqa sample missing question");
      require(!raw.vqa_answer.empty(), "format_sample: vqa sample missing answer");
      user = "<image> " + raw.vqa_question;
      answer = raw.vqa_answer;
      conv.detector_text.clear();
      break;
  }
  conv.turns = {{"user", user}, {"assistant", answer}};
  conv.det_positions = det_indices_in_answer(answer, Vocab::standard());
  if (has_detection(type))
    require(!conv.det_positions.empty(), "format_sample: detection answer lost its <DET>");
  else
    require(conv.det_positions.empty(), "format_sample: vqa answer contains <DET>");
  return conv;
}

std::string extract_caption(const Conversation& conv) {
  require(conv.data_type != DataType::Vqa, "extract_caption: vqa conversations carry no caption");
  require(!conv.detector_text.empty(), "extract_caption: conversation has empty detector text");
  return conv.detector_text;
}

EncodedConv encode_conversation(const Conversation& conv, const Vocab& vocab, bool det_only) {
  EncodedConv enc;
  enc.ids.push_back(Vocab::kBos);
  enc.loss_mask.push_back(0);
  bool has_assistant = false;
  for (const auto& turn : conv.turns) {
    const bool assistant = turn.role == "assistant";
    require(assistant || turn.role == "user", "encode: unknown role " + turn.role);
    has_assistant |= assistant;
    enc.ids.push_back(assistant ? Vocab::kAssistant : Vocab::kUser);
    enc.loss_mask.push_back(0);
    for (int id : vocab.tokenize(turn.text)) {
      enc.ids.push_back(id);
      enc.loss_mask.push_back(assistant ? 1 : 0);
      if (id == Vocab::kImage) enc.image_pos = int(enc.ids.size()) - 1;
      if (id == Vocab::kDet && assistant) enc.det_positions.push_back(int(enc.ids.size()) - 1);
    }
  }
  require(has_assistant, "encode: conversation has no assistant turn");
  enc.ids.push_back(Vocab::kEos);
  enc.loss_mask.push_back(1);
  if (det_only) {
    std::fill(enc.loss_mask.begin(), enc.loss_mask.end(), 0);
    for (int p : enc.det_positions) enc.loss_mask[size_t(p)] = 1;
    enc.loss_mask.back() = 1;
  }
  return enc;
}

std::vector<uint8_t> supervision_mask(const Conversation& conv, const Vocab& vocab) {
  return encode_conversation(conv, vocab).loss_mask;
}

}  // namespace lmdet
