#include <algorithm>
#include <cctype>
#include <sstream>

#include "gradgen/vlm.hpp"

namespace gradgen::vlm {

Vocabulary::Vocabulary() {
  const char* grammar_words[] = {
      "<pad>", "<unk>", "a",    "the",   "cube", "cup",    "dish",  "wall",
      "gripper", "arm",  "grasp", "put",  "move", "to",    "on",    "of",
      "is",    "side", "near",  "far",  "from", "left",   "right", "back",
      "red",   "green", "blue", "yellow", "magenta"};
  for (const char* w : grammar_words) {
    ids_[w] = int(words_.size());
    words_.push_back(w);
  }
}

const Vocabulary& Vocabulary::instance() {
  static Vocabulary v;
  return v;
}

int Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

std::vector<int64_t> Vocabulary::tokenize(const std::string& caption) const {
  std::string lowered = caption;
  std::transform(lowered.begin(), lowered.end(), lowered.begin(),
                 [](unsigned char c) { return char(std::tolower(c)); });
  std::istringstream is(lowered);
  std::vector<int64_t> out;
  std::string tok;
  while (is >> tok) out.push_back(id(tok));
  return out;
}

std::vector<int64_t> Vocabulary::encode_padded(const std::string& caption) const {
  std::vector<int64_t> toks = tokenize(caption);
  if (toks.empty()) throw std::invalid_argument("empty caption");
  toks.resize(kMaxCaption, kPad);
  return toks;
}

bool Vocabulary::all_known(const std::string& caption) const {
  for (int64_t t : tokenize(caption))
    if (t == kUnk) return false;
  return true;
}

}  // namespace gradgen::vlm
