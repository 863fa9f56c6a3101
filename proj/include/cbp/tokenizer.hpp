#pragma once

#include <string>
#include <vector>

namespace cbp::lm {

// Byte-level tokenizer over a fixed 63-character alphabet plus UNK.
// Vocabulary size is exactly 64; ids 0..62 are alphabet characters in order,
// id 63 is UNK.
class Tokenizer {
 public:
  static constexpr int kVocabSize = 64;
  static constexpr int kUnkId = 63;

  static std::vector<int> encode(const std::string& text);
  static std::string decode(const std::vector<int>& ids);
  static bool in_alphabet(char c);
};

struct TokenSequence {
  std::vector<int> ids;
  int length() const { return static_cast<int>(ids.size()); }
};

struct Example {
  TokenSequence instruction_ids;
  TokenSequence answer_ids;
};

}  // namespace cbp::lm
