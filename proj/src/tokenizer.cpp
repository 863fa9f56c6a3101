#include "cbp/tokenizer.hpp"

#include <array>
#include <stdexcept>

namespace cbp::lm {

namespace {

constexpr char kAlphabet[] =
    "abcdefghijklmnopqrstuvwxyz0123456789 ?:.,!/-+=()<>*#%&';_^~@$|[";
static_assert(sizeof(kAlphabet) == 64, "63 characters plus NUL");

std::array<int, 256> build_lookup() {
  std::array<int, 256> t{};
  t.fill(Tokenizer::kUnkId);
  for (int i = 0; i < 63; ++i) {
    t[static_cast<unsigned char>(kAlphabet[i])] = i;
  }
  return t;
}

const std::array<int, 256> kLookup = build_lookup();

}  // namespace

std::vector<int> Tokenizer::encode(const std::string& text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(kLookup[static_cast<unsigned char>(c)]);
  return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= kVocabSize) {
      throw std::out_of_range("token id " + std::to_string(id) +
                              " outside vocab " + std::to_string(kVocabSize));
    }
    out.push_back(id == kUnkId ? '}' : kAlphabet[id]);
  }
  return out;
}

bool Tokenizer::in_alphabet(char c) {
  return kLookup[static_cast<unsigned char>(c)] != kUnkId;
}

}  // namespace cbp::lm
