#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace hicap::text {

// Reserved ids, stable across save/load.
inline constexpr int kBos = 0;
inline constexpr int kEos = 1;
inline constexpr int kPad = 2;
inline constexpr int kSep = 3;
inline constexpr int kUnk = 4;
inline constexpr int kNumSpecial = 5;

// Lowercases, splits punctuation into separate tokens, drops trailing
// punctuation tokens and collapses whitespace. Apostrophes and hyphens inside
// a word stay part of the word.
std::vector<std::string> tokenize(std::string_view text);

// tokenize() joined with single spaces.
std::string normalize(std::string_view text);

bool is_punctuation_token(std::string_view token);

class Vocabulary {
 public:
  // Ids after the specials are assigned by frequency (desc), then token (asc).
  static Vocabulary build(std::span<const std::string> corpus, int min_freq);

  // BOS w1 ... wn EOS; unknown words map to kUnk.
  std::vector<int> encode(std::string_view text) const;
  // Word ids without framing.
  std::vector<int> encode_words(std::string_view text) const;
  // Joins non-special tokens; kUnk renders as "<unk>".
  std::string decode(std::span<const int> ids) const;

  int id(std::string_view token) const;  // kUnk when absent
  bool contains(std::string_view token) const;
  const std::string& token(int id) const;
  std::int64_t frequency(int id) const;
  std::size_t size() const noexcept { return tokens_.size(); }
  int min_freq() const noexcept { return min_freq_; }

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);
  // FNV-1a over the id-ordered token list.
  std::uint64_t hash() const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.tokens_ == b.tokens_ && a.freqs_ == b.freqs_ && a.min_freq_ == b.min_freq_;
  }

 private:
  void index();

  std::vector<std::string> tokens_;
  std::vector<std::int64_t> freqs_;
  std::unordered_map<std::string, int> ids_;
  int min_freq_ = 1;
};

// Lemma of a single lowercase word: irregular-form dictionary first, then
// ordered suffix rules. Applied to a fixed point, so lemmatize_word is
// idempotent.
std::string lemmatize_word(std::string_view word);

// Normalizes, then lemmatizes word by word. Token count is preserved.
std::string lemmatize(std::string_view text);

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace hicap::text
