#include "hicap/text.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include "hicap/error.hpp"

namespace hicap::text {

namespace {

const char* const kSpecialTokens[kNumSpecial] = {"<bos>", "<eos>", "<pad>", "<sep>", "<unk>"};

bool is_word_char(char c) {
  const auto u = static_cast<unsigned char>(c);
  return std::isalnum(u) || c == '\'' || c == '-' || u >= 0x80;
}

}  // namespace

bool is_punctuation_token(std::string_view token) {
  return !token.empty() && std::none_of(token.begin(), token.end(), is_word_char);
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    // Leading/trailing apostrophes and hyphens are quoting, not word content.
    std::size_t b = 0, e = word.size();
    while (b < e && (word[b] == '\'' || word[b] == '-')) ++b;
    while (e > b && (word[e - 1] == '\'' || word[e - 1] == '-')) --e;
    if (e > b) out.emplace_back(word.substr(b, e - b));
    word.clear();
  };
  for (char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isspace(u)) {
      flush();
    } else if (is_word_char(c)) {
      word.push_back(static_cast<char>(std::tolower(u)));
    } else {
      flush();
      out.emplace_back(1, c);
    }
  }
  flush();
  while (!out.empty() && is_punctuation_token(out.back())) out.pop_back();
  return out;
}

std::string normalize(std::string_view text) {
  std::string out;
  for (const auto& tok : tokenize(text)) {
    if (!out.empty()) out.push_back(' ');
    out += tok;
  }
  return out;
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary Vocabulary::build(std::span<const std::string> corpus, int min_freq) {
  if (corpus.empty()) throw UsageError("build_vocab: empty corpus");
  if (min_freq < 1) throw UsageError("build_vocab: min_freq must be positive");
  std::map<std::string, std::int64_t> counts;
  for (const auto& line : corpus) {
    for (auto& tok : tokenize(line)) ++counts[tok];
  }
  std::vector<std::pair<std::string, std::int64_t>> kept;
  for (auto& [tok, n] : counts) {
    if (n >= min_freq) kept.emplace_back(tok, n);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });

  Vocabulary v;
  v.min_freq_ = min_freq;
  for (const char* s : kSpecialTokens) {
    v.tokens_.emplace_back(s);
    v.freqs_.push_back(0);
  }
  for (auto& [tok, n] : kept) {
    v.tokens_.push_back(tok);
    v.freqs_.push_back(n);
  }
  v.index();
  return v;
}

void Vocabulary::index() {
  ids_.clear();
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw DataError("vocabulary: duplicate token '" + tokens_[i] + "'");
    }
  }
}

std::vector<int> Vocabulary::encode_words(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& tok : tokenize(text)) ids.push_back(id(tok));
  return ids;
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> ids{kBos};
  for (int i : encode_words(text)) ids.push_back(i);
  ids.push_back(kEos);
  return ids;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (int i : ids) {
    if (i == kBos || i == kEos || i == kPad || i == kSep) continue;
    if (!out.empty()) out.push_back(' ');
    out += token(i);
  }
  return out;
}

int Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view token) const { return ids_.count(std::string(token)) != 0; }

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw UsageError("vocabulary: id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::int64_t Vocabulary::frequency(int id) const {
  token(id);
  return freqs_[static_cast<std::size_t>(id)];
}

nlohmann::json Vocabulary::to_json() const {
  nlohmann::json specials = nlohmann::json::object();
  for (int i = 0; i < kNumSpecial; ++i) specials[kSpecialTokens[i]] = i;
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t i = kNumSpecial; i < tokens_.size(); ++i) {
    entries.push_back({{"token", tokens_[i]}, {"id", i}, {"frequency", freqs_[i]}});
  }
  return {{"specials", specials}, {"min_freq", min_freq_}, {"tokens", entries}};
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  try {
    Vocabulary v;
    v.min_freq_ = j.at("min_freq").get<int>();
    const auto& specials = j.at("specials");
    for (int i = 0; i < kNumSpecial; ++i) {
      if (specials.at(kSpecialTokens[i]).get<int>() != i) {
        throw DataError(std::string("vocabulary: special token ") + kSpecialTokens[i] + " has a non-standard id");
      }
      v.tokens_.emplace_back(kSpecialTokens[i]);
      v.freqs_.push_back(0);
    }
    const auto& entries = j.at("tokens");
    v.tokens_.resize(kNumSpecial + entries.size());
    v.freqs_.resize(kNumSpecial + entries.size(), 0);
    std::vector<bool> seen(v.tokens_.size(), false);
    for (const auto& e : entries) {
      const auto id = e.at("id").get<std::size_t>();
      if (id < kNumSpecial || id >= v.tokens_.size() || seen[id]) {
        throw DataError("vocabulary: invalid or repeated id " + std::to_string(id));
      }
      seen[id] = true;
      v.tokens_[id] = e.at("token").get<std::string>();
      v.freqs_[id] = e.at("frequency").get<std::int64_t>();
    }
    v.index();
    return v;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("vocabulary: malformed JSON: ") + e.what());
  }
}

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = fnv1a("");
  for (const auto& t : tokens_) {
    h = fnv1a(t, h);
    h = fnv1a(std::string_view("\x1f", 1), h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Lemmatizer

namespace {

// Irregular forms and words the suffix rules would damage.
const std::unordered_map<std::string_view, std::string_view>& irregulars() {
  static const std::unordered_map<std::string_view, std::string_view> table = {
      // be / have / do / go
      {"am", "be"}, {"is", "be"}, {"are", "be"}, {"was", "be"}, {"were", "be"}, {"been", "be"}, {"being", "be"},
      {"has", "have"}, {"had", "have"}, {"having", "have"},
      {"does", "do"}, {"did", "do"}, {"done", "do"}, {"doing", "do"},
      {"goes", "go"}, {"went", "go"}, {"gone", "go"}, {"going", "go"},
      // irregular verbs
      {"ran", "run"}, {"made", "make"}, {"took", "take"}, {"taken", "take"}, {"came", "come"},
      {"got", "get"}, {"gotten", "get"}, {"gave", "give"}, {"given", "give"}, {"saw", "see"}, {"seen", "see"},
      {"knew", "know"}, {"known", "know"}, {"threw", "throw"}, {"thrown", "throw"}, {"stood", "stand"},
      {"sat", "sit"}, {"held", "hold"}, {"kept", "keep"}, {"fell", "fall"}, {"fallen", "fall"}, {"rose", "rise"},
      {"risen", "rise"}, {"swung", "swing"}, {"spun", "spin"}, {"bent", "bend"}, {"struck", "strike"},
      {"caught", "catch"}, {"brought", "bring"}, {"thought", "think"}, {"taught", "teach"}, {"began", "begin"},
      {"begun", "begin"}, {"drew", "draw"}, {"drawn", "draw"}, {"drove", "drive"}, {"driven", "drive"},
      {"ate", "eat"}, {"eaten", "eat"}, {"flew", "fly"}, {"flown", "fly"}, {"found", "find"}, {"felt", "feel"},
      {"fought", "fight"}, {"forgot", "forget"}, {"froze", "freeze"}, {"frozen", "freeze"}, {"grew", "grow"},
      {"grown", "grow"}, {"hid", "hide"}, {"hidden", "hide"}, {"knelt", "kneel"}, {"laid", "lay"}, {"led", "lead"},
      {"leapt", "leap"}, {"lost", "lose"}, {"met", "meet"}, {"paid", "pay"}, {"rode", "ride"}, {"ridden", "ride"},
      {"rang", "ring"}, {"said", "say"}, {"sang", "sing"}, {"sung", "sing"}, {"sank", "sink"}, {"shook", "shake"},
      {"shaken", "shake"}, {"shot", "shoot"}, {"slid", "slide"}, {"slept", "sleep"}, {"spoke", "speak"},
      {"spoken", "speak"}, {"spent", "spend"}, {"stole", "steal"}, {"stolen", "steal"}, {"stuck", "stick"},
      {"stung", "sting"}, {"strode", "stride"}, {"swam", "swim"}, {"swum", "swim"}, {"swept", "sweep"},
      {"told", "tell"}, {"tore", "tear"}, {"torn", "tear"}, {"understood", "understand"}, {"woke", "wake"},
      {"wore", "wear"}, {"worn", "wear"}, {"won", "win"}, {"wrote", "write"}, {"written", "write"},
      {"crept", "creep"}, {"dug", "dig"}, {"leant", "lean"}, {"sped", "speed"}, {"sprang", "spring"},
      {"sprung", "spring"}, {"broke", "break"}, {"broken", "break"}, {"chose", "choose"}, {"chosen", "choose"},
      {"built", "build"}, {"bought", "buy"}, {"sent", "send"}, {"sought", "seek"}, {"meant", "mean"},
      {"heard", "hear"}, {"fed", "feed"}, {"bled", "bleed"},
      // forms the rules get wrong
      {"used", "use"}, {"using", "use"}, {"dying", "die"}, {"died", "die"}, {"lying", "lie"}, {"lied", "lie"},
      {"tying", "tie"}, {"tied", "tie"}, {"added", "add"}, {"adding", "add"}, {"changing", "change"},
      {"changed", "change"}, {"lunging", "lunge"}, {"lunged", "lunge"}, {"arranging", "arrange"},
      {"squeezing", "squeeze"}, {"squeezed", "squeeze"},
      // irregular nouns
      {"men", "man"}, {"women", "woman"}, {"feet", "foot"}, {"teeth", "tooth"}, {"children", "child"},
      {"people", "person"}, {"mice", "mouse"}, {"geese", "goose"}, {"calves", "calf"}, {"halves", "half"},
      {"shelves", "shelf"}, {"lives", "life"}, {"knives", "knife"}, {"wives", "wife"},
      // left alone
      {"during", "during"}, {"nothing", "nothing"}, {"something", "something"}, {"anything", "anything"},
      {"everything", "everything"}, {"morning", "morning"}, {"evening", "evening"}, {"ceiling", "ceiling"},
      {"always", "always"}, {"perhaps", "perhaps"}, {"towards", "towards"}, {"backwards", "backwards"},
      {"forwards", "forwards"}, {"upwards", "upwards"}, {"downwards", "downwards"}, {"sideways", "sideways"},
      {"afterwards", "afterwards"}, {"sometimes", "sometimes"}, {"whereas", "whereas"}, {"hundred", "hundred"},
      {"news", "news"}, {"series", "series"}, {"species", "species"}, {"physics", "physics"},
  };
  return table;
}

bool is_vowel(const std::string& w, std::size_t i) {
  switch (w[i]) {
    case 'a':
    case 'e':
    case 'i':
    case 'o':
    case 'u':
      return true;
    case 'y':
      return i > 0 && !is_vowel(w, i - 1);
    default:
      return false;
  }
}

bool is_consonant(const std::string& w, std::size_t i) {
  return std::isalpha(static_cast<unsigned char>(w[i])) && !is_vowel(w, i);
}

bool has_vowel(const std::string& w) {
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (is_vowel(w, i)) return true;
  }
  return false;
}

bool ends_with(const std::string& w, std::string_view suffix) {
  return w.size() >= suffix.size() && w.compare(w.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Number of vowel-consonant sequences (Porter's measure).
int measure(const std::string& w) {
  int m = 0;
  bool prev_vowel = false;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const bool v = is_vowel(w, i);
    if (prev_vowel && !v) ++m;
    prev_vowel = v;
  }
  return m;
}

// Repairs a stem left by removing -ing / -ed.
std::string restore_stem(std::string stem) {
  const std::size_t n = stem.size();
  if (n >= 2 && stem[n - 1] == stem[n - 2] && is_consonant(stem, n - 1) &&
      std::string_view("lsz").find(stem[n - 1]) == std::string_view::npos) {
    stem.pop_back();  // running -> run
    return stem;
  }
  if (ends_with(stem, "at") || ends_with(stem, "bl") || ends_with(stem, "iz") || ends_with(stem, "v") ||
      ends_with(stem, "u") || ends_with(stem, "nc") || ends_with(stem, "rc") || ends_with(stem, "dg")) {
    return stem + "e";
  }
  if (n >= 2 && stem[n - 1] == 's' && is_vowel(stem, n - 2)) return stem + "e";  // raising -> raise
  if (n >= 3 && measure(stem) == 1 && is_consonant(stem, n - 3) && is_vowel(stem, n - 2) &&
      is_consonant(stem, n - 1) && std::string_view("wxy").find(stem[n - 1]) == std::string_view::npos) {
    return stem + "e";  // waving -> wave
  }
  return stem;
}

std::string lemma_step(const std::string& w) {
  if (auto it = irregulars().find(w); it != irregulars().end()) return std::string(it->second);
  if (w.size() < 3 || !std::all_of(w.begin(), w.end(), [](char c) { return std::isalpha(static_cast<unsigned char>(c)); })) {
    return w;
  }
  const std::size_t n = w.size();

  if (ends_with(w, "ies") && n > 4) return w.substr(0, n - 3) + "y";
  if (ends_with(w, "ied") && n > 4) return w.substr(0, n - 3) + "y";
  if (ends_with(w, "es") && n > 3) {
    const std::string stem = w.substr(0, n - 2);
    if (ends_with(stem, "ss") || ends_with(stem, "x") || ends_with(stem, "z") || ends_with(stem, "ch") ||
        ends_with(stem, "sh")) {
      return stem;  // boxes -> box
    }
    return w.substr(0, n - 1);  // moves -> move
  }
  if (ends_with(w, "s")) {
    if (ends_with(w, "ss") || ends_with(w, "us") || ends_with(w, "is") || n < 4) return w;
    return w.substr(0, n - 1);
  }
  if (ends_with(w, "ing")) {
    const std::string stem = w.substr(0, n - 3);
    if (stem.size() < 2 || !has_vowel(stem)) return w;
    return restore_stem(stem);
  }
  if (ends_with(w, "ed")) {
    if (ends_with(w, "eed")) return w;
    const std::string stem = w.substr(0, n - 2);
    if (stem.size() < 2 || !has_vowel(stem)) return w;
    return restore_stem(stem);
  }
  return w;
}

}  // namespace

std::string lemmatize_word(std::string_view word) {
  std::string current(word);
  // Each rule shortens the word or maps to a dictionary fixed point.
  for (int i = 0; i < 8; ++i) {
    std::string next = lemma_step(current);
    if (next == current) break;
    current = std::move(next);
  }
  return current;
}

std::string lemmatize(std::string_view text) {
  std::string out;
  for (const auto& tok : tokenize(text)) {
    if (!out.empty()) out.push_back(' ');
    out += is_punctuation_token(tok) ? tok : lemmatize_word(tok);
  }
  return out;
}

}  // namespace hicap::text
