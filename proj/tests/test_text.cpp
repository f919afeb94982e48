#include <set>

#include <doctest.h>

#include "hicap/text.hpp"

using namespace hicap;
using namespace hicap::text;

TEST_SUITE("text") {
  TEST_CASE("tokenize lowercases and splits punctuation") {
    CHECK(tokenize("A person walks, then RUNS.") ==
          std::vector<std::string>{"a", "person", "walks", ",", "then", "runs"});
    CHECK(normalize("  the  man's  left-hand  ") == "the man's left-hand");
    CHECK(tokenize("").empty());
  }

  TEST_CASE("vocabulary ids follow frequency then token order") {
    const std::vector<std::string> corpus = {"a a b"};
    const auto v = Vocabulary::build(corpus, 1);
    CHECK(v.size() == kNumSpecial + 2);
    CHECK(v.id("a") == kNumSpecial);
    CHECK(v.id("b") == kNumSpecial + 1);
    const auto again = Vocabulary::build(corpus, 1);
    CHECK(v == again);
    CHECK(v.hash() == again.hash());

    const auto strict = Vocabulary::build(corpus, 2);
    CHECK(strict.size() == kNumSpecial + 1);
    CHECK(strict.encode_words("b") == std::vector<int>{kUnk});
  }

  TEST_CASE("encode frames with BOS and EOS") {
    const std::vector<std::string> corpus = {"the person walks"};
    const auto v = Vocabulary::build(corpus, 1);
    CHECK(v.encode("") == std::vector<int>{kBos, kEos});
    const auto ids = v.encode("the person walks");
    CHECK(ids.front() == kBos);
    CHECK(ids.back() == kEos);
    CHECK(v.decode(ids) == "the person walks");
    const auto unk = v.encode("the robot walks");
    CHECK(unk[2] == kUnk);
    CHECK(v.decode(unk) == "the <unk> walks");
  }

  TEST_CASE("vocabulary JSON round trip") {
    const std::vector<std::string> corpus = {"one two two three three three"};
    const auto v = Vocabulary::build(corpus, 1);
    const auto back = Vocabulary::from_json(v.to_json());
    CHECK(back == v);
    CHECK(back.hash() == v.hash());
  }

  TEST_CASE("lemmatizer examples") {
    CHECK(lemmatize("runs running ran") == "run run run");
    CHECK(lemmatize("run") == "run");
    CHECK(lemmatize("walked quickly") == "walk quickly");
    CHECK(lemmatize("the children threw the balls") == "the child throw the ball");
    CHECK(lemmatize("A person is Jumping.") == "a person be jump");
  }

  TEST_CASE("lemmatizer is idempotent word by word") {
    const std::vector<std::string> words = {"running", "stopped", "carries", "watches", "sitting", "swimming",
                                            "moves",   "bodies",  "legs",    "knees",   "was",     "feet",
                                            "lying",   "tried",   "hopping", "glasses", "does",    "went"};
    for (const auto& w : words) {
      const auto once = lemmatize_word(w);
      CHECK(lemmatize_word(once) == once);
    }
  }

  TEST_CASE("fnv1a reference values") {
    // Published FNV-1a 64-bit test vectors.
    CHECK(fnv1a("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a("foobar") == 0x85944171f73967e8ULL);
  }
}
