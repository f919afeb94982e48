#include <cmath>
#include <random>

#include <doctest.h>

#include "hicap/error.hpp"
#include "hicap/text.hpp"
#include "hicap/text_decoder.hpp"

using namespace hicap;
using namespace hicap::decoder;

namespace {

struct Toy {
  nn::ParameterSet params;
  std::unique_ptr<TextDecoder> td;

  explicit Toy(std::size_t vocab = 12, std::uint64_t seed = 1, double init_std = 0.5) {
    DecoderConfig cfg;
    cfg.d_model = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.vocab_size = vocab;
    cfg.max_seq_len = 32;
    std::mt19937_64 rng(seed);
    td = std::make_unique<TextDecoder>(params, "td.", cfg, init_std, rng);
  }
  std::vector<double>& value(const std::string& name) { return params.at("td." + name)->value.storage(); }
};

nn::Var random_prefix(std::size_t rows, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return nn::constant(nn::random_normal({rows, d}, 1.0, rng));
}

}  // namespace

TEST_SUITE("text_decoder") {
  TEST_CASE("NLL equals a per-position softmax loop") {
    Toy toy;
    const auto prefix = random_prefix(3, 8, 2);
    const std::vector<int> target = {text::kBos, 7, 9, 5, 11, text::kEos};
    for (Mode mode : {Mode::lowlevel, Mode::final}) {
      double expected = 0.0;
      for (std::size_t t = 0; t + 1 < target.size(); ++t) {
        // Fresh forward pass over target[0..t]; the last row predicts target[t+1].
        const std::vector<int> seen(target.begin(), target.begin() + static_cast<std::ptrdiff_t>(t + 1));
        const auto logits = toy.td->logits(prefix, mode, seen)->value;
        const std::size_t r = logits.rows() - 1;
        double mx = -INFINITY;
        for (std::size_t v = 0; v < logits.cols(); ++v) mx = std::max(mx, logits.at(r, v));
        double z = 0.0;
        for (std::size_t v = 0; v < logits.cols(); ++v) z += std::exp(logits.at(r, v) - mx);
        expected += -(logits.at(r, static_cast<std::size_t>(target[t + 1])) - mx - std::log(z));
      }
      CHECK(toy.td->nll(prefix, mode, target)->value.item() == doctest::Approx(expected).epsilon(1e-12));
    }
  }

  TEST_CASE("uniform output gives T ln V") {
    Toy toy(12);
    for (auto& v : toy.value("tok_emb")) v = 0.0;  // tied head -> all logits zero
    const auto prefix = random_prefix(2, 8, 3);
    const std::vector<int> target = {text::kBos, 6, 7, 8, text::kEos};
    CHECK(toy.td->nll(prefix, Mode::final, target)->value.item() == doctest::Approx(4 * std::log(12.0)));
    const std::vector<int> empty = {text::kBos, text::kEos};
    CHECK(toy.td->nll(prefix, Mode::final, empty)->value.item() == doctest::Approx(std::log(12.0)));
  }

  TEST_CASE("mode changes the prediction") {
    Toy toy;
    const auto prefix = random_prefix(2, 8, 4);
    const std::vector<int> target = {text::kBos, 6, text::kEos};
    CHECK(toy.td->nll(prefix, Mode::final, target)->value.item() !=
          doctest::Approx(toy.td->nll(prefix, Mode::lowlevel, target)->value.item()));
  }

  TEST_CASE("caption tokens never see later tokens") {
    Toy toy;
    const auto prefix = random_prefix(3, 8, 5);
    const std::vector<int> a = {text::kBos, 6, 7, 8};
    const std::vector<int> b = {text::kBos, 6, 10, 11};
    const auto la = toy.td->logits(prefix, Mode::final, a)->value;
    const auto lb = toy.td->logits(prefix, Mode::final, b)->value;
    for (std::size_t v = 0; v < la.cols(); ++v) {
      CHECK(la.at(0, v) == lb.at(0, v));
      CHECK(la.at(1, v) == lb.at(1, v));
    }
  }

  TEST_CASE("EOS-first decoder emits an empty caption") {
    Toy toy;
    auto& emb = toy.value("tok_emb");
    for (auto& v : emb) v = 0.0;
    emb[static_cast<std::size_t>(text::kEos) * 8] = 1.0;
    for (auto& v : toy.value("ln_out.g")) v = 0.0;
    auto& bias = toy.value("ln_out.b");
    for (auto& v : bias) v = 0.0;
    bias[0] = 1.0;
    const auto g = toy.td->generate(random_prefix(2, 8, 6), Mode::final, 10);
    CHECK(g.ids.empty());
    CHECK_FALSE(g.truncated);
  }

  TEST_CASE("generation is deterministic, bounded and skips reserved ids") {
    Toy toy;
    const auto prefix = random_prefix(2, 8, 7);
    const auto a = toy.td->generate(prefix, Mode::lowlevel, 6);
    const auto b = toy.td->generate(prefix, Mode::lowlevel, 6);
    CHECK(a.ids == b.ids);
    CHECK(a.ids.size() <= 6);
    if (a.ids.size() == 6) CHECK(a.truncated);
    for (int id : a.ids) {
      CHECK(id != text::kBos);
      CHECK(id != text::kPad);
      CHECK(id != text::kSep);
      CHECK(id != text::kEos);
    }
  }

  TEST_CASE("memorizes a single caption") {
    Toy toy(12, 8, 0.1);
    const auto prefix = random_prefix(2, 8, 9);
    const std::vector<int> target = {text::kBos, 9, 6, 11, 7, text::kEos};
    toy.params.zero_grad();
    nn::Adam adam(nn::AdamConfig{1e-2});
    for (int step = 0; step < 200; ++step) {
      nn::backward(toy.td->nll(prefix, Mode::final, target));
      adam.step(toy.params);
    }
    const auto g = toy.td->generate(prefix, Mode::final, 10);
    CHECK(g.ids == std::vector<int>(target.begin() + 1, target.end() - 1));
  }

  TEST_CASE("prefix layout") {
    Toy toy;
    const auto f = random_prefix(4, 8, 10);
    CHECK(toy.td->build_prefix({}, f)->value == f->value);
    const std::vector<std::vector<int>> two = {{6, 7, 8}, {9, 10, 11, 6}};
    const auto p = toy.td->build_prefix(two, f);
    CHECK(p->value.rows() == 3 + 1 + 4 + 1 + 4);
    const std::vector<std::vector<int>> swapped = {two[1], two[0]};
    CHECK_FALSE(toy.td->build_prefix(swapped, f)->value == p->value);
  }

  TEST_CASE("sequence overflow is rejected") {
    Toy toy;
    const auto prefix = random_prefix(30, 8, 11);
    const std::vector<int> target = {text::kBos, 6, 7, 8, text::kEos};
    CHECK_THROWS_AS(toy.td->nll(prefix, Mode::final, target), UsageError);
  }
}
