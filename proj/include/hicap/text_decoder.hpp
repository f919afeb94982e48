#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "hicap/nn.hpp"
#include "hicap/transformer.hpp"

namespace hicap::decoder {

struct DecoderConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 128;

  void validate() const;
};

// Selects which caption the shared decoder produces. The mode vector is the
// first row of every input sequence.
enum class Mode { lowlevel = 0, final = 1 };

struct Generation {
  std::vector<int> ids;  // without BOS/EOS
  bool truncated = false;
};

// Causal transformer LM over [mode, prefix rows, caption tokens]. The mode row
// and prefix attend to each other bidirectionally; caption tokens attend to
// the prefix and earlier tokens. Output projection is tied to the token
// embedding table.
class TextDecoder {
 public:
  TextDecoder(nn::ParameterSet& params, const std::string& prefix, const DecoderConfig& cfg, double init_std,
              std::mt19937_64& rng);

  // Rows: r1 tokens, SEP, r2 tokens, SEP, ..., then the feature rows f.
  // `retrieved` holds word ids without BOS/EOS framing, in rank order.
  nn::Var build_prefix(std::span<const std::vector<int>> retrieved, const nn::Var& features) const;

  // Next-token logits for every position of `tokens` -> [tokens.size(), V].
  nn::Var logits(const nn::Var& prefix, Mode mode, std::span<const int> tokens) const;

  // -sum_t log p(target_t | target_<t, prefix) over a BOS ... EOS target.
  nn::Var nll(const nn::Var& prefix, Mode mode, std::span<const int> target) const;

  // Greedy decoding from BOS; BOS, PAD and SEP are never emitted and ties go
  // to the lowest id.
  Generation generate(const nn::Var& prefix, Mode mode, std::size_t max_len) const;

  const DecoderConfig& config() const noexcept { return cfg_; }
  const nn::Var& token_embedding() const noexcept { return tok_emb_; }

 private:
  nn::Var sequence(const nn::Var& prefix, Mode mode, std::span<const int> tokens) const;

  DecoderConfig cfg_;
  nn::Var tok_emb_;   // [V, d]
  nn::Var pos_emb_;   // [max_seq_len, d]
  nn::Var mode_emb_;  // [2, d]
  std::vector<detail::TransformerBlock> blocks_;
  detail::LayerNorm ln_out_;
};

}  // namespace hicap::decoder
