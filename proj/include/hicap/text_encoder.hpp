#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "hicap/nn.hpp"
#include "hicap/transformer.hpp"

namespace hicap::encoder {

struct TextEncoderConfig {
  std::size_t d_embed = 64;
  std::size_t n_layers = 1;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 0;
  std::size_t max_len = 128;

  void validate() const;
};

// Bidirectional transformer; the sentence embedding is the mean of the final
// layer-normed token states.
class TextEncoder {
 public:
  TextEncoder(nn::ParameterSet& params, const std::string& prefix, const TextEncoderConfig& cfg, double init_std,
              std::mt19937_64& rng);

  // `ids` is a BOS ... EOS framed sequence -> [1, d_embed].
  nn::Var embed(std::span<const int> ids) const;
  // Same as embed() without recording a graph.
  std::vector<double> embed_values(std::span<const int> ids) const;

  const TextEncoderConfig& config() const noexcept { return cfg_; }

 private:
  TextEncoderConfig cfg_;
  nn::Var tok_emb_;
  nn::Var pos_emb_;
  std::vector<detail::TransformerBlock> blocks_;
  detail::LayerNorm ln_out_;
};

enum class ContrastiveForm { paper, hinge };

// paper: 1 - cos(a, pos) + max(0, c - cos(a, neg))
// hinge: 1 - cos(a, pos) + max(0, cos(a, neg) - c)
nn::Var contrastive_loss(const nn::Var& anchor, const nn::Var& positive, const nn::Var& negative, double c,
                         ContrastiveForm form);

}  // namespace hicap::encoder
