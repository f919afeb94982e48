#include "hicap/text_encoder.hpp"

#include "hicap/error.hpp"
#include "hicap/text.hpp"

namespace hicap::encoder {

void TextEncoderConfig::validate() const {
  if (n_heads < 1 || d_embed % n_heads != 0) {
    throw UsageError("text encoder: d_embed " + std::to_string(d_embed) + " is not divisible by n_heads " +
                     std::to_string(n_heads));
  }
  if (vocab_size <= static_cast<std::size_t>(text::kNumSpecial)) {
    throw UsageError("text encoder: vocabulary has no word tokens");
  }
  if (max_len < 2) throw UsageError("text encoder: max_len must be at least 2");
}

TextEncoder::TextEncoder(nn::ParameterSet& params, const std::string& prefix, const TextEncoderConfig& cfg,
                         double init_std, std::mt19937_64& rng)
    : cfg_(cfg) {
  cfg_.validate();
  tok_emb_ = params.add(prefix + "tok_emb", nn::random_normal({cfg_.vocab_size, cfg_.d_embed}, init_std, rng));
  pos_emb_ = params.add(prefix + "pos_emb", nn::random_normal({cfg_.max_len, cfg_.d_embed}, init_std, rng));
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    blocks_.emplace_back(params, prefix + "blocks." + std::to_string(l), cfg_.d_embed, cfg_.n_heads, init_std, rng);
  }
  ln_out_ = detail::LayerNorm(params, prefix + "ln_out", cfg_.d_embed);
}

nn::Var TextEncoder::embed(std::span<const int> ids) const {
  if (ids.empty()) throw UsageError("text encoder: empty token sequence");
  if (ids.size() > cfg_.max_len) {
    throw UsageError("text encoder: " + std::to_string(ids.size()) + " tokens exceed max_len " +
                     std::to_string(cfg_.max_len));
  }
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) {
      throw UsageError("text encoder: token id " + std::to_string(id) + " outside vocabulary");
    }
  }
  nn::Var x = nn::add(nn::embedding(tok_emb_, ids), nn::slice_rows(pos_emb_, 0, ids.size()));
  const auto mask = detail::AttentionMask{}.build(ids.size());
  for (const auto& block : blocks_) x = block.forward(x, mask);
  return nn::mean_rows(ln_out_(x));
}

std::vector<double> TextEncoder::embed_values(std::span<const int> ids) const {
  nn::NoGradGuard guard;
  return embed(ids)->value.storage();
}

nn::Var contrastive_loss(const nn::Var& anchor, const nn::Var& positive, const nn::Var& negative, double c,
                         ContrastiveForm form) {
  if (!(c >= 0.0 && c <= 1.0)) throw UsageError("contrastive loss: c must lie in [0, 1]");
  nn::Var pull = nn::affine(nn::cosine(anchor, positive), -1.0, 1.0);
  nn::Var cos_neg = nn::cosine(anchor, negative);
  nn::Var push = form == ContrastiveForm::paper ? nn::relu(nn::affine(cos_neg, -1.0, c))
                                                : nn::relu(nn::affine(cos_neg, 1.0, -c));
  return nn::add(pull, push);
}

}  // namespace hicap::encoder
