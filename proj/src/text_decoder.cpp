#include "hicap/text_decoder.hpp"

#include <limits>

#include "hicap/error.hpp"
#include "hicap/text.hpp"

namespace hicap::decoder {

void DecoderConfig::validate() const {
  if (n_heads < 1 || d_model % n_heads != 0) {
    throw UsageError("text decoder: d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                     std::to_string(n_heads));
  }
  if (vocab_size <= static_cast<std::size_t>(text::kNumSpecial)) {
    throw UsageError("text decoder: vocabulary has no word tokens");
  }
  if (max_seq_len < 2) throw UsageError("text decoder: max_seq_len must be at least 2");
}

TextDecoder::TextDecoder(nn::ParameterSet& params, const std::string& prefix, const DecoderConfig& cfg,
                         double init_std, std::mt19937_64& rng)
    : cfg_(cfg) {
  cfg_.validate();
  tok_emb_ = params.add(prefix + "tok_emb", nn::random_normal({cfg_.vocab_size, cfg_.d_model}, init_std, rng));
  pos_emb_ = params.add(prefix + "pos_emb", nn::random_normal({cfg_.max_seq_len, cfg_.d_model}, init_std, rng));
  mode_emb_ = params.add(prefix + "mode_emb", nn::random_normal({2, cfg_.d_model}, init_std, rng));
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    blocks_.emplace_back(params, prefix + "blocks." + std::to_string(l), cfg_.d_model, cfg_.n_heads, init_std, rng);
  }
  ln_out_ = detail::LayerNorm(params, prefix + "ln_out", cfg_.d_model);
}

nn::Var TextDecoder::build_prefix(std::span<const std::vector<int>> retrieved, const nn::Var& features) const {
  if (features->value.cols() != cfg_.d_model) {
    throw UsageError("build_prefix: feature width " + std::to_string(features->value.cols()) +
                     " differs from decoder width " + std::to_string(cfg_.d_model));
  }
  if (retrieved.empty()) return features;
  std::vector<int> ids;
  for (const auto& caption : retrieved) {
    ids.insert(ids.end(), caption.begin(), caption.end());
    ids.push_back(text::kSep);
  }
  const std::size_t rows = ids.size() + features->value.rows();
  if (rows + 1 >= cfg_.max_seq_len) {
    throw UsageError("build_prefix: " + std::to_string(rows) + " prefix rows leave no room in max_seq_len " +
                     std::to_string(cfg_.max_seq_len));
  }
  const nn::Var parts[] = {nn::embedding(tok_emb_, ids), features};
  return nn::concat_rows(parts);
}

nn::Var TextDecoder::sequence(const nn::Var& prefix, Mode mode, std::span<const int> tokens) const {
  const std::size_t p = prefix->value.rows();
  const std::size_t n = 1 + p + tokens.size();
  if (n > cfg_.max_seq_len) {
    throw UsageError("text decoder: sequence of " + std::to_string(p) + " prefix rows and " +
                     std::to_string(tokens.size()) + " tokens exceeds max_seq_len " +
                     std::to_string(cfg_.max_seq_len));
  }
  for (int id : tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) {
      throw UsageError("text decoder: token id " + std::to_string(id) + " outside vocabulary");
    }
  }
  const int mode_id = static_cast<int>(mode);
  std::vector<nn::Var> parts = {nn::embedding(mode_emb_, std::span<const int>(&mode_id, 1)), prefix};
  if (!tokens.empty()) parts.push_back(nn::embedding(tok_emb_, tokens));
  nn::Var x = nn::add(nn::concat_rows(parts), nn::slice_rows(pos_emb_, 0, n));
  const auto mask = detail::AttentionMask{true, 1 + p}.build(n);
  for (const auto& block : blocks_) x = block.forward(x, mask);
  return ln_out_(x);
}

nn::Var TextDecoder::logits(const nn::Var& prefix, Mode mode, std::span<const int> tokens) const {
  if (tokens.empty()) throw UsageError("text decoder: logits need at least one token");
  nn::Var h = sequence(prefix, mode, tokens);
  const std::size_t start = 1 + prefix->value.rows();
  return nn::matmul_nt(nn::slice_rows(h, start, tokens.size()), tok_emb_);
}

nn::Var TextDecoder::nll(const nn::Var& prefix, Mode mode, std::span<const int> target) const {
  if (target.size() < 2 || target.front() != text::kBos || target.back() != text::kEos) {
    throw UsageError("nll: target must be framed as BOS ... EOS");
  }
  if (prefix->value.rows() + target.size() > cfg_.max_seq_len) {
    throw UsageError("nll: " + std::to_string(prefix->value.rows()) + " prefix rows + " +
                     std::to_string(target.size()) + " target tokens exceed max_seq_len " +
                     std::to_string(cfg_.max_seq_len));
  }
  nn::Var lg = logits(prefix, mode, target.first(target.size() - 1));
  return nn::nll_rows(lg, target.subspan(1));
}

Generation TextDecoder::generate(const nn::Var& prefix, Mode mode, std::size_t max_len) const {
  if (max_len < 1) throw UsageError("generate: max_len must be at least 1");
  nn::NoGradGuard guard;
  Generation out;
  std::vector<int> tokens = {text::kBos};
  const std::size_t room = cfg_.max_seq_len - std::min(cfg_.max_seq_len, 1 + prefix->value.rows());
  while (true) {
    if (out.ids.size() >= max_len || tokens.size() >= room) {
      out.truncated = true;
      break;
    }
    nn::Var h = sequence(prefix, mode, tokens);
    nn::Var last = nn::slice_rows(h, h->value.rows() - 1, 1);
    const nn::Var out_logits = nn::matmul_nt(last, tok_emb_);
    const nn::Tensor& lg = out_logits->value;
    int best = -1;
    double best_v = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < lg.size(); ++v) {
      const int id = static_cast<int>(v);
      if (id == text::kBos || id == text::kPad || id == text::kSep) continue;
      if (best < 0 || lg[v] > best_v) {
        best = id;
        best_v = lg[v];
      }
    }
    if (best == text::kEos) break;
    out.ids.push_back(best);
    tokens.push_back(best);
  }
  return out;
}

}  // namespace hicap::decoder
