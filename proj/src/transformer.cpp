#include "hicap/transformer.hpp"

#include <cmath>

#include "hicap/error.hpp"

namespace hicap::detail {

Linear::Linear(nn::ParameterSet& params, const std::string& path, std::size_t in, std::size_t out, double init_std,
               std::mt19937_64& rng)
    : weight(params.add(path + ".w", nn::random_normal({in, out}, init_std, rng))),
      bias(params.add(path + ".b", nn::Tensor({out}, 0.0))) {}

LayerNorm::LayerNorm(nn::ParameterSet& params, const std::string& path, std::size_t width)
    : gain(params.add(path + ".g", nn::Tensor({width}, 1.0))), bias(params.add(path + ".b", nn::Tensor({width}, 0.0))) {}

std::vector<std::uint8_t> AttentionMask::build(std::size_t n) const {
  std::vector<std::uint8_t> allowed(n * n, 1);
  if (!causal) return allowed;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const bool ok = i < prefix ? j < prefix : j <= i;
      allowed[i * n + j] = ok ? 1 : 0;
    }
  }
  return allowed;
}

TransformerBlock::TransformerBlock(nn::ParameterSet& params, const std::string& path, std::size_t d_model,
                                   std::size_t n_heads, double init_std, std::mt19937_64& rng)
    : d_model_(d_model), n_heads_(n_heads) {
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw UsageError("d_model " + std::to_string(d_model) + " not divisible by n_heads " + std::to_string(n_heads));
  }
  ln_attn_ = LayerNorm(params, path + ".ln_attn", d_model);
  q_ = Linear(params, path + ".attn.q", d_model, d_model, init_std, rng);
  k_ = Linear(params, path + ".attn.k", d_model, d_model, init_std, rng);
  v_ = Linear(params, path + ".attn.v", d_model, d_model, init_std, rng);
  o_ = Linear(params, path + ".attn.o", d_model, d_model, init_std, rng);
  ln_mlp_ = LayerNorm(params, path + ".ln_mlp", d_model);
  up_ = Linear(params, path + ".mlp.up", d_model, 4 * d_model, init_std, rng);
  down_ = Linear(params, path + ".mlp.down", 4 * d_model, d_model, init_std, rng);
}

nn::Var TransformerBlock::forward(const nn::Var& x, const std::vector<std::uint8_t>& mask) const {
  const std::size_t head_dim = d_model_ / n_heads_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  nn::Var h = ln_attn_(x);
  nn::Var q = q_(h), k = k_(h), v = v_(h);
  std::vector<nn::Var> heads;
  heads.reserve(n_heads_);
  for (std::size_t head = 0; head < n_heads_; ++head) {
    const std::size_t c0 = head * head_dim;
    nn::Var qh = nn::slice_cols(q, c0, head_dim);
    nn::Var kh = nn::slice_cols(k, c0, head_dim);
    nn::Var vh = nn::slice_cols(v, c0, head_dim);
    nn::Var att = nn::masked_softmax_rows(nn::affine(nn::matmul_nt(qh, kh), scale), mask);
    heads.push_back(nn::matmul(att, vh));
  }
  nn::Var attended = n_heads_ == 1 ? heads[0] : nn::concat_cols(heads);
  nn::Var x1 = nn::add(x, o_(attended));
  nn::Var m = down_(nn::gelu(up_(ln_mlp_(x1))));
  return nn::add(x1, m);
}

}  // namespace hicap::detail
