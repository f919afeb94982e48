#pragma once

// Pre-norm transformer pieces shared by the motion encoder, text decoder and
// text encoder.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "hicap/nn.hpp"

namespace hicap::detail {

struct Linear {
  nn::Var weight;  // [in, out]
  nn::Var bias;    // [out]

  Linear() = default;
  Linear(nn::ParameterSet& params, const std::string& path, std::size_t in, std::size_t out, double init_std,
         std::mt19937_64& rng);
  nn::Var operator()(const nn::Var& x) const { return nn::add(nn::matmul(x, weight), bias); }
};

struct LayerNorm {
  nn::Var gain;
  nn::Var bias;

  LayerNorm() = default;
  LayerNorm(nn::ParameterSet& params, const std::string& path, std::size_t width);
  nn::Var operator()(const nn::Var& x) const { return nn::layer_norm(x, gain, bias); }
};

// Rows [0, prefix) see each other; row i >= prefix sees columns <= i.
// A non-causal mask lets every row see every row.
struct AttentionMask {
  bool causal = false;
  std::size_t prefix = 0;

  std::vector<std::uint8_t> build(std::size_t n) const;
};

class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(nn::ParameterSet& params, const std::string& path, std::size_t d_model, std::size_t n_heads,
                   double init_std, std::mt19937_64& rng);

  nn::Var forward(const nn::Var& x, const std::vector<std::uint8_t>& mask) const;

 private:
  std::size_t d_model_ = 0;
  std::size_t n_heads_ = 0;
  LayerNorm ln_attn_;
  Linear q_, k_, v_, o_;
  LayerNorm ln_mlp_;
  Linear up_, down_;
};

}  // namespace hicap::detail
