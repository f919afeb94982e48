#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "hicap/nn.hpp"
#include "hicap/transformer.hpp"
#include "hicap/types.hpp"

namespace hicap::motion {

struct EncoderConfig {
  std::size_t patch_t = 16;  // frames per patch
  std::size_t patch_j = 32;  // channels per patch
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t max_patches = 256;  // positional embedding capacity

  void validate() const;
};

std::size_t patch_count(std::size_t frames, std::size_t channels, const EncoderConfig& cfg);

// Zero-pads to multiples of the patch size and flattens each patch row-major.
// Output is [P, patch_t * patch_j] with patches in row-major grid order.
nn::Tensor patchify(const MotionTensor& m, const EncoderConfig& cfg);

// Inverse of patchify; the zero padding is cropped back to `frames` x `channels`.
MotionTensor unpatchify(const nn::Tensor& patches, std::size_t frames, std::size_t channels,
                        const EncoderConfig& cfg);

// Patch projection + learned positions + pre-norm transformer blocks + final
// layer norm. Parameters live under `<prefix>` in the shared ParameterSet.
class MotionEncoder {
 public:
  MotionEncoder(nn::ParameterSet& params, const std::string& prefix, const EncoderConfig& cfg, double init_std,
                std::mt19937_64& rng);

  // [P, d_model]
  nn::Var encode(const MotionTensor& m) const;
  const EncoderConfig& config() const noexcept { return cfg_; }

 private:
  EncoderConfig cfg_;
  detail::Linear proj_;
  nn::Var pos_;
  std::vector<detail::TransformerBlock> blocks_;
  detail::LayerNorm ln_out_;
};

}  // namespace hicap::motion
