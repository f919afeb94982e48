#include "hicap/motion_encoder.hpp"

#include "hicap/error.hpp"

namespace hicap::motion {

namespace {
std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }
}  // namespace

void EncoderConfig::validate() const {
  if (patch_t < 1 || patch_j < 1) throw UsageError("motion encoder: patch dimensions must be at least 1");
  if (n_heads < 1 || d_model % n_heads != 0) {
    throw UsageError("motion encoder: d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                     std::to_string(n_heads));
  }
  if (max_patches < 1) throw UsageError("motion encoder: max_patches must be at least 1");
}

std::size_t patch_count(std::size_t frames, std::size_t channels, const EncoderConfig& cfg) {
  return ceil_div(frames, cfg.patch_t) * ceil_div(channels, cfg.patch_j);
}

nn::Tensor patchify(const MotionTensor& m, const EncoderConfig& cfg) {
  cfg.validate();
  if (m.frames == 0 || m.channels == 0) throw UsageError("patchify: empty motion");
  m.validate();
  const std::size_t gt = ceil_div(m.frames, cfg.patch_t), gj = ceil_div(m.channels, cfg.patch_j);
  const std::size_t len = cfg.patch_t * cfg.patch_j;
  nn::Tensor out({gt * gj, len});
  for (std::size_t pt = 0; pt < gt; ++pt) {
    for (std::size_t pj = 0; pj < gj; ++pj) {
      double* row = out.data().data() + (pt * gj + pj) * len;
      for (std::size_t dt = 0; dt < cfg.patch_t; ++dt) {
        const std::size_t t = pt * cfg.patch_t + dt;
        if (t >= m.frames) break;
        for (std::size_t dj = 0; dj < cfg.patch_j; ++dj) {
          const std::size_t j = pj * cfg.patch_j + dj;
          if (j >= m.channels) break;
          row[dt * cfg.patch_j + dj] = m.at(t, j);
        }
      }
    }
  }
  return out;
}

MotionTensor unpatchify(const nn::Tensor& patches, std::size_t frames, std::size_t channels,
                        const EncoderConfig& cfg) {
  const std::size_t gt = ceil_div(frames, cfg.patch_t), gj = ceil_div(channels, cfg.patch_j);
  if (patches.rows() != gt * gj || patches.cols() != cfg.patch_t * cfg.patch_j) {
    throw UsageError("unpatchify: patch tensor " + patches.shape_str() + " does not fit the grid");
  }
  MotionTensor m;
  m.frames = frames;
  m.channels = channels;
  m.values.assign(frames * channels, 0.0);
  for (std::size_t p = 0; p < gt * gj; ++p) {
    const std::size_t pt = p / gj, pj = p % gj;
    for (std::size_t dt = 0; dt < cfg.patch_t; ++dt) {
      for (std::size_t dj = 0; dj < cfg.patch_j; ++dj) {
        const std::size_t t = pt * cfg.patch_t + dt, j = pj * cfg.patch_j + dj;
        if (t < frames && j < channels) m.at(t, j) = patches.at(p, dt * cfg.patch_j + dj);
      }
    }
  }
  return m;
}

MotionEncoder::MotionEncoder(nn::ParameterSet& params, const std::string& prefix, const EncoderConfig& cfg,
                             double init_std, std::mt19937_64& rng)
    : cfg_(cfg) {
  cfg_.validate();
  proj_ = detail::Linear(params, prefix + "patch_proj", cfg_.patch_t * cfg_.patch_j, cfg_.d_model, init_std, rng);
  pos_ = params.add(prefix + "pos_emb", nn::random_normal({cfg_.max_patches, cfg_.d_model}, init_std, rng));
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    blocks_.emplace_back(params, prefix + "blocks." + std::to_string(l), cfg_.d_model, cfg_.n_heads, init_std, rng);
  }
  ln_out_ = detail::LayerNorm(params, prefix + "ln_out", cfg_.d_model);
}

nn::Var MotionEncoder::encode(const MotionTensor& m) const {
  nn::Tensor patches = patchify(m, cfg_);
  const std::size_t p = patches.rows();
  if (p > cfg_.max_patches) {
    throw UsageError("motion encoder: " + std::to_string(p) + " patches exceed positional capacity " +
                     std::to_string(cfg_.max_patches));
  }
  nn::Var x = nn::add(proj_(nn::constant(std::move(patches))), nn::slice_rows(pos_, 0, p));
  const auto mask = detail::AttentionMask{}.build(p);
  for (const auto& block : blocks_) x = block.forward(x, mask);
  return ln_out_(x);
}

}  // namespace hicap::motion
