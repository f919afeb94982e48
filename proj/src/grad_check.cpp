#include <cmath>

#include "hicap/error.hpp"
#include "hicap/training.hpp"

namespace hicap::training {

namespace {

const std::vector<std::string> kToyCorpus = {
    "a person walks forward",
    "the arms swing back and forth",
    "someone jumps up",
    "the legs bend slowly",
};

// About a thousand scalars: width 4, one head, 2x2 patches over a 4x4 motion.
TrainConfig toy_config(std::uint64_t seed) {
  TrainConfig cfg;
  cfg.d_model = 4;
  cfg.d_embed = 4;
  cfg.n_heads = 1;
  cfg.me_layers = 1;
  cfg.td_layers = 2;
  cfg.te_layers = 1;
  cfg.patch_t = 2;
  cfg.patch_j = 2;
  cfg.max_patches = 4;
  cfg.max_seq_len = 24;
  cfg.init_std = 0.5;
  cfg.k = 2;
  cfg.seed = seed;
  return cfg;
}

std::vector<int> random_caption(std::mt19937_64& rng, std::size_t vocab_size, std::size_t len) {
  std::uniform_int_distribution<int> word(text::kNumSpecial, static_cast<int>(vocab_size) - 1);
  std::vector<int> ids = {text::kBos};
  for (std::size_t i = 0; i < len; ++i) ids.push_back(word(rng));
  ids.push_back(text::kEos);
  return ids;
}

}  // namespace

std::string_view loss_term_name(LossTerm t) noexcept {
  switch (t) {
    case LossTerm::l1:
      return "l1";
    case LossTerm::l2:
      return "l2";
    default:
      return "l3";
  }
}

std::optional<LossTerm> parse_loss_term(std::string_view name) noexcept {
  if (name == "l1") return LossTerm::l1;
  if (name == "l2") return LossTerm::l2;
  if (name == "l3") return LossTerm::l3;
  return std::nullopt;
}

nlohmann::json GradCheckReport::to_json() const {
  nlohmann::json j = {{"loss", loss_term_name(term)},
                      {"trials", trials},
                      {"n_params", n_params},
                      {"max_rel_error", max_rel_error}};
  if (term == LossTerm::l2) j["form"] = form_name(form);
  return j;
}

GradCheckReport grad_check_term(LossTerm term, encoder::ContrastiveForm form, std::size_t trials,
                                std::uint64_t seed, double eps) {
  if (trials < 1) throw UsageError("grad-check: trials must be at least 1");
  if (!(eps > 0.0)) throw UsageError("grad-check: eps must be positive");
  GradCheckReport report;
  report.term = term;
  report.form = form;
  report.trials = trials;
  const auto vocab = text::Vocabulary::build(kToyCorpus, 1);
  std::mt19937_64 rng(seed);

  for (std::size_t trial = 0; trial < trials; ++trial) {
    auto model = Model::create(toy_config(rng()), vocab, data::NormalizationStats{});
    report.n_params = model->params().scalar_count();
    const std::size_t v = vocab.size();
    std::function<nn::Var()> loss;

    if (term == LossTerm::l2) {
      const auto z_hat = random_caption(rng, v, 4);
      const auto z = random_caption(rng, v, 5);
      const auto& te = model->text_encoder();
      // Redraw the stored negative until cos(u_hat, u_bar) is clear of the
      // hinge kink.
      const auto anchor = te.embed_values(z_hat);
      nn::Tensor neg({1, anchor.size()});
      while (true) {
        neg = nn::random_normal({1, anchor.size()}, 1.0, rng);
        double dot = 0, na = 0, nb = 0;
        for (std::size_t i = 0; i < anchor.size(); ++i) {
          dot += anchor[i] * neg[i];
          na += anchor[i] * anchor[i];
          nb += neg[i] * neg[i];
        }
        const double cos = dot / std::sqrt(na * nb);
        if (std::abs(cos - model->config().c) > 1e-3) break;
      }
      loss = [&, z_hat, z, neg] {
        return encoder::contrastive_loss(te.embed(z_hat), te.embed(z), nn::constant(neg), model->config().c, form);
      };
    } else {
      MotionTensor m{4, 4, {}};
      m.values = nn::random_normal({16}, 1.0, rng).storage();
      const auto target = random_caption(rng, v, 4);
      const auto& td = model->text_decoder();
      if (term == LossTerm::l1) {
        loss = [&, m, target] { return td.nll(model->features(m), decoder::Mode::lowlevel, target); };
      } else {
        std::vector<std::vector<int>> retrieved;
        for (int r = 0; r < 2; ++r) {
          auto c = random_caption(rng, v, 3);
          retrieved.emplace_back(c.begin() + 1, c.end() - 1);
        }
        loss = [&, m, target, retrieved] {
          return td.nll(td.build_prefix(retrieved, model->features(m)), decoder::Mode::final, target);
        };
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, nn::grad_check(loss, model->params(), eps));
  }
  return report;
}

}  // namespace hicap::training
