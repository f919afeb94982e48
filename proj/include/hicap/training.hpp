#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "hicap/data.hpp"
#include "hicap/metrics.hpp"
#include "hicap/motion_encoder.hpp"
#include "hicap/nn.hpp"
#include "hicap/retrieval_db.hpp"
#include "hicap/text.hpp"
#include "hicap/text_decoder.hpp"
#include "hicap/text_encoder.hpp"

namespace hicap::training {

enum class Variant { complete, top1_direct, no_l2, frozen_td_no_l2, base };

std::string_view variant_name(Variant v) noexcept;
std::optional<Variant> parse_variant(std::string_view name) noexcept;

std::string_view form_name(encoder::ContrastiveForm f) noexcept;
std::optional<encoder::ContrastiveForm> parse_form(std::string_view name) noexcept;

struct TrainConfig {
  std::size_t k = 2;
  double c = 0.7;
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double lambda3 = 1.0;
  double lr = 1e-3;
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  Variant variant = Variant::complete;
  std::uint64_t seed = 7;
  encoder::ContrastiveForm l2_form = encoder::ContrastiveForm::paper;
  bool exclude_self = false;
  bool lemmatize_val = false;
  double grad_clip = 1.0;  // <= 0 disables clipping

  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t me_layers = 2;
  std::size_t td_layers = 2;
  std::size_t te_layers = 1;
  std::size_t d_embed = 64;
  std::size_t patch_t = 16;
  std::size_t patch_j = 32;
  std::size_t max_patches = 256;
  std::size_t max_seq_len = 128;
  std::size_t max_gen_len = 32;
  double init_std = 0.02;
  int min_freq = 1;

  // Effective lambda2 after the variant is applied.
  double effective_lambda2() const;
  bool uses_retrieval() const { return variant != Variant::base; }
  void validate() const;

  nlohmann::json to_json() const;
  // Overrides the fields present in `j`; unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& j, TrainConfig base);
  static TrainConfig from_json(const nlohmann::json& j);
  // kit-like, hml3d-like, both-like.
  static TrainConfig preset(std::string_view name);
};

// The three networks, their shared parameter set, the vocabulary and the
// motion normalization. Parameter paths are prefixed with "motion_encoder.",
// "text_decoder." and "text_encoder.".
class Model {
 public:
  static std::unique_ptr<Model> create(const TrainConfig& cfg, text::Vocabulary vocab,
                                       data::NormalizationStats norm);

  const TrainConfig& config() const noexcept { return cfg_; }
  const text::Vocabulary& vocab() const noexcept { return vocab_; }
  const data::NormalizationStats& normalization() const noexcept { return norm_; }
  nn::ParameterSet& params() noexcept { return params_; }
  const nn::ParameterSet& params() const noexcept { return params_; }
  const motion::MotionEncoder& motion_encoder() const { return *me_; }
  const decoder::TextDecoder& text_decoder() const { return *td_; }
  const encoder::TextEncoder& text_encoder() const { return *te_; }

  // Normalizes a raw motion with the stored statistics, then encodes it.
  nn::Var features(const MotionTensor& raw) const;
  nn::Var embed(const std::string& caption) const;
  std::vector<double> embed_values(const std::string& caption) const;

  // Copies of every parameter value, keyed by path.
  std::map<std::string, nn::Tensor> snapshot() const;
  void restore(const std::map<std::string, nn::Tensor>& values);

 private:
  Model(const TrainConfig& cfg, text::Vocabulary vocab, data::NormalizationStats norm);

  TrainConfig cfg_;
  text::Vocabulary vocab_;
  data::NormalizationStats norm_;
  nn::ParameterSet params_;
  std::unique_ptr<motion::MotionEncoder> me_;
  std::unique_ptr<decoder::TextDecoder> td_;
  std::unique_ptr<encoder::TextEncoder> te_;
};

// lambda1*l1 + lambda2*l2 + lambda3*l3; a non-finite term is named in the
// NumericError.
double total_loss(double l1, double l2, double l3, double lambda1, double lambda2, double lambda3);

struct SampleLosses {
  nn::Var l1;  // null when not computed
  nn::Var l2;
  nn::Var l3;
  nn::Var total;
  bool l2_skipped = false;
  decoder::Generation low;
  retrieval::RetrievalResult retrieved;
};

// Per-sample objective of one training step. `rng` drives the negative draw
// and the choice among several high-level captions.
SampleLosses sample_losses(const Model& model, const retrieval::Database& db, const data::Sample& sample,
                           std::mt19937_64& rng);

// Seeds one entry per (sample, high caption) of `split`, embedded with the
// model's text encoder. Samples without a low caption are rejected.
std::size_t add_split(retrieval::Database& db, const Model& model, const data::Dataset& dataset, Split split);

struct Inference {
  std::string low_caption;
  bool low_truncated = false;
  retrieval::RetrievalResult retrieved;
  std::string final_caption;
  bool final_truncated = false;

  nlohmann::json to_json() const;
};

Inference infer(const Model& model, const retrieval::Database& db, const MotionTensor& raw_motion, Variant variant,
                std::size_t k, const retrieval::QueryFilter& filter = {});

struct SplitEvaluation {
  metrics::MetricReport report;
  std::vector<std::string> motion_ids;
  std::vector<Inference> outputs;
};

// Runs inference on every sample of `split` and scores final captions against
// the high-level captions. A degenerate CIDEr corpus scores 0 with a warning.
SplitEvaluation evaluate_split(const Model& model, const retrieval::Database& db, const data::Dataset& dataset,
                               Split split, Variant variant, std::size_t k, const retrieval::QueryFilter& filter,
                               bool lemmatize);

// Metric report that never throws on a degenerate CIDEr corpus.
metrics::MetricReport score_pairs(std::span<const metrics::EvalPair> pairs, bool lemmatize);

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double l1 = 0.0;        // per-sample means over the epoch
  double l2 = 0.0;
  double l3 = 0.0;
  double loss = 0.0;
  std::size_t steps = 0;
  std::size_t l2_skipped = 0;
  metrics::MetricReport val;
  double wall_time_s = 0.0;

  nlohmann::json to_json(bool with_wall_time = true) const;
};

// Index of the first maximum.
std::size_t select_best(std::span<const double> scores);

class TrainObserver {
 public:
  virtual ~TrainObserver() = default;
  // Gradients of the whole batch are accumulated; the optimizer has not run.
  virtual void after_backward(const Model&, std::size_t /*epoch*/, std::size_t /*step*/) {}
  virtual void step_end(const Model&, const retrieval::Database&, std::size_t /*epoch*/, std::size_t /*step*/) {}
  // Called after the end-of-epoch re-encode, before validation.
  virtual void epoch_end(const Model&, const retrieval::Database&, std::size_t /*epoch*/) {}
};

struct TrainResult {
  std::unique_ptr<Model> model;  // parameters of the selected epoch
  retrieval::Database db;        // re-encoded with the selected parameters
  std::vector<EpochLog> logs;
  std::size_t best_epoch = 0;    // 1-based
  std::vector<std::string> warnings;
};

// Builds the vocabulary from train-split captions, normalizes motions with
// train statistics, seeds the database, runs the epochs and keeps the epoch
// with the best mean validation metric. EpochLogs are written as JSON lines
// to `log` when given.
TrainResult train(const data::Dataset& dataset, const TrainConfig& cfg, TrainObserver* observer = nullptr,
                  std::ostream* log = nullptr);

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::unique_ptr<Model> model;
  std::size_t epoch = 0;
  nlohmann::json metrics = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const Model& model, std::size_t epoch,
                     const nlohmann::json& metrics);
Checkpoint load_checkpoint(const std::filesystem::path& path);

enum class LossTerm { l1, l2, l3 };

std::string_view loss_term_name(LossTerm t) noexcept;
std::optional<LossTerm> parse_loss_term(std::string_view name) noexcept;

struct GradCheckReport {
  LossTerm term = LossTerm::l1;
  encoder::ContrastiveForm form = encoder::ContrastiveForm::paper;
  std::size_t trials = 0;
  std::size_t n_params = 0;
  double max_rel_error = 0.0;

  nlohmann::json to_json() const;
};

// Finite-difference check of one loss term on a toy model with fresh random
// parameters and inputs per trial.
GradCheckReport grad_check_term(LossTerm term, encoder::ContrastiveForm form, std::size_t trials,
                                std::uint64_t seed, double eps = 1e-5);

}  // namespace hicap::training
