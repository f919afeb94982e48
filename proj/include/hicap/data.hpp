#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hicap/types.hpp"

namespace hicap::data {

struct Sample {
  std::string motion_id;
  MotionTensor motion;
  std::vector<std::string> high_captions;
  std::string low_caption;
  Split split = Split::train;

  bool needs_expansion() const noexcept { return low_caption.empty(); }
  friend bool operator==(const Sample&, const Sample&) = default;
};

struct Dataset {
  std::vector<Sample> samples;

  std::vector<const Sample*> split(Split s) const;
  const Sample* find(std::string_view motion_id) const;
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct NormalizationStats {
  static constexpr double kStdFloor = 1e-8;

  std::vector<double> mean;
  std::vector<double> std;

  void apply(MotionTensor& m) const;
  nlohmann::json to_json() const;
  static NormalizationStats from_json(const nlohmann::json& j);
};

// Per-channel statistics from the train split, applied to every split.
NormalizationStats normalize(Dataset& dataset);

struct DatasetStats {
  std::size_t n_words = 0;
  std::size_t n_motions = 0;
  std::size_t n_captions = 0;
  std::size_t n_lemmas = 0;
  double words_per_motion = 0.0;
  double lemmas_per_motion = 0.0;

  static DatasetStats from_counts(std::size_t n_words, std::size_t n_motions, std::size_t n_captions,
                                  std::size_t n_lemmas);
  nlohmann::json to_json() const;
};

// Distinct word forms and lemmas over the high-level captions.
DatasetStats stats(const Dataset& dataset);

struct SynthConfig {
  int n_classes = 8;
  int per_class = 25;
  int frames = 64;
  int channels = 32;
  std::uint64_t seed = 7;
};

Dataset synth_generate(const SynthConfig& config);
// Class index encoded in a generated motion id; nullopt for foreign ids.
std::optional<int> synth_class_of(std::string_view motion_id);
// Largest n_classes synth_generate accepts.
int synth_max_classes();

Dataset load(const std::filesystem::path& path);
void save(const std::filesystem::path& path, const Dataset& dataset);

nlohmann::json sample_to_json(const Sample& s);
Sample sample_from_json(const nlohmann::json& j);

struct ExpansionOptions {
  std::string endpoint;                // http(s)://host[:port]/path
  std::string prompt_template;         // "{caption}" is replaced by the high-level captions
  double timeout_s = 30.0;
  int max_retries = 3;
  double backoff_base_s = 1.0;         // delay before retry r is base * 2^r
  std::filesystem::path cache_path;    // empty disables the cache
  std::string auth_token;              // sent as "Authorization: Bearer ..." when set
  int max_concurrency = 4;
};

struct ExpansionFailure {
  std::string motion_id;
  std::string reason;
};

struct ExpansionReport {
  std::size_t requested = 0;
  std::size_t filled = 0;
  std::size_t from_cache = 0;
  std::size_t network_calls = 0;
  std::vector<ExpansionFailure> failures;

  nlohmann::json to_json() const;
};

// Environment variable holding the bearer token for the expansion endpoint.
inline constexpr const char* kEndpointTokenEnv = "HICAP_ENDPOINT_TOKEN";

std::string render_prompt(const std::string& prompt_template, const Sample& sample);

// Fills empty low-level captions by POSTing {"prompt": ...} and reading
// {"text": ...}. Failures are recorded per sample and never abort the batch.
ExpansionReport expand_captions(Dataset& dataset, const ExpansionOptions& options);

}  // namespace hicap::data
