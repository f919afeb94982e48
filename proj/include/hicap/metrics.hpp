#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace hicap::metrics {

struct EvalPair {
  std::string candidate;
  std::vector<std::string> references;
};

// All scores on a 0-100 scale.
struct MetricReport {
  double bleu1 = 0.0;
  double bleu4 = 0.0;
  double rouge_l = 0.0;
  double cider = 0.0;
  std::size_t n_pairs = 0;
  bool lemmatized = false;
  std::vector<std::string> warnings;

  double mean() const { return (bleu1 + bleu4 + rouge_l + cider) / 4.0; }
  nlohmann::json to_json() const;
};

inline constexpr double kBleuEpsilon = 1e-9;
inline constexpr double kRougeBeta = 1.2;
inline constexpr double kCiderSigma = 6.0;

// Corpus BLEU with clipped counts pooled over all pairs, epsilon-smoothed
// zero precisions and a brevity penalty against the closest reference length.
// `warning` (optional) receives a note when every candidate is empty.
double bleu(std::span<const EvalPair> pairs, int max_order, std::string* warning = nullptr);

// Mean over pairs of the best LCS F-measure (beta = 1.2) among references.
double rouge_l(std::span<const EvalPair> pairs);

// TF-IDF n-gram consensus, n = 1..4, IDF = ln(N / (1 + df)) + 1 over the N
// reference sets, with a Gaussian length penalty (sigma = 6).
// Throws NumericError when fewer than two distinct reference sets exist.
double cider(std::span<const EvalPair> pairs);

// Runs all four metrics, optionally lemmatizing candidates and references.
MetricReport evaluate(std::span<const EvalPair> pairs, bool lemmatize);

}  // namespace hicap::metrics
