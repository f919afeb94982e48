#include "hicap/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "hicap/error.hpp"
#include "hicap/text.hpp"

namespace hicap::metrics {

namespace {

using Tokens = std::vector<std::string>;
using NgramCounts = std::map<std::vector<std::string>, double>;

NgramCounts ngrams(const Tokens& toks, std::size_t n) {
  NgramCounts counts;
  if (toks.size() < n) return counts;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) {
    counts[Tokens(toks.begin() + static_cast<std::ptrdiff_t>(i), toks.begin() + static_cast<std::ptrdiff_t>(i + n))] += 1.0;
  }
  return counts;
}

struct TokenizedPair {
  Tokens candidate;
  std::vector<Tokens> references;
};

std::vector<TokenizedPair> tokenize_pairs(std::span<const EvalPair> pairs) {
  if (pairs.empty()) throw UsageError("metrics: no evaluation pairs");
  std::vector<TokenizedPair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    if (p.references.empty()) throw UsageError("metrics: pair without references");
    TokenizedPair t;
    t.candidate = text::tokenize(p.candidate);
    for (const auto& r : p.references) t.references.push_back(text::tokenize(r));
    out.push_back(std::move(t));
  }
  return out;
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

nlohmann::json MetricReport::to_json() const {
  return {{"bleu1", bleu1}, {"bleu4", bleu4},         {"rougeL", rouge_l}, {"cider", cider},
          {"mean", mean()}, {"n_pairs", n_pairs}, {"lemmatized", lemmatized}, {"warnings", warnings}};
}

double bleu(std::span<const EvalPair> pairs, int max_order, std::string* warning) {
  if (max_order < 1) throw UsageError("bleu: order must be at least 1");
  const auto tokenized = tokenize_pairs(pairs);
  const auto order = static_cast<std::size_t>(max_order);

  std::vector<double> matched(order, 0.0), total(order, 0.0);
  double cand_len = 0.0, ref_len = 0.0;
  for (const auto& p : tokenized) {
    const double c = static_cast<double>(p.candidate.size());
    cand_len += c;
    // Closest reference length; ties go to the shorter reference.
    double best = std::numeric_limits<double>::infinity(), best_diff = best;
    for (const auto& r : p.references) {
      const double len = static_cast<double>(r.size());
      const double diff = std::abs(len - c);
      if (diff < best_diff || (diff == best_diff && len < best)) {
        best = len;
        best_diff = diff;
      }
    }
    ref_len += best;

    for (std::size_t n = 1; n <= order; ++n) {
      const NgramCounts cand = ngrams(p.candidate, n);
      NgramCounts max_ref;
      for (const auto& r : p.references) {
        for (const auto& [g, cnt] : ngrams(r, n)) max_ref[g] = std::max(max_ref[g], cnt);
      }
      for (const auto& [g, cnt] : cand) {
        total[n - 1] += cnt;
        auto it = max_ref.find(g);
        if (it != max_ref.end()) matched[n - 1] += std::min(cnt, it->second);
      }
    }
  }

  if (cand_len == 0.0) {
    if (warning) *warning = "bleu: all candidates are empty";
    return 0.0;
  }
  double log_sum = 0.0;
  for (std::size_t n = 0; n < order; ++n) {
    const double num = matched[n] > 0.0 ? matched[n] : kBleuEpsilon;
    const double den = total[n] > 0.0 ? total[n] : 1.0;
    log_sum += std::log(num / den);
  }
  const double bp = cand_len < ref_len ? std::exp(1.0 - ref_len / cand_len) : 1.0;
  return 100.0 * bp * std::exp(log_sum / static_cast<double>(order));
}

double rouge_l(std::span<const EvalPair> pairs) {
  const auto tokenized = tokenize_pairs(pairs);
  const double beta2 = kRougeBeta * kRougeBeta;
  double total = 0.0;
  for (const auto& p : tokenized) {
    double best = 0.0;
    for (const auto& r : p.references) {
      const auto lcs = static_cast<double>(lcs_length(p.candidate, r));
      if (lcs == 0.0) continue;
      const double rec = lcs / static_cast<double>(r.size());
      const double prec = lcs / static_cast<double>(p.candidate.size());
      best = std::max(best, (1.0 + beta2) * rec * prec / (rec + beta2 * prec));
    }
    total += best;
  }
  return 100.0 * total / static_cast<double>(tokenized.size());
}

double cider(std::span<const EvalPair> pairs) {
  const auto tokenized = tokenize_pairs(pairs);
  std::set<std::vector<Tokens>> distinct;
  for (const auto& p : tokenized) distinct.insert(p.references);
  if (tokenized.size() < 2 || distinct.size() < 2) {
    throw NumericError("cider: degenerate IDF, need at least two pairs with different reference sets");
  }
  const double n_docs = static_cast<double>(tokenized.size());
  const double two_sigma2 = 2.0 * kCiderSigma * kCiderSigma;

  double score = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    // Document frequency: number of reference sets containing the n-gram.
    std::map<Tokens, double> df;
    std::vector<std::vector<NgramCounts>> ref_counts(tokenized.size());
    for (std::size_t i = 0; i < tokenized.size(); ++i) {
      std::set<Tokens> present;
      for (const auto& r : tokenized[i].references) {
        ref_counts[i].push_back(ngrams(r, n));
        for (const auto& [g, _] : ref_counts[i].back()) present.insert(g);
      }
      for (const auto& g : present) df[g] += 1.0;
    }
    auto idf = [&](const Tokens& g) {
      auto it = df.find(g);
      return std::log(n_docs / (1.0 + (it == df.end() ? 0.0 : it->second))) + 1.0;
    };
    auto weigh = [&](const NgramCounts& counts) {
      std::map<Tokens, double> vec;
      for (const auto& [g, c] : counts) vec[g] = c * idf(g);
      return vec;
    };
    auto norm = [](const std::map<Tokens, double>& v) {
      double s = 0.0;
      for (const auto& [_, x] : v) s += x * x;
      return std::sqrt(s);
    };

    double corpus = 0.0;
    for (std::size_t i = 0; i < tokenized.size(); ++i) {
      const auto cand = weigh(ngrams(tokenized[i].candidate, n));
      const double cand_norm = norm(cand);
      double pair_score = 0.0;
      for (std::size_t j = 0; j < ref_counts[i].size(); ++j) {
        const auto ref = weigh(ref_counts[i][j]);
        const double ref_norm = norm(ref);
        double cos = 0.0;
        if (cand_norm > 0.0 && ref_norm > 0.0) {
          double dot = 0.0;
          for (const auto& [g, x] : cand) {
            auto it = ref.find(g);
            if (it != ref.end()) dot += x * it->second;
          }
          cos = dot / (cand_norm * ref_norm);
        }
        const double delta = static_cast<double>(tokenized[i].candidate.size()) -
                             static_cast<double>(tokenized[i].references[j].size());
        pair_score += cos * std::exp(-(delta * delta) / two_sigma2);
      }
      corpus += pair_score / static_cast<double>(ref_counts[i].size());
    }
    score += corpus / static_cast<double>(tokenized.size());
  }
  return 100.0 * score / 4.0;
}

MetricReport evaluate(std::span<const EvalPair> pairs, bool lemmatize) {
  if (pairs.empty()) throw UsageError("evaluate: no evaluation pairs");
  std::vector<EvalPair> prepared(pairs.begin(), pairs.end());
  if (lemmatize) {
    for (auto& p : prepared) {
      p.candidate = text::lemmatize(p.candidate);
      for (auto& r : p.references) r = text::lemmatize(r);
    }
  }
  MetricReport report;
  report.n_pairs = prepared.size();
  report.lemmatized = lemmatize;
  std::string warning;
  report.bleu1 = bleu(prepared, 1, &warning);
  report.bleu4 = bleu(prepared, 4);
  if (!warning.empty()) report.warnings.push_back(warning);
  report.rouge_l = rouge_l(prepared);
  report.cider = cider(prepared);
  return report;
}

}  // namespace hicap::metrics
