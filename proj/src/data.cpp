#include "hicap/data.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <numbers>
#include <random>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "hicap/error.hpp"
#include "hicap/text.hpp"

namespace hicap::data {

std::vector<const Sample*> Dataset::split(Split s) const {
  std::vector<const Sample*> out;
  for (const auto& sample : samples) {
    if (sample.split == s) out.push_back(&sample);
  }
  return out;
}

const Sample* Dataset::find(std::string_view motion_id) const {
  for (const auto& s : samples) {
    if (s.motion_id == motion_id) return &s;
  }
  return nullptr;
}

// ---------------------------------------------------------------------------
// Normalization

void NormalizationStats::apply(MotionTensor& m) const {
  if (m.channels != mean.size()) {
    throw DataError("normalization: motion has " + std::to_string(m.channels) + " channels, stats have " +
                    std::to_string(mean.size()));
  }
  for (std::size_t t = 0; t < m.frames; ++t) {
    for (std::size_t j = 0; j < m.channels; ++j) m.at(t, j) = (m.at(t, j) - mean[j]) / std[j];
  }
}

nlohmann::json NormalizationStats::to_json() const { return {{"mean", mean}, {"std", std}}; }

NormalizationStats NormalizationStats::from_json(const nlohmann::json& j) {
  NormalizationStats s;
  s.mean = j.at("mean").get<std::vector<double>>();
  s.std = j.at("std").get<std::vector<double>>();
  if (s.mean.size() != s.std.size()) throw DataError("normalization: mean/std length mismatch");
  return s;
}

NormalizationStats normalize(Dataset& dataset) {
  const auto train = dataset.split(Split::train);
  if (train.empty()) throw UsageError("normalize: train split is empty");
  const std::size_t channels = train.front()->motion.channels;
  for (const auto& s : dataset.samples) {
    if (s.motion.channels != channels) {
      throw DataError("normalize: sample '" + s.motion_id + "' has " + std::to_string(s.motion.channels) +
                      " channels, expected " + std::to_string(channels));
    }
  }
  NormalizationStats stats;
  stats.mean.assign(channels, 0.0);
  stats.std.assign(channels, 0.0);
  double count = 0.0;
  for (const Sample* s : train) {
    for (std::size_t t = 0; t < s->motion.frames; ++t) {
      for (std::size_t j = 0; j < channels; ++j) stats.mean[j] += s->motion.at(t, j);
    }
    count += static_cast<double>(s->motion.frames);
  }
  for (auto& m : stats.mean) m /= count;
  for (const Sample* s : train) {
    for (std::size_t t = 0; t < s->motion.frames; ++t) {
      for (std::size_t j = 0; j < channels; ++j) {
        const double d = s->motion.at(t, j) - stats.mean[j];
        stats.std[j] += d * d;
      }
    }
  }
  for (auto& v : stats.std) v = std::max(std::sqrt(v / count), NormalizationStats::kStdFloor);
  for (auto& s : dataset.samples) stats.apply(s.motion);
  return stats;
}

// ---------------------------------------------------------------------------
// Statistics

DatasetStats DatasetStats::from_counts(std::size_t n_words, std::size_t n_motions, std::size_t n_captions,
                                       std::size_t n_lemmas) {
  DatasetStats s;
  s.n_words = n_words;
  s.n_motions = n_motions;
  s.n_captions = n_captions;
  s.n_lemmas = n_lemmas;
  if (n_motions > 0) {
    s.words_per_motion = static_cast<double>(n_words) / static_cast<double>(n_motions);
    s.lemmas_per_motion = static_cast<double>(n_lemmas) / static_cast<double>(n_motions);
  }
  return s;
}

nlohmann::json DatasetStats::to_json() const {
  return {{"n_words", n_words},
          {"n_motions", n_motions},
          {"n_captions", n_captions},
          {"n_lemmas", n_lemmas},
          {"words_per_motion", words_per_motion},
          {"lemmas_per_motion", lemmas_per_motion}};
}

DatasetStats stats(const Dataset& dataset) {
  std::set<std::string> words, lemmas;
  std::size_t captions = 0;
  for (const auto& s : dataset.samples) {
    for (const auto& cap : s.high_captions) {
      ++captions;
      for (const auto& tok : text::tokenize(cap)) {
        if (text::is_punctuation_token(tok)) continue;
        words.insert(tok);
        lemmas.insert(text::lemmatize_word(tok));
      }
    }
  }
  return DatasetStats::from_counts(words.size(), dataset.samples.size(), captions, lemmas.size());
}

// ---------------------------------------------------------------------------
// Synthetic generator
//
// Channels are split into three groups (arms, legs, torso). Each class drives
// every group with one movement program (or leaves it idle); a program is a
// sinusoid with a fixed number of cycles over the clip, a per-channel phase
// pattern and an amplitude. Per sample: amplitude x U(0.9, 1.1), phase offset
// U(-0.2, 0.2) rad, additive N(0, 0.05) noise on every channel.

namespace {

constexpr double kNoiseSigma = 0.05;
constexpr double kAmpJitter = 0.1;
constexpr double kPhaseJitter = 0.2;
constexpr double kTrainFraction = 0.80;
constexpr double kValFraction = 0.05;

struct Program {
  double cycles;
  double amplitude;
  // Phase for channel q of a group with g channels.
  double (*phase)(std::size_t q, std::size_t g);
  const char* phrase;
};

double in_phase(std::size_t, std::size_t) { return 0.0; }
double split_halves(std::size_t q, std::size_t g) { return 2 * q >= g ? std::numbers::pi : 0.0; }
double alternate_odd(std::size_t q, std::size_t) { return q % 2 ? std::numbers::pi : 0.0; }
double quadrature(std::size_t q, std::size_t) { return static_cast<double>(q) * std::numbers::pi / 2.0; }

// Index 0 of each group is the idle program.
const Program kArmPrograms[] = {
    {0.0, 0.0, in_phase, "stay relaxed at the sides"},
    {2.0, 1.0, in_phase, "raise up and lower down"},
    {3.0, 0.8, split_halves, "swing back and forth"},
    {1.5, 1.0, quadrature, "rotate in wide circles"},
};
const Program kLegPrograms[] = {
    {0.0, 0.0, in_phase, "stand still"},
    {3.0, 1.0, in_phase, "jump out and back in"},
    {2.0, 0.8, split_halves, "step forward one after the other"},
    {1.0, 1.2, in_phase, "bend at the knees and push back up"},
};
const Program kTorsoPrograms[] = {
    {0.0, 0.0, in_phase, "stays upright"},
    {2.0, 0.8, alternate_odd, "twists from side to side"},
    {1.0, 1.0, in_phase, "bends forward at the waist"},
};

struct ClassSpec {
  int arms;
  int legs;
  int torso;
  std::vector<std::string> high;
};

std::vector<ClassSpec> class_catalogue() {
  std::vector<ClassSpec> specs = {
      {1, 1, 0, {"a person does jumping jacks", "a person is doing jumping jacks", "someone performs jumping jacks"}},
      {2, 2, 0, {"a person walks forward", "a person is walking forward", "someone walks ahead"}},
      {0, 3, 0, {"a person does squats", "a person is squatting down and up", "someone performs squats"}},
      {0, 0, 1, {"a person twists the torso", "a person is twisting from side to side", "someone twists at the waist"}},
      {0, 0, 2, {"a person bows forward", "a person is bowing", "someone bows down"}},
      {3, 0, 0, {"a person does arm circles", "a person is circling the arms", "someone rotates the arms"}},
      {2, 1, 0, {"a person jogs in place", "a person is jogging in place", "someone runs on the spot"}},
      {1, 0, 2, {"a person stretches up and down", "a person is stretching", "someone reaches up then bends over"}},
  };
  // Remaining non-idle combinations get generic routine captions.
  std::set<std::tuple<int, int, int>> used;
  for (const auto& s : specs) used.emplace(s.arms, s.legs, s.torso);
  int routine = 1;
  for (int a = 0; a < 4; ++a) {
    for (int l = 0; l < 4; ++l) {
      for (int t = 0; t < 3; ++t) {
        if ((a == 0 && l == 0 && t == 0) || used.count({a, l, t})) continue;
        const std::string n = std::to_string(routine++);
        specs.push_back({a, l, t, {"a person performs routine " + n, "someone does routine " + n}});
      }
    }
  }
  return specs;
}

std::string low_caption_for(const ClassSpec& spec) {
  return std::string("the arms ") + kArmPrograms[spec.arms].phrase + " , the legs " + kLegPrograms[spec.legs].phrase +
         " and the torso " + kTorsoPrograms[spec.torso].phrase;
}

std::string motion_id_for(int cls, int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "synth-c%02d-%04d", cls, index);
  return buf;
}

}  // namespace

int synth_max_classes() { return static_cast<int>(class_catalogue().size()); }

std::optional<int> synth_class_of(std::string_view motion_id) {
  static const std::regex re(R"(^synth-c(\d+)-\d+$)");
  std::match_results<std::string_view::const_iterator> m;
  if (!std::regex_match(motion_id.begin(), motion_id.end(), m, re)) return std::nullopt;
  return std::stoi(m[1].str());
}

Dataset synth_generate(const SynthConfig& cfg) {
  if (cfg.n_classes < 1 || cfg.per_class < 1 || cfg.frames < 1 || cfg.channels < 1) {
    throw UsageError("synth_generate: all sizes must be at least 1");
  }
  const auto catalogue = class_catalogue();
  if (cfg.n_classes > static_cast<int>(catalogue.size())) {
    throw UsageError("synth_generate: at most " + std::to_string(catalogue.size()) + " classes are available");
  }
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> noise(0.0, kNoiseSigma);
  std::uniform_real_distribution<double> amp_jitter(1.0 - kAmpJitter, 1.0 + kAmpJitter);
  std::uniform_real_distribution<double> phase_jitter(-kPhaseJitter, kPhaseJitter);

  const auto frames = static_cast<std::size_t>(cfg.frames);
  const auto channels = static_cast<std::size_t>(cfg.channels);
  // Channel j belongs to group j*3/C; q is its index inside the group.
  std::vector<std::size_t> group_of(channels), index_in_group(channels), group_size(3, 0);
  for (std::size_t j = 0; j < channels; ++j) {
    group_of[j] = j * 3 / channels;
    index_in_group[j] = group_size[group_of[j]]++;
  }

  Dataset ds;
  for (int c = 0; c < cfg.n_classes; ++c) {
    const ClassSpec& spec = catalogue[static_cast<std::size_t>(c)];
    const Program* programs[3] = {&kArmPrograms[spec.arms], &kLegPrograms[spec.legs], &kTorsoPrograms[spec.torso]};
    const std::string low = low_caption_for(spec);
    std::uniform_int_distribution<std::size_t> pick(0, spec.high.size() - 1);
    for (int i = 0; i < cfg.per_class; ++i) {
      Sample s;
      s.motion_id = motion_id_for(c, i);
      s.motion.frames = frames;
      s.motion.channels = channels;
      s.motion.values.assign(frames * channels, 0.0);
      const double amp = amp_jitter(rng);
      const double offset = phase_jitter(rng);
      for (std::size_t t = 0; t < frames; ++t) {
        const double tau = static_cast<double>(t) / static_cast<double>(frames);
        for (std::size_t j = 0; j < channels; ++j) {
          const Program& p = *programs[group_of[j]];
          const std::size_t g = group_size[group_of[j]];
          const std::size_t q = index_in_group[j];
          double v = 0.0;
          if (p.amplitude > 0.0) {
            const double weight = 1.0 - 0.4 * static_cast<double>(q) / static_cast<double>(g);
            v = amp * p.amplitude * weight *
                std::sin(2.0 * std::numbers::pi * p.cycles * tau + p.phase(q, g) + offset);
          }
          s.motion.at(t, j) = v + noise(rng);
        }
      }
      s.high_captions = {spec.high[pick(rng)]};
      s.low_caption = low;
      ds.samples.push_back(std::move(s));
    }
  }

  const std::size_t n = ds.samples.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(kTrainFraction * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(kValFraction * static_cast<double>(n))));
  for (std::size_t r = 0; r < n; ++r) {
    ds.samples[order[r]].split = r < n_train ? Split::train : r < n_train + n_val ? Split::val : Split::test;
  }
  return ds;
}

// ---------------------------------------------------------------------------
// JSON-lines persistence

nlohmann::json sample_to_json(const Sample& s) {
  return {{"motion_id", s.motion_id},
          {"split", split_name(s.split)},
          {"high_captions", s.high_captions},
          {"low_caption", s.low_caption},
          {"motion", {{"frames", s.motion.frames}, {"channels", s.motion.channels}, {"values", s.motion.values}}}};
}

Sample sample_from_json(const nlohmann::json& j) {
  Sample s;
  s.motion_id = j.at("motion_id").get<std::string>();
  const auto split = parse_split(j.at("split").get<std::string>());
  if (!split) throw DataError("sample '" + s.motion_id + "': unknown split '" + j.at("split").get<std::string>() + "'");
  s.split = *split;
  s.high_captions = j.at("high_captions").get<std::vector<std::string>>();
  if (s.high_captions.empty()) throw DataError("sample '" + s.motion_id + "': high_captions is empty");
  if (j.contains("low_caption") && !j.at("low_caption").is_null()) s.low_caption = j.at("low_caption").get<std::string>();
  const auto& m = j.at("motion");
  s.motion.frames = m.at("frames").get<std::size_t>();
  s.motion.channels = m.at("channels").get<std::size_t>();
  s.motion.values = m.at("values").get<std::vector<double>>();
  if (s.motion.frames == 0 || s.motion.channels == 0 || s.motion.values.size() != s.motion.frames * s.motion.channels) {
    throw DataError("sample '" + s.motion_id + "': " + std::to_string(s.motion.values.size()) + " values for " +
                    std::to_string(s.motion.frames) + "x" + std::to_string(s.motion.channels) + " motion");
  }
  return s;
}

Dataset load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset '" + path.string() + "'");
  Dataset ds;
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      Sample s = sample_from_json(nlohmann::json::parse(line));
      if (!ids.insert(s.motion_id).second) throw DataError("duplicate motion_id '" + s.motion_id + "'");
      ds.samples.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return ds;
}

void save(const std::filesystem::path& path, const Dataset& dataset) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write dataset '" + path.string() + "'");
  for (const auto& s : dataset.samples) out << sample_to_json(s).dump() << '\n';
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Caption expansion client

nlohmann::json ExpansionReport::to_json() const {
  nlohmann::json fails = nlohmann::json::array();
  for (const auto& f : failures) fails.push_back({{"motion_id", f.motion_id}, {"reason", f.reason}});
  return {{"requested", requested},
          {"filled", filled},
          {"from_cache", from_cache},
          {"network_calls", network_calls},
          {"failed", failures.size()},
          {"failures", fails}};
}

std::string render_prompt(const std::string& prompt_template, const Sample& sample) {
  std::string captions;
  for (const auto& c : sample.high_captions) {
    if (!captions.empty()) captions += "; ";
    captions += c;
  }
  std::string out = prompt_template;
  const std::string key = "{caption}";
  std::size_t pos = 0;
  bool replaced = false;
  while ((pos = out.find(key, pos)) != std::string::npos) {
    out.replace(pos, key.size(), captions);
    pos += captions.size();
    replaced = true;
  }
  if (!replaced) out += "\n" + captions;
  return out;
}

namespace {

std::string cache_key(const Sample& s) {
  std::string joined;
  for (const auto& c : s.high_captions) joined += c + "\n";
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(text::fnv1a(joined)));
  return buf;
}

struct Endpoint {
  std::string base;  // scheme://host[:port]
  std::string path;
};

Endpoint parse_endpoint(const std::string& url) {
  static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, re)) throw UsageError("expand_captions: invalid endpoint URL '" + url + "'");
  return {m[1].str(), m[2].matched ? m[2].str() : "/"};
}

struct Outcome {
  bool ok = false;
  std::string text;
  std::string reason;
  std::size_t calls = 0;
};

Outcome request_one(const Endpoint& ep, const ExpansionOptions& opt, const std::string& prompt) {
  Outcome out;
  httplib::Client client(ep.base);
  const auto timeout = std::chrono::duration<double>(opt.timeout_s);
  client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  httplib::Headers headers;
  if (!opt.auth_token.empty()) headers.emplace("Authorization", "Bearer " + opt.auth_token);
  const std::string body = nlohmann::json{{"prompt", prompt}}.dump();

  for (int attempt = 0; attempt <= opt.max_retries; ++attempt) {
    if (attempt > 0) {
      const double delay = opt.backoff_base_s * std::pow(2.0, attempt - 1);
      std::this_thread::sleep_for(std::chrono::duration<double>(delay));
    }
    ++out.calls;
    auto res = client.Post(ep.path, headers, body, "application/json");
    if (!res) {
      out.reason = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status != 200) {
      out.reason = "HTTP " + std::to_string(res->status);
      if (res->status >= 500 || res->status == 429) continue;
      return out;
    }
    try {
      auto j = nlohmann::json::parse(res->body);
      out.text = j.at("text").get<std::string>();
      if (text::normalize(out.text).empty()) {
        out.reason = "malformed response: empty text";
        return out;
      }
      out.ok = true;
      return out;
    } catch (const nlohmann::json::exception& e) {
      out.reason = std::string("malformed response: ") + e.what();
      return out;
    }
  }
  return out;
}

}  // namespace

ExpansionReport expand_captions(Dataset& dataset, const ExpansionOptions& options) {
  if (options.max_retries < 0) throw UsageError("expand_captions: max_retries must be non-negative");
  if (options.max_concurrency < 1) throw UsageError("expand_captions: max_concurrency must be positive");

  nlohmann::json cache = nlohmann::json::object();
  if (!options.cache_path.empty() && std::filesystem::exists(options.cache_path)) {
    std::ifstream in(options.cache_path);
    try {
      cache = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("expansion cache '" + options.cache_path.string() + "' is malformed: " + e.what());
    }
  }

  ExpansionReport report;
  std::vector<Sample*> pending;
  for (auto& s : dataset.samples) {
    if (!s.needs_expansion()) continue;
    ++report.requested;
    const auto key = cache_key(s);
    if (cache.contains(key)) {
      s.low_caption = cache[key].get<std::string>();
      ++report.from_cache;
      ++report.filled;
    } else {
      pending.push_back(&s);
    }
  }
  if (pending.empty()) return report;

  const Endpoint ep = parse_endpoint(options.endpoint);
  std::vector<Outcome> outcomes(pending.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < pending.size();) {
      try {
        outcomes[i] = request_one(ep, options, render_prompt(options.prompt_template, *pending[i]));
      } catch (const std::exception& e) {
        outcomes[i].reason = e.what();
      }
    }
  };
  const auto n_workers = std::min<std::size_t>(static_cast<std::size_t>(options.max_concurrency), pending.size());
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < n_workers; ++w) threads.emplace_back(worker);
  for (auto& t : threads) t.join();

  bool cache_dirty = false;
  for (std::size_t i = 0; i < pending.size(); ++i) {
    report.network_calls += outcomes[i].calls;
    if (outcomes[i].ok) {
      pending[i]->low_caption = outcomes[i].text;
      cache[cache_key(*pending[i])] = outcomes[i].text;
      cache_dirty = true;
      ++report.filled;
    } else {
      report.failures.push_back({pending[i]->motion_id, outcomes[i].reason});
    }
  }
  if (cache_dirty && !options.cache_path.empty()) {
    std::ofstream out(options.cache_path);
    if (!out) throw DataError("cannot write expansion cache '" + options.cache_path.string() + "'");
    out << cache.dump(2) << '\n';
  }
  return report;
}

}  // namespace hicap::data
