#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hicap/types.hpp"

namespace hicap::retrieval {

struct DbEntry {
  std::uint64_t id = 0;
  std::string motion_id;
  std::string high_caption;
  std::string low_caption;
  Split split = Split::train;
  std::vector<double> embedding;

  friend bool operator==(const DbEntry&, const DbEntry&) = default;
};

struct Hit {
  std::uint64_t id = 0;
  std::string high_caption;
  double score = 0.0;
};

struct RetrievalResult {
  std::vector<Hit> hits;        // descending score, ties by smaller id
  bool clamped = false;         // fewer eligible entries than requested
  std::size_t zero_norm = 0;    // pairs scored -inf because a vector had zero norm
};

struct QueryFilter {
  std::set<Split> splits = {Split::train};
  std::optional<std::string> exclude_motion_id;
};

inline constexpr std::uint32_t kDbFormatVersion = 1;

// Linear-scan cosine store of (motion id, high caption, low caption, embedding).
class Database {
 public:
  Database() = default;
  explicit Database(std::size_t dim) : dim_(dim) {}

  // Returns the new entry's id. The first insert fixes the width of an
  // unsized database.
  std::uint64_t insert(std::string motion_id, std::string high_caption, std::string low_caption, Split split,
                       std::vector<double> embedding);

  RetrievalResult topk(std::span<const double> query, std::size_t k, const QueryFilter& filter = {}) const;

  // Recomputes every embedding from its low caption; returns the count.
  std::size_t reencode_all(const std::function<std::vector<double>(const std::string&)>& embed);

  // Appends entries (ids are reassigned); returns the new size.
  std::size_t enrich(std::vector<DbEntry> entries);

  // Uniform draw over entries whose motion id differs; nullptr when none.
  const DbEntry* sample_negative(std::mt19937_64& rng, const std::string& motion_id) const;
  std::size_t distinct_motions() const;

  const std::vector<DbEntry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  bool empty() const noexcept { return entries_.empty(); }

  void save(const std::filesystem::path& path) const;
  static Database load(const std::filesystem::path& path);
  nlohmann::json to_json() const;

  friend bool operator==(const Database&, const Database&) = default;

 private:
  std::size_t dim_ = 0;
  std::uint64_t next_id_ = 0;
  std::vector<DbEntry> entries_;
};

}  // namespace hicap::retrieval
