#include "hicap/retrieval_db.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "hicap/error.hpp"

namespace hicap::retrieval {

namespace {

constexpr char kMagic[4] = {'H', 'C', 'D', 'B'};

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

template <typename T>
void put(std::ostream& out, T value) {
  static_assert(std::is_integral_v<T> || std::is_floating_point_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
 public:
  Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}

  template <typename T>
  T get(const char* what) {
    unsigned char bytes[sizeof(T)];
    read(bytes, sizeof(T), what);
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
  }

  std::string get_string(const char* what) {
    const auto len = get<std::uint32_t>(what);
    std::string s(len, '\0');
    read(s.data(), len, what);
    return s;
  }

  void read(void* dst, std::size_t n, const char* what) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw DataError("database '" + path_ + "' is truncated while reading " + what);
    }
  }

 private:
  std::istream& in_;
  std::string path_;
};

}  // namespace

std::uint64_t Database::insert(std::string motion_id, std::string high_caption, std::string low_caption, Split split,
                               std::vector<double> embedding) {
  if (low_caption.empty()) throw UsageError("database insert: low caption is empty");
  if (embedding.empty()) throw UsageError("database insert: embedding is empty");
  if (dim_ == 0) dim_ = embedding.size();
  if (embedding.size() != dim_) {
    throw UsageError("database insert: embedding width " + std::to_string(embedding.size()) + " differs from " +
                     std::to_string(dim_));
  }
  DbEntry e{next_id_++, std::move(motion_id), std::move(high_caption), std::move(low_caption), split,
            std::move(embedding)};
  entries_.push_back(std::move(e));
  return entries_.back().id;
}

RetrievalResult Database::topk(std::span<const double> query, std::size_t k, const QueryFilter& filter) const {
  if (k < 1) throw UsageError("topk: k must be at least 1");
  if (!entries_.empty() && query.size() != dim_) {
    throw UsageError("topk: query width " + std::to_string(query.size()) + " differs from database width " +
                     std::to_string(dim_));
  }
  RetrievalResult result;
  const double qn = norm(query);
  struct Scored {
    double score;
    std::size_t index;
  };
  std::vector<Scored> scored;
  scored.reserve(entries_.size());
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const DbEntry& e = entries_[i];
    if (!filter.splits.count(e.split)) continue;
    if (filter.exclude_motion_id && e.motion_id == *filter.exclude_motion_id) continue;
    const double en = norm(e.embedding);
    double score = -std::numeric_limits<double>::infinity();
    if (qn > 0.0 && en > 0.0) {
      double dot = 0.0;
      for (std::size_t d = 0; d < dim_; ++d) dot += query[d] * e.embedding[d];
      score = dot / (qn * en);
    } else {
      ++result.zero_norm;
    }
    scored.push_back({score, i});
  }
  const std::size_t take = std::min(k, scored.size());
  result.clamped = take < k;
  auto better = [&](const Scored& a, const Scored& b) {
    if (a.score != b.score) return a.score > b.score;
    return entries_[a.index].id < entries_[b.index].id;
  };
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end(), better);
  for (std::size_t r = 0; r < take; ++r) {
    const DbEntry& e = entries_[scored[r].index];
    result.hits.push_back({e.id, e.high_caption, scored[r].score});
  }
  return result;
}

std::size_t Database::reencode_all(const std::function<std::vector<double>(const std::string&)>& embed) {
  for (auto& e : entries_) {
    auto v = embed(e.low_caption);
    if (v.size() != dim_) {
      throw UsageError("reencode: embedding width " + std::to_string(v.size()) + " differs from " +
                       std::to_string(dim_));
    }
    e.embedding = std::move(v);
  }
  return entries_.size();
}

std::size_t Database::enrich(std::vector<DbEntry> entries) {
  std::size_t width = dim_;
  for (const auto& e : entries) {
    if (width == 0) width = e.embedding.size();
    if (e.embedding.size() != width || e.low_caption.empty()) {
      throw UsageError("enrich: entry for '" + e.motion_id + "' has width " + std::to_string(e.embedding.size()) +
                       ", database width is " + std::to_string(width));
    }
  }
  for (auto& e : entries) {
    insert(std::move(e.motion_id), std::move(e.high_caption), std::move(e.low_caption), e.split,
           std::move(e.embedding));
  }
  return entries_.size();
}

const DbEntry* Database::sample_negative(std::mt19937_64& rng, const std::string& motion_id) const {
  std::vector<const DbEntry*> eligible;
  for (const auto& e : entries_) {
    if (e.motion_id != motion_id) eligible.push_back(&e);
  }
  if (eligible.empty()) return nullptr;
  std::uniform_int_distribution<std::size_t> pick(0, eligible.size() - 1);
  return eligible[pick(rng)];
}

std::size_t Database::distinct_motions() const {
  std::set<std::string> ids;
  for (const auto& e : entries_) ids.insert(e.motion_id);
  return ids.size();
}

void Database::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write database '" + path.string() + "'");
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kDbFormatVersion);
  put<std::uint64_t>(out, entries_.size());
  put<std::uint64_t>(out, next_id_);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(dim_));
  for (const auto& e : entries_) {
    put<std::uint64_t>(out, e.id);
    put_string(out, e.motion_id);
    put_string(out, e.high_caption);
    put_string(out, e.low_caption);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(e.split));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.embedding.size()));
    for (double v : e.embedding) put<double>(out, v);
  }
  if (!out) throw DataError("write failed for database '" + path.string() + "'");
}

Database Database::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open database '" + path.string() + "'");
  Reader r(in, path.string());
  char magic[4];
  r.read(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw DataError("'" + path.string() + "' is not a caption database");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kDbFormatVersion) {
    throw DataError("database '" + path.string() + "' has format version " + std::to_string(version) +
                    ", expected " + std::to_string(kDbFormatVersion));
  }
  const auto count = r.get<std::uint64_t>("entry count");
  Database db;
  db.next_id_ = r.get<std::uint64_t>("next id");
  db.dim_ = r.get<std::uint32_t>("width");
  for (std::uint64_t i = 0; i < count; ++i) {
    DbEntry e;
    e.id = r.get<std::uint64_t>("entry id");
    e.motion_id = r.get_string("motion id");
    e.high_caption = r.get_string("high caption");
    e.low_caption = r.get_string("low caption");
    const auto split = r.get<std::uint8_t>("split");
    if (split > static_cast<std::uint8_t>(Split::external)) {
      throw DataError("database '" + path.string() + "': entry " + std::to_string(e.id) + " has unknown split");
    }
    e.split = static_cast<Split>(split);
    const auto width = r.get<std::uint32_t>("embedding width");
    if (width != db.dim_) {
      throw DataError("database '" + path.string() + "': entry " + std::to_string(e.id) + " has width " +
                      std::to_string(width) + ", header says " + std::to_string(db.dim_));
    }
    e.embedding.resize(width);
    for (auto& v : e.embedding) v = r.get<double>("embedding");
    db.entries_.push_back(std::move(e));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw DataError("database '" + path.string() + "' has trailing bytes after " + std::to_string(count) + " entries");
  }
  return db;
}

nlohmann::json Database::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& e : entries_) {
    rows.push_back({{"id", e.id},
                    {"motion_id", e.motion_id},
                    {"high_caption", e.high_caption},
                    {"low_caption", e.low_caption},
                    {"split", split_name(e.split)},
                    {"embedding", e.embedding}});
  }
  return {{"format_version", kDbFormatVersion}, {"dim", dim_}, {"size", entries_.size()}, {"entries", rows}};
}

}  // namespace hicap::retrieval
