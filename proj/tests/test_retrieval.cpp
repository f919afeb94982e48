#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include <unistd.h>

#include <doctest.h>

#include "hicap/error.hpp"
#include "hicap/retrieval_db.hpp"

using namespace hicap;
using namespace hicap::retrieval;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  return fs::temp_directory_path() / ("hicap-test-" + std::to_string(::getpid()) + "-" + name);
}

Database random_db(std::size_t n, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  Database db(dim);
  const Split splits[] = {Split::train, Split::val, Split::external};
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> v(dim);
    for (auto& x : v) x = d(rng);
    db.insert("m" + std::to_string(i % 7), "high " + std::to_string(i), "low " + std::to_string(i), splits[i % 3], v);
  }
  return db;
}

}  // namespace

TEST_SUITE("retrieval_db") {
  TEST_CASE("ids are assigned in insertion order") {
    Database db;
    CHECK(db.insert("a", "y", "z", Split::train, {1, 0}) == 0);
    CHECK(db.size() == 1);
    CHECK(db.insert("a", "y", "z", Split::train, {1, 0}) == 1);  // duplicates allowed
    CHECK(db.dim() == 2);
    CHECK_THROWS_AS(db.insert("b", "y", "z", Split::train, {1, 0, 0}), UsageError);
  }

  TEST_CASE("orthogonal basis ranking") {
    Database db;
    db.insert("m1", "one", "z1", Split::train, {1, 0, 0});
    db.insert("m2", "two", "z2", Split::train, {0, 1, 0});
    db.insert("m3", "three", "z3", Split::train, {0, 0, 1});
    const std::vector<double> q = {0.1, 0.9, 0.0};
    const auto r = db.topk(q, 2);
    REQUIRE(r.hits.size() == 2);
    CHECK(r.hits[0].id == 1);
    CHECK(r.hits[1].id == 0);
    CHECK_FALSE(r.clamped);

    const std::vector<double> exact = {0, 0, 1};
    const auto self = db.topk(exact, 1);
    CHECK(self.hits[0].id == 2);
    CHECK(self.hits[0].score == 1.0);

    const auto many = db.topk(q, 5);
    CHECK(many.hits.size() == 3);
    CHECK(many.clamped);
  }

  TEST_CASE("ties break by smaller id") {
    Database db;
    for (int i = 0; i < 4; ++i) db.insert("m", "c" + std::to_string(i), "z", Split::train, {1, 1});
    const std::vector<double> q = {2, 2};
    const auto r = db.topk(q, 3);
    CHECK(r.hits[0].id == 0);
    CHECK(r.hits[1].id == 1);
    CHECK(r.hits[2].id == 2);
  }

  TEST_CASE("zero-norm vectors score minus infinity and are counted") {
    Database db;
    db.insert("a", "y", "z", Split::train, {0, 0});
    db.insert("b", "y", "z", Split::train, {1, 0});
    const std::vector<double> q = {1, 1};
    const auto r = db.topk(q, 2);
    CHECK(r.zero_norm == 1);
    CHECK(r.hits[0].id == 1);
    CHECK(std::isinf(r.hits[1].score));
    CHECK_THROWS_AS(db.topk(q, 0), UsageError);
  }

  TEST_CASE("filters by split and motion id") {
    Database db;
    db.insert("a", "train-a", "z", Split::train, {1, 0});
    db.insert("b", "val-b", "z", Split::val, {1, 0});
    db.insert("c", "train-c", "z", Split::train, {0.9, 0.1});
    const std::vector<double> q = {1, 0};
    CHECK(db.topk(q, 1).hits[0].high_caption == "train-a");
    QueryFilter no_self{{Split::train}, std::string("a")};
    CHECK(db.topk(q, 1, no_self).hits[0].high_caption == "train-c");
    QueryFilter both{{Split::train, Split::val}, std::nullopt};
    CHECK(db.topk(q, 3, both).hits.size() == 3);
  }

  TEST_CASE("re-encoding") {
    auto db = random_db(10, 4, 1);
    const auto before = db;
    auto same = [&](const std::string& z) {
      for (const auto& e : before.entries()) {
        if (e.low_caption == z) return e.embedding;
      }
      return std::vector<double>{};
    };
    CHECK(db.reencode_all(same) == 10);
    CHECK(db == before);
    CHECK(db.reencode_all([](const std::string&) { return std::vector<double>{1, 2, 3, 4}; }) == 10);
    CHECK(db.entries()[3].embedding == std::vector<double>{1, 2, 3, 4});
  }

  TEST_CASE("enrichment appends with fresh ids") {
    auto db = random_db(5, 3, 2);
    CHECK(db.enrich({}) == 5);
    DbEntry e;
    e.id = 999;
    e.motion_id = "new";
    e.high_caption = "added";
    e.low_caption = "added low";
    e.split = Split::val;
    e.embedding = {0.3, -0.2, 0.9};
    CHECK(db.enrich({e}) == 6);
    CHECK(db.entries().back().id == 5);
    QueryFilter all{{Split::train, Split::val, Split::external}, std::nullopt};
    CHECK(db.topk(e.embedding, 1, all).hits[0].high_caption == "added");
  }

  TEST_CASE("negative sampling skips the anchor motion") {
    auto db = random_db(20, 3, 3);
    std::mt19937_64 rng(4);
    for (int i = 0; i < 50; ++i) {
      const auto* neg = db.sample_negative(rng, "m1");
      REQUIRE(neg != nullptr);
      CHECK(neg->motion_id != "m1");
    }
    Database single;
    single.insert("only", "y", "z", Split::train, {1});
    CHECK(single.sample_negative(rng, "only") == nullptr);
    CHECK(db.distinct_motions() == 7);
  }

  TEST_CASE("binary round trip") {
    const auto path = temp_file("db.hcdb");
    const auto db = random_db(100, 6, 5);
    db.save(path);
    CHECK(Database::load(path) == db);

    Database empty;
    empty.save(path);
    CHECK(Database::load(path) == empty);
    fs::remove(path);
  }

  TEST_CASE("corrupted files are rejected") {
    const auto path = temp_file("bad.hcdb");
    random_db(3, 2, 6).save(path);
    std::string bytes;
    {
      std::ifstream in(path, std::ios::binary);
      bytes.assign(std::istreambuf_iterator<char>(in), {});
    }
    auto write = [&](const std::string& b) {
      std::ofstream out(path, std::ios::binary | std::ios::trunc);
      out << b;
    };

    std::string bad_version = bytes;
    bad_version[4] = 9;
    write(bad_version);
    try {
      Database::load(path);
      FAIL("expected an error");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("version") != std::string::npos);
    }

    write(bytes.substr(0, bytes.size() - 5));
    CHECK_THROWS_AS(Database::load(path), DataError);
    write(bytes + "x");
    CHECK_THROWS_AS(Database::load(path), DataError);
    write("nope");
    CHECK_THROWS_AS(Database::load(path), DataError);
    fs::remove(path);
    CHECK_THROWS_AS(Database::load(path), DataError);
  }
}
