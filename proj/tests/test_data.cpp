#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <thread>

#include <unistd.h>

#include <doctest.h>
#include <httplib.h>
#include <json.hpp>

#include "hicap/data.hpp"
#include "hicap/error.hpp"
#include "hicap/text.hpp"

using namespace hicap;
using namespace hicap::data;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  return fs::temp_directory_path() / ("hicap-test-" + std::to_string(::getpid()) + "-" + name);
}

Sample make_sample(const std::string& id, Split split, std::vector<double> values, std::size_t channels) {
  Sample s;
  s.motion_id = id;
  s.split = split;
  s.motion.channels = channels;
  s.motion.frames = values.size() / channels;
  s.motion.values = std::move(values);
  s.high_captions = {"a person " + id};
  s.low_caption = "low " + id;
  return s;
}

// Local stand-in for a text-generation endpoint.
class StubServer {
 public:
  std::atomic<int> calls{0};
  std::atomic<int> failing_calls{0};
  std::string last_auth;

  StubServer() {
    server_.Post("/generate", [this](const httplib::Request& req, httplib::Response& res) {
      ++calls;
      last_auth = req.get_header_value("Authorization");
      const auto prompt = nlohmann::json::parse(req.body).at("prompt").get<std::string>();
      if (prompt.find("broken") != std::string::npos) {
        ++failing_calls;
        res.status = 500;
        return;
      }
      if (prompt.find("garbled") != std::string::npos) {
        res.set_content("not json", "application/json");
        return;
      }
      res.set_content(nlohmann::json{{"text", "the arms move for: " + prompt}}.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubServer() {
    server_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/generate"; }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("synthetic generation is deterministic and split 80/5/15") {
    SynthConfig cfg;
    const auto a = synth_generate(cfg);
    const auto b = synth_generate(cfg);
    CHECK(a == b);
    CHECK(a.samples.size() == 200);
    CHECK(a.split(Split::train).size() == 160);
    CHECK(a.split(Split::val).size() == 10);
    CHECK(a.split(Split::test).size() == 30);
    std::set<std::string> ids;
    for (const auto& s : a.samples) ids.insert(s.motion_id);
    CHECK(ids.size() == 200);

    cfg.seed = 8;
    CHECK_FALSE(synth_generate(cfg) == a);
    cfg.n_classes = synth_max_classes() + 1;
    CHECK_THROWS_AS(synth_generate(cfg), UsageError);
  }

  TEST_CASE("samples of one class share captions but not noise") {
    const auto ds = synth_generate(SynthConfig{});
    const auto* a = ds.find("synth-c01-0000");
    const auto* b = ds.find("synth-c01-0001");
    REQUIRE(a);
    REQUIRE(b);
    CHECK(a->low_caption == b->low_caption);
    CHECK_FALSE(a->motion == b->motion);
    CHECK(synth_class_of(a->motion_id) == 1);
    CHECK_FALSE(synth_class_of("kit-0001").has_value());
  }

  TEST_CASE("classes are separable by a nearest-centroid classifier") {
    const auto ds = synth_generate(SynthConfig{});
    std::map<int, std::vector<double>> centroid;
    std::map<int, int> count;
    for (const auto* s : ds.split(Split::train)) {
      const int c = *synth_class_of(s->motion_id);
      auto& v = centroid[c];
      v.resize(s->motion.values.size(), 0.0);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] += s->motion.values[i];
      ++count[c];
    }
    for (auto& [c, v] : centroid) {
      for (auto& x : v) x /= count[c];
    }
    std::size_t correct = 0;
    const auto train = ds.split(Split::train);
    for (const auto* s : train) {
      int best = -1;
      double best_d = INFINITY;
      for (const auto& [c, v] : centroid) {
        double d = 0;
        for (std::size_t i = 0; i < v.size(); ++i) d += (s->motion.values[i] - v[i]) * (s->motion.values[i] - v[i]);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      correct += best == *synth_class_of(s->motion_id);
    }
    CHECK(static_cast<double>(correct) / static_cast<double>(train.size()) > 0.95);
  }

  TEST_CASE("normalization uses train statistics only") {
    Dataset ds;
    ds.samples.push_back(make_sample("a", Split::train, {1, 5, 3, 5}, 2));
    ds.samples.push_back(make_sample("b", Split::train, {5, 5, 7, 5}, 2));
    ds.samples.push_back(make_sample("c", Split::val, {100, 5}, 2));
    const auto stats = normalize(ds);
    CHECK(stats.mean[0] == doctest::Approx(4.0));
    CHECK(stats.std[0] == doctest::Approx(std::sqrt(5.0)));
    CHECK(stats.std[1] == NormalizationStats::kStdFloor);  // constant channel
    double mean = 0, sq = 0;
    for (const auto* s : ds.split(Split::train)) {
      for (std::size_t t = 0; t < s->motion.frames; ++t) {
        mean += s->motion.at(t, 0);
        sq += s->motion.at(t, 0) * s->motion.at(t, 0);
        CHECK(s->motion.at(t, 1) == 0.0);
      }
    }
    CHECK(std::abs(mean / 4) < 1e-12);
    CHECK(std::abs(sq / 4 - 1.0) < 1e-12);
    CHECK(ds.find("c")->motion.at(0, 0) == doctest::Approx((100 - 4) / std::sqrt(5.0)));

    // Normalizing again leaves train data unchanged.
    const auto once = ds;
    normalize(ds);
    for (std::size_t i = 0; i < ds.samples[0].motion.values.size(); ++i) {
      CHECK(std::abs(ds.samples[0].motion.values[i] - once.samples[0].motion.values[i]) < 1e-9);
    }
  }

  TEST_CASE("statistics") {
    Dataset ds;
    auto s = make_sample("a", Split::train, {0}, 1);
    s.high_captions = {"run run"};
    ds.samples.push_back(s);
    CHECK(stats(ds).n_words == 1);

    ds.samples[0].high_captions = {"runs running ran.", "a person walked"};
    const auto st = stats(ds);
    CHECK(st.n_words == 6);
    CHECK(st.n_lemmas == 4);
    CHECK(st.n_lemmas <= st.n_words);
    CHECK(st.n_captions == 2);

    const auto kit = DatasetStats::from_counts(4567, 6018, 12704, 2375);
    CHECK(std::round(kit.words_per_motion * 100) / 100 == doctest::Approx(0.76));
    const auto both = DatasetStats::from_counts(10885, 3229, 15132, 5160);
    CHECK(std::round(both.words_per_motion * 100) / 100 == doctest::Approx(3.37));
  }

  TEST_CASE("JSON-lines round trip") {
    const auto path = temp_file("ds.jsonl");
    SynthConfig cfg;
    cfg.n_classes = 3;
    cfg.per_class = 4;
    cfg.frames = 8;
    cfg.channels = 6;
    auto ds = synth_generate(cfg);
    ds.samples[2].low_caption.clear();
    save(path, ds);
    const auto back = load(path);
    CHECK(back == ds);
    CHECK(back.samples[2].needs_expansion());
    fs::remove(path);
  }

  TEST_CASE("malformed files are rejected with context") {
    const auto path = temp_file("bad.jsonl");
    auto write = [&](const std::string& body) {
      std::ofstream out(path);
      out << body;
    };
    const std::string good =
        R"({"motion_id":"x","split":"train","high_captions":["a"],"low_caption":"b","motion":{"frames":1,"channels":2,"values":[1,2]}})";

    write(good + "\n{oops\n");
    try {
      load(path);
      FAIL("expected an error");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find(":2:") != std::string::npos);
    }

    write(R"({"motion_id":"short-one","split":"train","high_captions":["a"],"low_caption":"b","motion":{"frames":2,"channels":2,"values":[1,2]}})");
    try {
      load(path);
      FAIL("expected an error");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("short-one") != std::string::npos);
    }

    write(good + "\n" + good + "\n");
    CHECK_THROWS_AS(load(path), DataError);

    write(R"({"motion_id":"x","split":"train","high_captions":[],"low_caption":"b","motion":{"frames":1,"channels":2,"values":[1,2]}})");
    CHECK_THROWS_AS(load(path), DataError);

    write(R"({"motion_id":"x","split":"train","high_captions":["a"],"motion":{"frames":1,"channels":2,"values":[1,2]}})");
    CHECK(load(path).samples[0].needs_expansion());
    fs::remove(path);
    CHECK_THROWS_AS(load(path), DataError);
  }

  TEST_CASE("prompt rendering") {
    Sample s;
    s.high_captions = {"a person waves", "someone waves"};
    const auto p = render_prompt("Describe the limbs: {caption}", s);
    CHECK(p.find("a person waves") != std::string::npos);
    CHECK(p.find("someone waves") != std::string::npos);
    CHECK(p.rfind("Describe the limbs: ", 0) == 0);
  }

  TEST_CASE("caption expansion against a local endpoint") {
    StubServer stub;
    const auto cache = temp_file("cache.json");
    fs::remove(cache);
    Dataset ds;
    for (const char* id : {"one", "two", "broken", "three"}) {
      auto s = make_sample(id, Split::train, {0}, 1);
      s.low_caption.clear();
      ds.samples.push_back(s);
    }
    ds.samples[1].low_caption = "already there";

    ExpansionOptions opt;
    opt.endpoint = stub.url();
    opt.prompt_template = "Explain the limbs: {caption}";
    opt.max_retries = 2;
    opt.backoff_base_s = 0.01;
    opt.cache_path = cache;
    opt.auth_token = "secret";
    const auto report = expand_captions(ds, opt);
    CHECK(report.requested == 3);
    CHECK(report.filled == 2);
    CHECK(report.from_cache == 0);
    REQUIRE(report.failures.size() == 1);
    CHECK(report.failures[0].motion_id == "broken");
    CHECK(report.failures[0].reason.find("500") != std::string::npos);
    CHECK(stub.failing_calls == 3);
    CHECK(report.network_calls == 5);
    CHECK(stub.last_auth == "Bearer secret");
    CHECK(ds.find("one")->low_caption.find("a person one") != std::string::npos);
    CHECK(ds.find("two")->low_caption == "already there");
    CHECK(ds.find("broken")->needs_expansion());
    CHECK(fs::exists(cache));

    // Warm cache: no requests for filled captions.
    Dataset again;
    for (const char* id : {"one", "three"}) {
      auto s = make_sample(id, Split::train, {0}, 1);
      s.low_caption.clear();
      again.samples.push_back(s);
    }
    const int before = stub.calls;
    const auto warm = expand_captions(again, opt);
    CHECK(warm.from_cache == 2);
    CHECK(warm.network_calls == 0);
    CHECK(stub.calls == before);
    CHECK(again.samples[0].low_caption == ds.find("one")->low_caption);
    fs::remove(cache);
  }

  TEST_CASE("malformed responses and unreachable endpoints are per-sample failures") {
    StubServer stub;
    Dataset ds;
    for (const char* id : {"garbled", "fine"}) {
      auto s = make_sample(id, Split::train, {0}, 1);
      s.low_caption.clear();
      ds.samples.push_back(s);
    }
    ExpansionOptions opt;
    opt.endpoint = stub.url();
    opt.max_retries = 3;
    opt.backoff_base_s = 0.01;
    auto report = expand_captions(ds, opt);
    CHECK(report.filled == 1);
    REQUIRE(report.failures.size() == 1);
    CHECK(report.failures[0].reason.find("malformed") != std::string::npos);
    CHECK(report.network_calls == 2);  // malformed responses are not retried

    Dataset lonely;
    auto s = make_sample("x", Split::train, {0}, 1);
    s.low_caption.clear();
    lonely.samples.push_back(s);
    opt.endpoint = "http://127.0.0.1:1/generate";
    opt.max_retries = 1;
    opt.timeout_s = 1.0;
    report = expand_captions(lonely, opt);
    CHECK(report.failures.size() == 1);
    CHECK(report.network_calls == 2);

    opt.endpoint = "ftp://nowhere";
    CHECK_THROWS_AS(expand_captions(lonely, opt), UsageError);
  }
}
