// Runs the hicap binary as a subprocess.
#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <doctest.h>
#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int exit_code = -1;
  std::string out;
  std::string err;
};

fs::path scratch() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / ("hicap-cli-" + std::to_string(::getpid()));
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Run run(const std::string& args) {
  const auto err_path = scratch() / "stderr.txt";
  const std::string cmd = std::string(HICAP_CLI_PATH) + " " + args + " 2>" + err_path.string();
  Run r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  for (std::size_t n; (n = std::fread(buf, 1, sizeof buf, pipe)) > 0;) r.out.append(buf, n);
  const int status = ::pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = slurp(err_path);
  return r;
}

std::string path(const std::string& name) { return (scratch() / name).string(); }

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("help output matches the snapshots") {
    CHECK(run("--help").out == slurp(fs::path(HICAP_SNAPSHOT_DIR) / "help.txt"));
    CHECK(run("train --help").out == slurp(fs::path(HICAP_SNAPSHOT_DIR) / "train_help.txt"));
  }

  TEST_CASE("exit codes") {
    CHECK(run("").exit_code == 2);
    CHECK(run("train --no-such-flag").exit_code == 2);
    CHECK(run("train --data x --variant nope").exit_code == 2);
    const auto missing = run("stats --data /nonexistent/data.jsonl");
    CHECK(missing.exit_code == 3);
    CHECK(missing.err.find("/nonexistent/data.jsonl") != std::string::npos);
    CHECK(run("grad-check --loss l3 --trials 1 --tol 0").exit_code == 4);
    CHECK(run("grad-check --loss l3 --trials 2").exit_code == 0);
  }

  TEST_CASE("stats from counts") {
    const auto r = run("stats --words 15573 --motions 29227 --lemmas 7090");
    REQUIRE(r.exit_code == 0);
    const auto j = json::parse(r.out);
    CHECK(j.at("words_per_motion").get<double>() == doctest::Approx(15573.0 / 29227.0));
    CHECK(j.at("lemmas_per_motion").get<double>() == doctest::Approx(7090.0 / 29227.0));
  }

  TEST_CASE("end-to-end: generate, train, evaluate, caption, enrich") {
    const auto data = path("data.jsonl"), ckpt = path("m.hckp"), db = path("db.hcdb"), log = path("log.jsonl");
    REQUIRE(run("--seed 3 gen-data --classes 3 --per-class 10 --frames 32 --channels 16 --out " + data).exit_code ==
            0);
    const auto stats = run("stats --lemmatize --data " + data);
    REQUIRE(stats.exit_code == 0);
    CHECK(json::parse(stats.out).at("n_motions") == 30);

    const std::string tiny =
        " --epochs 2 --d-model 16 --d-embed 16 --n-heads 2 --me-layers 1 --td-layers 1 --patch-t 8 --patch-j 16"
        " --max-gen-len 20";
    const auto train = run("--log-path " + log + " train --data " + data + " --out-ckpt " + ckpt + " --out-db " + db + tiny);
    REQUIRE_MESSAGE(train.exit_code == 0, train.err);
    const auto summary = json::parse(train.out);
    CHECK(summary.at("config").at("epochs") == 2);
    std::ifstream lines(log);
    std::size_t n = 0;
    for (std::string line; std::getline(lines, line); ++n) CHECK(json::parse(line).contains("config"));
    CHECK(n >= 2);

    const auto eval = run("eval --ckpt " + ckpt + " --db " + db + " --data " + data + " --split test");
    REQUIRE_MESSAGE(eval.exit_code == 0, eval.err);
    const auto report = json::parse(eval.out);
    for (const char* key : {"bleu1", "bleu4", "rougeL", "cider", "config"}) CHECK(report.contains(key));

    const auto cap = run("caption --ckpt " + ckpt + " --db " + db + " --data " + data + " --motion-id synth-c00-0000");
    REQUIRE_MESSAGE(cap.exit_code == 0, cap.err);
    CHECK(json::parse(cap.out).contains("final_caption"));

    const auto bigger = path("db2.hcdb");
    const auto enrich =
        run("enrich-db --ckpt " + ckpt + " --db " + db + " --data " + data + " --split val --out " + bigger);
    REQUIRE_MESSAGE(enrich.exit_code == 0, enrich.err);
    CHECK(fs::file_size(bigger) > fs::file_size(db));

    CHECK(run("eval --ckpt " + data + " --db " + db + " --data " + data).exit_code == 3);
    fs::remove_all(scratch());
  }
}
