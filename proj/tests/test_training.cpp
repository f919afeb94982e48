#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <unistd.h>

#include <doctest.h>

#include "hicap/error.hpp"
#include "hicap/training.hpp"

using namespace hicap;
using namespace hicap::training;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  return fs::temp_directory_path() / ("hicap-test-" + std::to_string(::getpid()) + "-" + name);
}

data::Dataset small_dataset(int classes = 4, int per_class = 10) {
  data::SynthConfig sc;
  sc.n_classes = classes;
  sc.per_class = per_class;
  sc.frames = 32;
  sc.channels = 16;
  return data::synth_generate(sc);
}

TrainConfig small_config(Variant v = Variant::complete) {
  TrainConfig cfg;
  cfg.variant = v;
  cfg.epochs = 2;
  cfg.d_model = 16;
  cfg.d_embed = 16;
  cfg.n_heads = 2;
  cfg.me_layers = 1;
  cfg.td_layers = 1;
  cfg.patch_t = 8;
  cfg.patch_j = 16;
  cfg.max_gen_len = 24;
  return cfg;
}

std::unique_ptr<Model> untrained(const TrainConfig& cfg, const data::Dataset& ds) {
  std::vector<std::string> corpus;
  for (const auto& s : ds.samples) {
    corpus.insert(corpus.end(), s.high_captions.begin(), s.high_captions.end());
    corpus.push_back(s.low_caption);
  }
  auto copy = ds;
  return Model::create(cfg, text::Vocabulary::build(corpus, 1), data::normalize(copy));
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("config JSON round trip and validation") {
    TrainConfig cfg;
    cfg.k = 3;
    cfg.variant = Variant::no_l2;
    cfg.l2_form = encoder::ContrastiveForm::hinge;
    const auto back = TrainConfig::from_json(cfg.to_json());
    CHECK(back.to_json() == cfg.to_json());
    CHECK_THROWS_AS(TrainConfig::from_json(nlohmann::json{{"bogus", 1}}), UsageError);
    CHECK_THROWS_AS(TrainConfig::from_json(nlohmann::json{{"variant", "nope"}}), UsageError);
    CHECK(TrainConfig::from_json(nlohmann::json{{"lr", 0.5}}, TrainConfig::preset("hml3d-like")).k == 3);

    TrainConfig bad;
    bad.k = 0;
    CHECK_THROWS_AS(bad.validate(), UsageError);
    bad.variant = Variant::base;  // base does not retrieve
    CHECK_NOTHROW(bad.validate());
    TrainConfig bad_c;
    bad_c.c = 1.2;
    CHECK_THROWS_AS(bad_c.validate(), UsageError);
  }

  TEST_CASE("presets") {
    const auto kit = TrainConfig::preset("kit-like");
    CHECK(kit.k == 2);
    CHECK(kit.c == 0.7);
    CHECK(kit.patch_t == 16);
    CHECK(kit.patch_j == 32);
    const auto hml = TrainConfig::preset("hml3d-like");
    CHECK(hml.k == 3);
    CHECK(hml.c == 0.5);
    CHECK(hml.patch_t == 32);
    const auto both = TrainConfig::preset("both-like");
    CHECK(both.k == 1);
    CHECK(both.c == 0.7);
    CHECK_THROWS_AS(TrainConfig::preset("nope"), UsageError);
  }

  TEST_CASE("variant effects on the objective weights") {
    TrainConfig cfg;
    CHECK(cfg.effective_lambda2() == 1.0);
    cfg.variant = Variant::no_l2;
    CHECK(cfg.effective_lambda2() == 0.0);
    cfg.variant = Variant::frozen_td_no_l2;
    CHECK(cfg.effective_lambda2() == 0.0);
    cfg.variant = Variant::base;
    CHECK_FALSE(cfg.uses_retrieval());
    for (auto v : {Variant::complete, Variant::top1_direct, Variant::no_l2, Variant::frozen_td_no_l2, Variant::base}) {
      CHECK(parse_variant(variant_name(v)) == v);
    }
  }

  TEST_CASE("total loss") {
    CHECK(total_loss(2, 3, 5, 1, 1, 1) == 10.0);
    CHECK(total_loss(2, 3, 5, 0, 0, 0) == 0.0);
    try {
      total_loss(1, std::numeric_limits<double>::quiet_NaN(), 1, 1, 1, 1);
      FAIL("expected an error");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("l2") != std::string::npos);
    }
  }

  TEST_CASE("best epoch is the earliest maximum") {
    const std::vector<double> scores = {10, 30, 30, 20};
    CHECK(select_best(scores) == 1);
    CHECK_THROWS_AS(select_best(std::vector<double>{}), UsageError);
  }

  TEST_CASE("frozen decoder variant freezes every decoder parameter") {
    const auto ds = small_dataset();
    const auto model = untrained(small_config(Variant::frozen_td_no_l2), ds);
    std::size_t frozen = 0;
    for (const auto& [path, p] : model->params().entries()) {
      const bool is_td = path.rfind("text_decoder.", 0) == 0;
      CHECK(model->params().is_frozen(path) == is_td);
      frozen += is_td;
    }
    CHECK(frozen > 0);
  }

  TEST_CASE("per-sample losses by variant") {
    const auto ds = small_dataset();
    const auto& sample = *ds.split(Split::train).front();

    auto base = untrained(small_config(Variant::base), ds);
    retrieval::Database empty;
    std::mt19937_64 rng(1);
    const auto b = sample_losses(*base, empty, sample, rng);
    CHECK_FALSE(b.l1);
    CHECK_FALSE(b.l2);
    CHECK(b.l3);

    auto complete_cfg = small_config(Variant::complete);
    complete_cfg.lambda2 = 0.0;
    auto weighted = untrained(complete_cfg, ds);
    auto no_l2 = untrained(small_config(Variant::no_l2), ds);
    retrieval::Database db;
    add_split(db, *weighted, ds, Split::train);
    std::mt19937_64 r1(2), r2(2);
    const auto w = sample_losses(*weighted, db, sample, r1);
    const auto n = sample_losses(*no_l2, db, sample, r2);
    CHECK_FALSE(n.l2);
    CHECK(w.total->value.item() == n.total->value.item());
    CHECK(w.retrieved.hits.size() == complete_cfg.k);

    auto full = untrained(small_config(Variant::complete), ds);
    std::mt19937_64 r3(3);
    const auto c = sample_losses(*full, db, sample, r3);
    REQUIRE(c.l2);
    CHECK(c.total->value.item() ==
          doctest::Approx(c.l1->value.item() + c.l2->value.item() + c.l3->value.item()).epsilon(1e-12));
  }

  TEST_CASE("one optimizer step changes re-encoded embeddings") {
    const auto ds = small_dataset();
    auto model = untrained(small_config(), ds);
    retrieval::Database db;
    add_split(db, *model, ds, Split::train);
    const auto before = db;
    CHECK(db.reencode_all([&](const std::string& z) { return model->embed_values(z); }) == db.size());
    CHECK(db == before);

    model->params().zero_grad();
    std::mt19937_64 rng(4);
    nn::backward(sample_losses(*model, db, *ds.split(Split::train).front(), rng).total);
    nn::Adam adam(nn::AdamConfig{1e-3});
    adam.step(model->params());
    db.reencode_all([&](const std::string& z) { return model->embed_values(z); });
    CHECK_FALSE(db == before);
  }

  TEST_CASE("training rejects unusable datasets") {
    auto ds = small_dataset(2, 10);
    auto no_val = ds;
    for (auto& s : no_val.samples) {
      if (s.split == Split::val) s.split = Split::train;
    }
    CHECK_THROWS_AS(train(no_val, small_config()), UsageError);
    auto missing = ds;
    missing.samples.front().low_caption.clear();
    missing.samples.front().split = Split::train;
    CHECK_THROWS_AS(train(missing, small_config()), DataError);
  }

  TEST_CASE("single training sample retrieves its own caption") {
    auto ds = small_dataset(2, 1);
    ds.samples[0].split = Split::train;
    ds.samples[1].split = Split::val;
    auto cfg = small_config();
    cfg.epochs = 1;
    cfg.k = 1;
    const auto r = train(ds, cfg);
    CHECK(r.logs.size() == 1);
    const auto inf = infer(*r.model, r.db, ds.samples[0].motion, Variant::complete, 1);
    REQUIRE(inf.retrieved.hits.size() == 1);
    const auto& own = ds.samples[0].high_captions;
    CHECK(std::find(own.begin(), own.end(), inf.retrieved.hits[0].high_caption) != own.end());
    CHECK(r.warnings.size() == 1);  // one distinct motion: contrastive term skipped
  }

  TEST_CASE("short training run: logs, determinism and the top1-direct contract") {
    const auto ds = small_dataset();
    const auto cfg = small_config(Variant::top1_direct);
    std::ostringstream log;
    const auto a = train(ds, cfg, nullptr, &log);
    const auto b = train(ds, cfg);
    REQUIRE(a.logs.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) CHECK(a.logs[i].to_json(false) == b.logs[i].to_json(false));
    std::istringstream lines(log.str());
    std::size_t n = 0;
    for (std::string line; std::getline(lines, line); ++n) {
      const auto j = nlohmann::json::parse(line);
      CHECK(j.at("config") == cfg.to_json());
      CHECK(j.contains("wall_time_s"));
    }
    CHECK(n == 2);
    CHECK(a.best_epoch >= 1);

    for (const auto* s : ds.split(Split::test)) {
      const auto inf = infer(*a.model, a.db, s->motion, Variant::top1_direct, cfg.k);
      REQUIRE_FALSE(inf.retrieved.hits.empty());
      CHECK(inf.final_caption == inf.retrieved.hits[0].high_caption);
    }
  }

  TEST_CASE("checkpoint round trip and integrity checks") {
    const auto ds = small_dataset();
    const auto model = untrained(small_config(), ds);
    const auto path = temp_file("model.hckp");
    save_checkpoint(path, *model, 3, nlohmann::json{{"bleu1", 12.5}});
    const auto ck = load_checkpoint(path);
    CHECK(ck.epoch == 3);
    CHECK(ck.metrics.at("bleu1") == 12.5);
    CHECK(ck.model->snapshot() == model->snapshot());
    CHECK(ck.model->vocab() == model->vocab());
    CHECK(ck.model->config().to_json() == model->config().to_json());
    const auto& m = ds.samples.front().motion;
    CHECK(ck.model->features(m)->value == model->features(m)->value);

    std::string bytes;
    {
      std::ifstream in(path, std::ios::binary);
      bytes.assign(std::istreambuf_iterator<char>(in), {});
    }
    auto write = [&](const std::string& b) {
      std::ofstream out(path, std::ios::binary | std::ios::trunc);
      out << b;
    };
    auto tampered = bytes;
    const auto pos = tampered.find("\"vocab_hash\":\"");
    REQUIRE(pos != std::string::npos);
    char& digit = tampered[pos + 14];
    digit = digit == '0' ? '1' : '0';
    write(tampered);
    try {
      load_checkpoint(path);
      FAIL("expected an error");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("vocabulary") != std::string::npos);
    }
    write(bytes.substr(0, bytes.size() - 9));
    CHECK_THROWS_AS(load_checkpoint(path), DataError);
    write("HCKPjunk");
    CHECK_THROWS_AS(load_checkpoint(path), DataError);
    fs::remove(path);
  }

  TEST_CASE("validation metrics drive model selection") {
    const auto ds = small_dataset();
    auto cfg = small_config();
    cfg.epochs = 3;
    const auto r = train(ds, cfg);
    std::vector<double> means;
    for (const auto& l : r.logs) means.push_back(l.val.mean());
    CHECK(r.best_epoch == select_best(means) + 1);
    const auto ev = evaluate_split(*r.model, r.db, ds, Split::val, cfg.variant, cfg.k, {}, false);
    CHECK(ev.report.mean() == doctest::Approx(r.logs[r.best_epoch - 1].val.mean()));
  }
}
