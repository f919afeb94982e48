#include "hicap/hicap.h"

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include "hicap/data.hpp"
#include "hicap/error.hpp"
#include "hicap/metrics.hpp"
#include "hicap/retrieval_db.hpp"
#include "hicap/training.hpp"

struct hicap_dataset {
  hicap::data::Dataset ds;
};

struct hicap_model {
  std::unique_ptr<hicap::training::Model> model;
  std::size_t epoch = 0;
  nlohmann::json metrics = nlohmann::json::object();
};

struct hicap_db {
  hicap::retrieval::Database db;
};

namespace {

using namespace hicap;
using json = nlohmann::json;

thread_local std::string g_last_error;

hicap_status set_error(hicap_status status, const std::string& message) {
  g_last_error = message;
  return status;
}

// Runs `fn`, mapping exceptions onto status codes.
template <typename Fn>
hicap_status guarded(Fn&& fn) {
  g_last_error.clear();
  try {
    fn();
    return HICAP_OK;
  } catch (const Error& e) {
    return set_error(static_cast<hicap_status>(static_cast<int>(e.kind())), e.what());
  } catch (const json::exception& e) {
    return set_error(HICAP_ERR_USAGE, e.what());
  } catch (const std::bad_alloc&) {
    return set_error(HICAP_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return set_error(HICAP_ERR_INTERNAL, e.what());
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void require(const void* p, const char* what) {
  if (!p) throw UsageError(std::string(what) + " is NULL");
}

json parse_options(const char* text, const std::set<std::string>& allowed) {
  if (!text || !*text) return json::object();
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw UsageError(std::string("options are not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw UsageError("options must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw UsageError("unknown option '" + key + "'");
  }
  return j;
}

Split split_option(const std::string& name) {
  const auto s = parse_split(name);
  if (!s) throw UsageError("unknown split '" + name + "'");
  return *s;
}

training::Variant variant_option(const std::string& name) {
  const auto v = training::parse_variant(name);
  if (!v) throw UsageError("unknown variant '" + name + "'");
  return *v;
}

retrieval::QueryFilter filter_option(const json& opts) {
  retrieval::QueryFilter f;
  if (opts.contains("db_splits")) {
    f.splits.clear();
    for (const auto& s : opts.at("db_splits")) f.splits.insert(split_option(s.get<std::string>()));
    if (f.splits.empty()) throw UsageError("db_splits is empty");
  }
  return f;
}

std::size_t k_option(const json& opts, const training::Model& model) {
  if (!opts.contains("k")) return model.config().k;
  const auto k = opts.at("k").get<long long>();
  if (k < 1) throw UsageError("k must be at least 1");
  return static_cast<std::size_t>(k);
}

void check_widths(const training::Model& model, const retrieval::Database& db) {
  if (!db.empty() && db.dim() != model.config().d_embed) {
    throw DataError("database embedding width " + std::to_string(db.dim()) + " does not match checkpoint width " +
                    std::to_string(model.config().d_embed));
  }
}

json hits_json(const retrieval::RetrievalResult& r) {
  json hits = json::array();
  for (const auto& h : r.hits) hits.push_back({{"id", h.id}, {"caption", h.high_caption}, {"score", h.score}});
  return hits;
}

}  // namespace

extern "C" {

const char* hicap_version(void) { return "1.0.0"; }

const char* hicap_last_error(void) { return g_last_error.c_str(); }

void hicap_string_free(char* s) { std::free(s); }

hicap_status hicap_dataset_generate(const char* options_json, hicap_dataset** out) {
  return guarded([&] {
    require(out, "out");
    const json o = parse_options(options_json, {"classes", "per_class", "frames", "channels", "seed"});
    data::SynthConfig cfg;
    cfg.n_classes = o.value("classes", cfg.n_classes);
    cfg.per_class = o.value("per_class", cfg.per_class);
    cfg.frames = o.value("frames", cfg.frames);
    cfg.channels = o.value("channels", cfg.channels);
    cfg.seed = o.value("seed", cfg.seed);
    auto h = std::make_unique<hicap_dataset>();
    h->ds = data::synth_generate(cfg);
    *out = h.release();
  });
}

hicap_status hicap_dataset_load(const char* path, hicap_dataset** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    auto h = std::make_unique<hicap_dataset>();
    h->ds = data::load(path);
    *out = h.release();
  });
}

hicap_status hicap_dataset_save(const hicap_dataset* ds, const char* path) {
  return guarded([&] {
    require(ds, "dataset");
    require(path, "path");
    data::save(path, ds->ds);
  });
}

void hicap_dataset_free(hicap_dataset* ds) { delete ds; }

hicap_status hicap_dataset_size(const hicap_dataset* ds, size_t* out) {
  return guarded([&] {
    require(ds, "dataset");
    require(out, "out");
    *out = ds->ds.samples.size();
  });
}

hicap_status hicap_dataset_stats(const hicap_dataset* ds, int with_lemmas, char** out_json) {
  return guarded([&] {
    require(ds, "dataset");
    require(out_json, "out_json");
    json j = data::stats(ds->ds).to_json();
    if (!with_lemmas) {
      j.erase("n_lemmas");
      j.erase("lemmas_per_motion");
    }
    *out_json = dup_string(j.dump());
  });
}

hicap_status hicap_stats_from_counts(int64_t n_words, int64_t n_motions, int64_t n_lemmas, char** out_json) {
  return guarded([&] {
    require(out_json, "out_json");
    if (n_words < 0 || n_motions < 1) throw UsageError("counts: words must be >= 0 and motions >= 1");
    const auto s = data::DatasetStats::from_counts(static_cast<std::size_t>(n_words),
                                                   static_cast<std::size_t>(n_motions), 0,
                                                   n_lemmas < 0 ? 0 : static_cast<std::size_t>(n_lemmas));
    json j = s.to_json();
    j.erase("n_captions");
    if (n_lemmas < 0) {
      j.erase("n_lemmas");
      j.erase("lemmas_per_motion");
    }
    *out_json = dup_string(j.dump());
  });
}

hicap_status hicap_dataset_expand_captions(hicap_dataset* ds, const char* options_json, char** out_report_json) {
  return guarded([&] {
    require(ds, "dataset");
    const json o = parse_options(options_json, {"endpoint", "template", "timeout_s", "max_retries", "backoff_s",
                                                "cache", "token", "max_concurrency"});
    data::ExpansionOptions opt;
    if (!o.contains("endpoint")) throw UsageError("expand: endpoint is required");
    opt.endpoint = o.at("endpoint").get<std::string>();
    opt.prompt_template = o.value("template", std::string("{caption}"));
    opt.timeout_s = o.value("timeout_s", opt.timeout_s);
    opt.max_retries = o.value("max_retries", opt.max_retries);
    opt.backoff_base_s = o.value("backoff_s", opt.backoff_base_s);
    opt.max_concurrency = o.value("max_concurrency", opt.max_concurrency);
    if (o.contains("cache")) opt.cache_path = o.at("cache").get<std::string>();
    if (o.contains("token")) {
      opt.auth_token = o.at("token").get<std::string>();
    } else if (const char* env = std::getenv(data::kEndpointTokenEnv)) {
      opt.auth_token = env;
    }
    const auto report = data::expand_captions(ds->ds, opt);
    if (out_report_json) *out_report_json = dup_string(report.to_json().dump());
  });
}

hicap_status hicap_train(const hicap_dataset* ds, const char* config_json, const char* log_path,
                         hicap_model** out_model, hicap_db** out_db, char** out_summary_json) {
  return guarded([&] {
    require(ds, "dataset");
    require(out_model, "out_model");
    require(out_db, "out_db");
    json j = config_json && *config_json ? json::parse(config_json) : json::object();
    if (!j.is_object()) throw UsageError("config must be a JSON object");
    training::TrainConfig cfg;
    if (j.contains("preset")) {
      cfg = training::TrainConfig::preset(j.at("preset").get<std::string>());
      j.erase("preset");
    }
    cfg = training::TrainConfig::from_json(j, cfg);
    std::ofstream log;
    if (log_path) {
      log.open(log_path, std::ios::app);
      if (!log) throw DataError(std::string("cannot open log file '") + log_path + "'");
    }
    auto result = training::train(ds->ds, cfg, nullptr, log_path ? &log : nullptr);
    const auto& best = result.logs.at(result.best_epoch - 1);

    auto m = std::make_unique<hicap_model>();
    m->model = std::move(result.model);
    m->epoch = result.best_epoch;
    m->metrics = best.val.to_json();
    auto d = std::make_unique<hicap_db>();
    d->db = std::move(result.db);

    if (out_summary_json) {
      json logs = json::array();
      for (const auto& row : result.logs) logs.push_back(row.to_json());
      const json summary = {{"config", cfg.to_json()},
                            {"best_epoch", result.best_epoch},
                            {"val", m->metrics},
                            {"db_size", d->db.size()},
                            {"epochs", logs},
                            {"warnings", result.warnings}};
      *out_summary_json = dup_string(summary.dump());
    }
    *out_model = m.release();
    *out_db = d.release();
  });
}

hicap_status hicap_train_defaults(const char* preset, char** out_json) {
  return guarded([&] {
    require(out_json, "out_json");
    const auto cfg = preset && *preset ? training::TrainConfig::preset(preset) : training::TrainConfig{};
    *out_json = dup_string(cfg.to_json().dump());
  });
}

hicap_status hicap_model_load(const char* path, hicap_model** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    auto ck = training::load_checkpoint(path);
    auto m = std::make_unique<hicap_model>();
    m->model = std::move(ck.model);
    m->epoch = ck.epoch;
    m->metrics = ck.metrics;
    *out = m.release();
  });
}

hicap_status hicap_model_save(const hicap_model* model, const char* path) {
  return guarded([&] {
    require(model, "model");
    require(path, "path");
    training::save_checkpoint(path, *model->model, model->epoch, model->metrics);
  });
}

void hicap_model_free(hicap_model* model) { delete model; }

hicap_status hicap_model_info(const hicap_model* model, char** out_json) {
  return guarded([&] {
    require(model, "model");
    require(out_json, "out_json");
    const auto& m = *model->model;
    const json j = {{"config", m.config().to_json()},
                    {"epoch", model->epoch},
                    {"metrics", model->metrics},
                    {"vocab_size", m.vocab().size()},
                    {"n_params", m.params().scalar_count()}};
    *out_json = dup_string(j.dump());
  });
}

hicap_status hicap_db_load(const char* path, hicap_db** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    auto d = std::make_unique<hicap_db>();
    d->db = retrieval::Database::load(path);
    *out = d.release();
  });
}

hicap_status hicap_db_save(const hicap_db* db, const char* path) {
  return guarded([&] {
    require(db, "db");
    require(path, "path");
    db->db.save(path);
  });
}

void hicap_db_free(hicap_db* db) { delete db; }

hicap_status hicap_db_size(const hicap_db* db, size_t* out) {
  return guarded([&] {
    require(db, "db");
    require(out, "out");
    *out = db->db.size();
  });
}

hicap_status hicap_db_export_json(const hicap_db* db, char** out_json) {
  return guarded([&] {
    require(db, "db");
    require(out_json, "out_json");
    *out_json = dup_string(db->db.to_json().dump());
  });
}

hicap_status hicap_db_enrich(hicap_db* db, const hicap_model* model, const hicap_dataset* ds, const char* split,
                             size_t* out_size) {
  return guarded([&] {
    require(db, "db");
    require(model, "model");
    require(ds, "dataset");
    require(split, "split");
    check_widths(*model->model, db->db);
    // Build the additions first so a failure leaves the database untouched.
    retrieval::Database scratch(db->db.dim());
    training::add_split(scratch, *model->model, ds->ds, split_option(split));
    db->db.enrich(scratch.entries());
    if (out_size) *out_size = db->db.size();
  });
}

hicap_status hicap_evaluate(const hicap_model* model, const hicap_db* db, const hicap_dataset* ds,
                            const char* options_json, char** out_report_json) {
  return guarded([&] {
    require(model, "model");
    require(db, "db");
    require(ds, "dataset");
    require(out_report_json, "out_report_json");
    const json o = parse_options(options_json, {"variant", "k", "db_splits", "lemmatize", "split", "outputs"});
    const auto& m = *model->model;
    check_widths(m, db->db);
    const auto variant = o.contains("variant") ? variant_option(o.at("variant")) : m.config().variant;
    const auto split = split_option(o.value("split", std::string("test")));
    const auto ev = training::evaluate_split(m, db->db, ds->ds, split, variant, k_option(o, m), filter_option(o),
                                             o.value("lemmatize", false));
    json j = ev.report.to_json();
    j["variant"] = training::variant_name(variant);
    j["split"] = split_name(split);
    if (o.value("outputs", false)) {
      json outs = json::array();
      for (std::size_t i = 0; i < ev.outputs.size(); ++i) {
        json row = ev.outputs[i].to_json();
        row["motion_id"] = ev.motion_ids[i];
        outs.push_back(row);
      }
      j["outputs"] = outs;
    }
    *out_report_json = dup_string(j.dump());
  });
}

hicap_status hicap_caption(const hicap_model* model, const hicap_db* db, const hicap_dataset* ds,
                           const char* motion_id, const char* options_json, char** out_json) {
  return guarded([&] {
    require(model, "model");
    require(db, "db");
    require(ds, "dataset");
    require(motion_id, "motion_id");
    require(out_json, "out_json");
    const json o = parse_options(options_json, {"variant", "k", "db_splits"});
    const auto& m = *model->model;
    check_widths(m, db->db);
    const auto* sample = ds->ds.find(motion_id);
    if (!sample) throw DataError(std::string("motion id '") + motion_id + "' is not in the dataset");
    const auto variant = o.contains("variant") ? variant_option(o.at("variant")) : m.config().variant;
    const auto inf = training::infer(m, db->db, sample->motion, variant, k_option(o, m), filter_option(o));
    json j = inf.to_json();
    j["motion_id"] = motion_id;
    j["variant"] = training::variant_name(variant);
    *out_json = dup_string(j.dump());
  });
}

hicap_status hicap_retrieve_text(const hicap_model* model, const hicap_db* db, const char* text,
                                 const char* options_json, char** out_json) {
  return guarded([&] {
    require(model, "model");
    require(db, "db");
    require(text, "text");
    require(out_json, "out_json");
    const json o = parse_options(options_json, {"k", "db_splits"});
    const auto& m = *model->model;
    check_widths(m, db->db);
    if (db->db.empty()) throw UsageError("retrieve: the database is empty");
    const auto r = db->db.topk(m.embed_values(text), k_option(o, m), filter_option(o));
    const json j = {{"query", text::normalize(text)},
                    {"results", hits_json(r)},
                    {"clamped", r.clamped},
                    {"zero_norm", r.zero_norm}};
    *out_json = dup_string(j.dump());
  });
}

hicap_status hicap_score_files(const char* candidates_path, const char* references_path, int lemmatize,
                               char** out_report_json) {
  return guarded([&] {
    require(candidates_path, "candidates_path");
    require(references_path, "references_path");
    require(out_report_json, "out_report_json");
    auto read_lines = [](const char* path, const char* field) {
      std::ifstream in(path);
      if (!in) throw DataError(std::string("cannot open '") + path + "'");
      std::map<std::string, json> rows;
      std::string line;
      std::size_t lineno = 0;
      while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
          const json j = json::parse(line);
          const std::string id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
          if (!rows.emplace(id, j.at(field)).second) throw DataError("duplicate id '" + id + "'");
        } catch (const json::exception& e) {
          throw DataError(std::string(path) + ":" + std::to_string(lineno) + ": " + e.what());
        }
      }
      return rows;
    };
    const auto cands = read_lines(candidates_path, "candidate");
    const auto refs = read_lines(references_path, "references");
    std::vector<metrics::EvalPair> pairs;
    for (const auto& [id, cand] : cands) {
      auto it = refs.find(id);
      if (it == refs.end()) throw DataError("no references for id '" + id + "'");
      pairs.push_back({cand.get<std::string>(), it->second.get<std::vector<std::string>>()});
    }
    if (pairs.size() != refs.size()) throw DataError("references contain ids without candidates");
    *out_report_json = dup_string(metrics::evaluate(pairs, lemmatize != 0).to_json().dump());
  });
}

hicap_status hicap_grad_check(const char* options_json, char** out_report_json) {
  return guarded([&] {
    require(out_report_json, "out_report_json");
    const json o = parse_options(options_json, {"loss", "form", "trials", "seed", "eps"});
    const auto term = training::parse_loss_term(o.value("loss", std::string("l1")));
    if (!term) throw UsageError("unknown loss '" + o.value("loss", std::string()) + "'");
    const auto form = training::parse_form(o.value("form", std::string("paper")));
    if (!form) throw UsageError("unknown form '" + o.value("form", std::string()) + "'");
    const auto trials = o.value("trials", 20LL);
    if (trials < 1) throw UsageError("trials must be at least 1");
    const auto report = training::grad_check_term(*term, *form, static_cast<std::size_t>(trials),
                                                  o.value("seed", std::uint64_t{7}), o.value("eps", 1e-5));
    *out_report_json = dup_string(report.to_json().dump());
  });
}

}  // extern "C"
