// Command-line front end over the C interface. Machine-readable JSON goes to
// stdout, human-readable tables to stderr.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hicap/hicap.h"

namespace {

using json = nlohmann::json;

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

// A failed library call, carrying the status as the exit code.
struct Failure {
  int code;
  std::string message;
};

void check(hicap_status st) {
  if (st != HICAP_OK) throw Failure{static_cast<int>(st), hicap_last_error()};
}

json take_json(char* s) {
  std::unique_ptr<char, decltype(&hicap_string_free)> owner(s, &hicap_string_free);
  return json::parse(s);
}

struct DatasetHandle {
  hicap_dataset* p = nullptr;
  ~DatasetHandle() { hicap_dataset_free(p); }
};
struct ModelHandle {
  hicap_model* p = nullptr;
  ~ModelHandle() { hicap_model_free(p); }
};
struct DbHandle {
  hicap_db* p = nullptr;
  ~DbHandle() { hicap_db_free(p); }
};

json library_defaults() {
  char* out = nullptr;
  check(hicap_train_defaults(nullptr, &out));
  return take_json(out);
}

struct Globals {
  std::uint64_t seed = 7;
  std::string log_path;
  std::string config_path;
  json config = json::object();  // loaded --config file
};

// Reads a value from the --config file unless the flag was given explicitly.
template <typename T>
void from_config(const Globals& g, const CLI::App* cmd, const char* flag, const char* key, T& value) {
  if (cmd->count(flag) == 0 && g.config.contains(key)) value = g.config.at(key).get<T>();
}

void emit(const Globals& g, const json& out) {
  std::cout << out.dump(2) << std::endl;
  if (!g.log_path.empty()) {
    std::ofstream log(g.log_path, std::ios::app);
    if (!log) throw Failure{kExitData, "cannot open log file '" + g.log_path + "'"};
    log << out.dump() << '\n';
  }
}

void table(const std::vector<std::pair<std::string, std::string>>& rows) {
  std::size_t w = 0;
  for (const auto& [k, _] : rows) w = std::max(w, k.size());
  for (const auto& [k, v] : rows) std::fprintf(stderr, "  %-*s  %s\n", static_cast<int>(w), k.c_str(), v.c_str());
}

std::string num(double v, int prec = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

void print_metrics(const json& r) {
  table({{"BLEU-1", num(r.at("bleu1"))},
         {"BLEU-4", num(r.at("bleu4"))},
         {"ROUGE-L", num(r.at("rougeL"))},
         {"CIDEr", num(r.at("cider"))},
         {"mean", num(r.at("mean"))},
         {"pairs", r.at("n_pairs").dump()}});
  for (const auto& w : r.at("warnings")) std::fprintf(stderr, "warning: %s\n", w.get<std::string>().c_str());
}

json splits_json(const std::vector<std::string>& splits) { return json(splits); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical motion captioning: data, training, retrieval and evaluation.", "hicap"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", std::string(hicap_version()));

  Globals g;
  app.add_option("--seed", g.seed, "Random seed for generation, training and gradient checks")->capture_default_str();
  app.add_option("--log-path", g.log_path, "Append JSON records (epoch logs, reports) to this file");
  app.add_option("--config", g.config_path, "JSON file of option values; explicit flags take precedence");

  json defaults;
  try {
    defaults = library_defaults();
  } catch (const Failure& f) {
    std::fprintf(stderr, "error: %s\n", f.message.c_str());
    return f.code;
  }

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic motion-caption dataset");
  int classes = 8, per_class = 25, frames = 64, channels = 32;
  std::string gen_out;
  gen->add_option("--classes", classes, "Number of motion classes")->capture_default_str();
  gen->add_option("--per-class", per_class, "Samples per class")->capture_default_str();
  gen->add_option("--frames", frames, "Frames per motion")->capture_default_str();
  gen->add_option("--channels", channels, "Joint-state channels per frame")->capture_default_str();
  gen->add_option("--out", gen_out, "Output dataset (JSON lines)")->required();

  // stats
  auto* st = app.add_subcommand("stats", "Word and lemma statistics of a dataset, or ratios from raw counts");
  std::string st_data;
  bool st_lemmatize = false;
  long long st_words = -1, st_motions = -1, st_lemmas = -1;
  st->add_option("--data", st_data, "Dataset (JSON lines)");
  st->add_flag("--lemmatize", st_lemmatize, "Also report lemma counts and lemmas per motion");
  st->add_option("--words", st_words, "Distinct word count (with --motions, instead of --data)");
  st->add_option("--motions", st_motions, "Motion count");
  st->add_option("--lemmas", st_lemmas, "Distinct lemma count");

  // train
  auto* tr = app.add_subcommand("train", "Train a model and build its retrieval database");
  std::string tr_data, tr_ckpt, tr_db, tr_preset, tr_variant = defaults["variant"], tr_form = defaults["l2_form"];
  std::size_t tr_k = defaults["k"], tr_epochs = defaults["epochs"], tr_batch = defaults["batch_size"];
  double tr_c = defaults["c"], tr_lr = defaults["lr"], tr_l1 = defaults["lambda1"], tr_l2 = defaults["lambda2"],
         tr_l3 = defaults["lambda3"], tr_clip = defaults["grad_clip"];
  std::size_t tr_dmodel = defaults["d_model"], tr_heads = defaults["n_heads"], tr_me = defaults["me_layers"],
              tr_td = defaults["td_layers"], tr_te = defaults["te_layers"], tr_dembed = defaults["d_embed"],
              tr_pt = defaults["patch_t"], tr_pj = defaults["patch_j"], tr_gen = defaults["max_gen_len"];
  bool tr_exclude = false, tr_lemmatize = false;
  tr->add_option("--data", tr_data, "Training dataset (JSON lines)")->required();
  tr->add_option("--out-ckpt", tr_ckpt, "Checkpoint to write")->required();
  tr->add_option("--out-db", tr_db, "Retrieval database to write")->required();
  tr->add_option("--preset", tr_preset, "Hyper-parameter preset applied before other flags")
      ->check(CLI::IsMember({"kit-like", "hml3d-like", "both-like"}));
  tr->add_option("--variant", tr_variant, "complete, top1_direct, no_l2, frozen_td_no_l2 or base")
      ->check(CLI::IsMember({"complete", "top1_direct", "no_l2", "frozen_td_no_l2", "base"}))
      ->capture_default_str();
  tr->add_option("--k", tr_k, "Retrieved captions per query")->capture_default_str();
  tr->add_option("--c", tr_c, "Contrastive margin constant")->capture_default_str();
  tr->add_option("--lambda1", tr_l1, "Weight of the low-level caption loss")->capture_default_str();
  tr->add_option("--lambda2", tr_l2, "Weight of the contrastive loss")->capture_default_str();
  tr->add_option("--lambda3", tr_l3, "Weight of the final caption loss")->capture_default_str();
  tr->add_option("--lr", tr_lr, "Adam learning rate")->capture_default_str();
  tr->add_option("--epochs", tr_epochs, "Training epochs")->capture_default_str();
  tr->add_option("--batch", tr_batch, "Batch size")->capture_default_str();
  tr->add_option("--l2-form", tr_form, "Contrastive loss form: paper or hinge")
      ->check(CLI::IsMember({"paper", "hinge"}))
      ->capture_default_str();
  tr->add_flag("--exclude-self", tr_exclude, "Exclude the query motion's own captions from training retrieval");
  tr->add_flag("--lemmatize", tr_lemmatize, "Lemmatize captions for validation metrics");
  tr->add_option("--grad-clip", tr_clip, "Global gradient-norm clip (0 disables)")->capture_default_str();
  tr->add_option("--d-model", tr_dmodel, "Motion encoder and decoder width")->capture_default_str();
  tr->add_option("--n-heads", tr_heads, "Attention heads")->capture_default_str();
  tr->add_option("--me-layers", tr_me, "Motion encoder layers")->capture_default_str();
  tr->add_option("--td-layers", tr_td, "Text decoder layers")->capture_default_str();
  tr->add_option("--te-layers", tr_te, "Text encoder layers")->capture_default_str();
  tr->add_option("--d-embed", tr_dembed, "Sentence embedding width")->capture_default_str();
  tr->add_option("--patch-t", tr_pt, "Patch length in frames")->capture_default_str();
  tr->add_option("--patch-j", tr_pj, "Patch width in channels")->capture_default_str();
  tr->add_option("--max-gen-len", tr_gen, "Maximum generated caption length")->capture_default_str();

  // eval
  auto* ev = app.add_subcommand("eval", "Caption a split and score it, or score candidate/reference files");
  std::string ev_ckpt, ev_db, ev_data, ev_split = "test", ev_variant, ev_cands, ev_refs;
  std::size_t ev_k = 0;
  bool ev_lemmatize = false, ev_outputs = false;
  std::vector<std::string> ev_db_splits = {"train"};
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint");
  ev->add_option("--db", ev_db, "Retrieval database");
  ev->add_option("--data", ev_data, "Dataset (JSON lines)");
  ev->add_option("--split", ev_split, "Split to caption")->capture_default_str();
  ev->add_option("--variant", ev_variant, "Inference variant (default: the checkpoint's)");
  ev->add_option("--k", ev_k, "Retrieved captions (default: the checkpoint's)");
  ev->add_option("--db-splits", ev_db_splits, "Database splits eligible for retrieval")->capture_default_str();
  ev->add_flag("--lemmatize", ev_lemmatize, "Lemmatize candidates and references before scoring");
  ev->add_flag("--outputs", ev_outputs, "Include every generated caption in the report");
  ev->add_option("--candidates", ev_cands, "JSON lines of {id, candidate} (scoring mode)");
  ev->add_option("--references", ev_refs, "JSON lines of {id, references} (scoring mode)");

  // caption
  auto* cap = app.add_subcommand("caption", "Caption one motion of a dataset");
  std::string cap_ckpt, cap_db, cap_data, cap_id, cap_variant;
  std::size_t cap_k = 0;
  std::vector<std::string> cap_db_splits = {"train"};
  cap->add_option("--ckpt", cap_ckpt, "Checkpoint")->required();
  cap->add_option("--db", cap_db, "Retrieval database")->required();
  cap->add_option("--data", cap_data, "Dataset holding the motion")->required();
  cap->add_option("--motion-id", cap_id, "Motion to caption")->required();
  cap->add_option("--k", cap_k, "Retrieved captions (default: the checkpoint's)");
  cap->add_option("--variant", cap_variant, "Inference variant (default: the checkpoint's)");
  cap->add_option("--db-splits", cap_db_splits, "Database splits eligible for retrieval")->capture_default_str();

  // retrieve
  auto* rt = app.add_subcommand("retrieve", "Embed a text and list the closest database captions");
  std::string rt_db, rt_ckpt, rt_text;
  std::size_t rt_k = 0;
  std::vector<std::string> rt_db_splits = {"train"};
  rt->add_option("--db", rt_db, "Retrieval database")->required();
  rt->add_option("--ckpt", rt_ckpt, "Checkpoint whose text encoder embeds the query")->required();
  rt->add_option("--text", rt_text, "Query text")->required();
  rt->add_option("--k", rt_k, "Results to return (default: the checkpoint's k)");
  rt->add_option("--db-splits", rt_db_splits, "Database splits eligible for retrieval")->capture_default_str();

  // enrich-db
  auto* en = app.add_subcommand("enrich-db", "Add a split's captions to a database");
  std::string en_db, en_data, en_split = "val", en_ckpt, en_out;
  en->add_option("--db", en_db, "Database to enrich")->required();
  en->add_option("--data", en_data, "Dataset supplying the captions")->required();
  en->add_option("--split", en_split, "Split to add")->capture_default_str();
  en->add_option("--ckpt", en_ckpt, "Checkpoint whose text encoder embeds the captions")->required();
  en->add_option("--out", en_out, "Output database (default: overwrite --db)");

  // expand-captions
  auto* ex = app.add_subcommand("expand-captions", "Fill missing low-level captions from a text-generation endpoint");
  std::string ex_data, ex_endpoint, ex_template, ex_out, ex_cache;
  double ex_timeout = 30.0;
  int ex_retries = 3, ex_concurrency = 4;
  ex->add_option("--data", ex_data, "Dataset (JSON lines)")->required();
  ex->add_option("--endpoint", ex_endpoint, "URL accepting POST {prompt} and answering {text}")->required();
  ex->add_option("--template", ex_template, "Prompt template file; {caption} marks the high-level captions");
  ex->add_option("--out", ex_out, "Output dataset (default: overwrite --data)");
  ex->add_option("--cache", ex_cache, "Cache file mapping caption hashes to expansions");
  ex->add_option("--timeout", ex_timeout, "Per-request timeout in seconds")->capture_default_str();
  ex->add_option("--max-retries", ex_retries, "Retries after a failed request")->capture_default_str();
  ex->add_option("--max-concurrency", ex_concurrency, "Concurrent requests")->capture_default_str();

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of a loss term on a toy model");
  std::string gc_loss = "l1", gc_form = "paper";
  std::size_t gc_trials = 20;
  double gc_eps = 1e-5, gc_tol = 1e-4;
  gc->add_option("--loss", gc_loss, "Loss term: l1, l2 or l3")->check(CLI::IsMember({"l1", "l2", "l3"}))
      ->capture_default_str();
  gc->add_option("--form", gc_form, "Contrastive form for l2: paper or hinge")
      ->check(CLI::IsMember({"paper", "hinge"}))
      ->capture_default_str();
  gc->add_option("--trials", gc_trials, "Random trials")->capture_default_str();
  gc->add_option("--eps", gc_eps, "Central-difference step")->capture_default_str();
  gc->add_option("--tol", gc_tol, "Maximum accepted relative error")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }

  try {
    if (!g.config_path.empty()) {
      std::ifstream in(g.config_path);
      if (!in) throw Failure{kExitData, "cannot open config file '" + g.config_path + "'"};
      try {
        g.config = json::parse(in);
      } catch (const json::exception& e) {
        throw Failure{kExitData, "config file '" + g.config_path + "': " + e.what()};
      }
      if (!g.config.is_object()) throw Failure{kExitUsage, "config file must hold a JSON object"};
      if (app.count("--seed") == 0 && g.config.contains("seed")) g.seed = g.config.at("seed").get<std::uint64_t>();
    }

    if (*gen) {
      from_config(g, gen, "--classes", "classes", classes);
      from_config(g, gen, "--per-class", "per_class", per_class);
      from_config(g, gen, "--frames", "frames", frames);
      from_config(g, gen, "--channels", "channels", channels);
      const json opts = {{"classes", classes}, {"per_class", per_class}, {"frames", frames},
                         {"channels", channels}, {"seed", g.seed}};
      DatasetHandle ds;
      check(hicap_dataset_generate(opts.dump().c_str(), &ds.p));
      check(hicap_dataset_save(ds.p, gen_out.c_str()));
      std::size_t n = 0;
      check(hicap_dataset_size(ds.p, &n));
      table({{"samples", std::to_string(n)}, {"written to", gen_out}});
      emit(g, {{"command", "gen-data"}, {"config", opts}, {"out", gen_out}, {"n_samples", n}});
      return 0;
    }

    if (*st) {
      from_config(g, st, "--lemmatize", "lemmatize", st_lemmatize);
      json out;
      if (!st_data.empty()) {
        if (st->count("--words") || st->count("--motions") || st->count("--lemmas")) {
          throw Failure{kExitUsage, "use either --data or raw counts, not both"};
        }
        DatasetHandle ds;
        check(hicap_dataset_load(st_data.c_str(), &ds.p));
        char* s = nullptr;
        check(hicap_dataset_stats(ds.p, st_lemmatize ? 1 : 0, &s));
        out = take_json(s);
      } else {
        if (st_words < 0 || st_motions < 0) throw Failure{kExitUsage, "stats needs --data or --words and --motions"};
        char* s = nullptr;
        check(hicap_stats_from_counts(st_words, st_motions, st_lemmas, &s));
        out = take_json(s);
      }
      std::vector<std::pair<std::string, std::string>> rows;
      for (const auto& [k, v] : out.items()) rows.emplace_back(k, v.is_number_float() ? num(v.get<double>()) : v.dump());
      table(rows);
      emit(g, out);
      return 0;
    }

    if (*tr) {
      json cfg = g.config;
      cfg.erase("seed");
      if (tr->count("--preset")) cfg["preset"] = tr_preset;
      auto set = [&](const char* flag, const char* key, const json& value) {
        if (tr->count(flag)) cfg[key] = value;
      };
      set("--variant", "variant", tr_variant);
      set("--k", "k", tr_k);
      set("--c", "c", tr_c);
      set("--lambda1", "lambda1", tr_l1);
      set("--lambda2", "lambda2", tr_l2);
      set("--lambda3", "lambda3", tr_l3);
      set("--lr", "lr", tr_lr);
      set("--epochs", "epochs", tr_epochs);
      set("--batch", "batch_size", tr_batch);
      set("--l2-form", "l2_form", tr_form);
      if (tr_exclude) cfg["exclude_self"] = true;
      if (tr_lemmatize) cfg["lemmatize_val"] = true;
      set("--grad-clip", "grad_clip", tr_clip);
      set("--d-model", "d_model", tr_dmodel);
      set("--n-heads", "n_heads", tr_heads);
      set("--me-layers", "me_layers", tr_me);
      set("--td-layers", "td_layers", tr_td);
      set("--te-layers", "te_layers", tr_te);
      set("--d-embed", "d_embed", tr_dembed);
      set("--patch-t", "patch_t", tr_pt);
      set("--patch-j", "patch_j", tr_pj);
      set("--max-gen-len", "max_gen_len", tr_gen);
      cfg["seed"] = g.seed;

      DatasetHandle ds;
      check(hicap_dataset_load(tr_data.c_str(), &ds.p));
      ModelHandle model;
      DbHandle db;
      char* s = nullptr;
      check(hicap_train(ds.p, cfg.dump().c_str(), g.log_path.empty() ? nullptr : g.log_path.c_str(), &model.p, &db.p,
                        &s));
      json summary = take_json(s);
      check(hicap_model_save(model.p, tr_ckpt.c_str()));
      check(hicap_db_save(db.p, tr_db.c_str()));
      std::fprintf(stderr, "  %-5s %10s %10s %10s %10s %8s %8s\n", "epoch", "L1", "L2", "L3", "L", "BLEU-1", "mean");
      for (const auto& row : summary.at("epochs")) {
        std::fprintf(stderr, "  %-5s %10s %10s %10s %10s %8s %8s\n", row.at("epoch").dump().c_str(),
                     num(row.at("l1"), 3).c_str(), num(row.at("l2"), 3).c_str(), num(row.at("l3"), 3).c_str(),
                     num(row.at("loss"), 3).c_str(), num(row.at("val").at("bleu1")).c_str(),
                     num(row.at("val").at("mean")).c_str());
      }
      std::fprintf(stderr, "  selected epoch %s\n", summary.at("best_epoch").dump().c_str());
      for (const auto& w : summary.at("warnings")) std::fprintf(stderr, "warning: %s\n", w.get<std::string>().c_str());
      summary["command"] = "train";
      summary["checkpoint"] = tr_ckpt;
      summary["db"] = tr_db;
      std::cout << summary.dump(2) << std::endl;
      return 0;
    }

    if (*ev) {
      from_config(g, ev, "--lemmatize", "lemmatize", ev_lemmatize);
      if (!ev_cands.empty() || !ev_refs.empty()) {
        if (ev_cands.empty() || ev_refs.empty()) {
          throw Failure{kExitUsage, "scoring mode needs both --candidates and --references"};
        }
        char* s = nullptr;
        check(hicap_score_files(ev_cands.c_str(), ev_refs.c_str(), ev_lemmatize ? 1 : 0, &s));
        json report = take_json(s);
        print_metrics(report);
        report["config"] = {{"candidates", ev_cands}, {"references", ev_refs}, {"lemmatize", ev_lemmatize}};
        emit(g, report);
        return 0;
      }
      if (ev_ckpt.empty() || ev_db.empty() || ev_data.empty()) {
        throw Failure{kExitUsage, "eval needs --ckpt, --db and --data (or --candidates and --references)"};
      }
      from_config(g, ev, "--split", "split", ev_split);
      from_config(g, ev, "--variant", "variant", ev_variant);
      from_config(g, ev, "--k", "k", ev_k);
      from_config(g, ev, "--db-splits", "db_splits", ev_db_splits);
      json opts = {{"split", ev_split}, {"lemmatize", ev_lemmatize}, {"db_splits", splits_json(ev_db_splits)},
                   {"outputs", ev_outputs}};
      if (!ev_variant.empty()) opts["variant"] = ev_variant;
      if (ev_k > 0) opts["k"] = ev_k;
      ModelHandle model;
      DbHandle db;
      DatasetHandle ds;
      check(hicap_model_load(ev_ckpt.c_str(), &model.p));
      check(hicap_db_load(ev_db.c_str(), &db.p));
      check(hicap_dataset_load(ev_data.c_str(), &ds.p));
      char* s = nullptr;
      check(hicap_evaluate(model.p, db.p, ds.p, opts.dump().c_str(), &s));
      json report = take_json(s);
      print_metrics(report);
      report["config"] = opts;
      emit(g, report);
      return 0;
    }

    if (*cap) {
      from_config(g, cap, "--variant", "variant", cap_variant);
      from_config(g, cap, "--k", "k", cap_k);
      from_config(g, cap, "--db-splits", "db_splits", cap_db_splits);
      json opts = {{"db_splits", splits_json(cap_db_splits)}};
      if (!cap_variant.empty()) opts["variant"] = cap_variant;
      if (cap_k > 0) opts["k"] = cap_k;
      ModelHandle model;
      DbHandle db;
      DatasetHandle ds;
      check(hicap_model_load(cap_ckpt.c_str(), &model.p));
      check(hicap_db_load(cap_db.c_str(), &db.p));
      check(hicap_dataset_load(cap_data.c_str(), &ds.p));
      char* s = nullptr;
      check(hicap_caption(model.p, db.p, ds.p, cap_id.c_str(), opts.dump().c_str(), &s));
      json out = take_json(s);
      table({{"low-level", out.at("low_caption").get<std::string>()},
             {"final", out.at("final_caption").get<std::string>()}});
      out["config"] = opts;
      emit(g, out);
      return 0;
    }

    if (*rt) {
      from_config(g, rt, "--k", "k", rt_k);
      from_config(g, rt, "--db-splits", "db_splits", rt_db_splits);
      json opts = {{"db_splits", splits_json(rt_db_splits)}};
      if (rt_k > 0) opts["k"] = rt_k;
      ModelHandle model;
      DbHandle db;
      check(hicap_model_load(rt_ckpt.c_str(), &model.p));
      check(hicap_db_load(rt_db.c_str(), &db.p));
      char* s = nullptr;
      check(hicap_retrieve_text(model.p, db.p, rt_text.c_str(), opts.dump().c_str(), &s));
      json out = take_json(s);
      std::vector<std::pair<std::string, std::string>> rows;
      for (const auto& h : out.at("results")) rows.emplace_back(num(h.at("score"), 4), h.at("caption").get<std::string>());
      table(rows);
      out["config"] = opts;
      emit(g, out);
      return 0;
    }

    if (*en) {
      from_config(g, en, "--split", "split", en_split);
      ModelHandle model;
      DbHandle db;
      DatasetHandle ds;
      check(hicap_model_load(en_ckpt.c_str(), &model.p));
      check(hicap_db_load(en_db.c_str(), &db.p));
      check(hicap_dataset_load(en_data.c_str(), &ds.p));
      std::size_t before = 0, after = 0;
      check(hicap_db_size(db.p, &before));
      check(hicap_db_enrich(db.p, model.p, ds.p, en_split.c_str(), &after));
      const std::string out_path = en_out.empty() ? en_db : en_out;
      check(hicap_db_save(db.p, out_path.c_str()));
      table({{"entries before", std::to_string(before)}, {"entries after", std::to_string(after)}});
      emit(g, {{"command", "enrich-db"},
               {"config", {{"split", en_split}, {"db", en_db}, {"data", en_data}, {"ckpt", en_ckpt}}},
               {"out", out_path},
               {"size_before", before},
               {"size_after", after}});
      return 0;
    }

    if (*ex) {
      from_config(g, ex, "--timeout", "timeout", ex_timeout);
      from_config(g, ex, "--max-retries", "max_retries", ex_retries);
      from_config(g, ex, "--max-concurrency", "max_concurrency", ex_concurrency);
      json opts = {{"endpoint", ex_endpoint},
                   {"timeout_s", ex_timeout},
                   {"max_retries", ex_retries},
                   {"max_concurrency", ex_concurrency}};
      if (!ex_template.empty()) {
        std::ifstream in(ex_template);
        if (!in) throw Failure{kExitData, "cannot open template '" + ex_template + "'"};
        std::stringstream buf;
        buf << in.rdbuf();
        opts["template"] = buf.str();
      }
      if (!ex_cache.empty()) opts["cache"] = ex_cache;
      DatasetHandle ds;
      check(hicap_dataset_load(ex_data.c_str(), &ds.p));
      char* s = nullptr;
      check(hicap_dataset_expand_captions(ds.p, opts.dump().c_str(), &s));
      json report = take_json(s);
      const std::string out_path = ex_out.empty() ? ex_data : ex_out;
      check(hicap_dataset_save(ds.p, out_path.c_str()));
      table({{"requested", report.at("requested").dump()},
             {"filled", report.at("filled").dump()},
             {"from cache", report.at("from_cache").dump()},
             {"failed", report.at("failed").dump()}});
      report["command"] = "expand-captions";
      report["config"] = opts;
      report["out"] = out_path;
      emit(g, report);
      return 0;
    }

    if (*gc) {
      from_config(g, gc, "--trials", "trials", gc_trials);
      from_config(g, gc, "--eps", "eps", gc_eps);
      from_config(g, gc, "--tol", "tol", gc_tol);
      const json opts = {{"loss", gc_loss}, {"form", gc_form}, {"trials", gc_trials}, {"seed", g.seed},
                         {"eps", gc_eps}};
      char* s = nullptr;
      check(hicap_grad_check(opts.dump().c_str(), &s));
      json report = take_json(s);
      const bool ok = report.at("max_rel_error").get<double>() < gc_tol;
      report["tolerance"] = gc_tol;
      report["passed"] = ok;
      report["config"] = opts;
      table({{"loss", gc_loss}, {"max relative error", num(report.at("max_rel_error"), 10)},
             {"result", ok ? "pass" : "FAIL"}});
      emit(g, report);
      return ok ? 0 : kExitNumeric;
    }
  } catch (const Failure& f) {
    std::fprintf(stderr, "error: %s\n", f.message.c_str());
    return f.code;
  } catch (const json::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  return kExitUsage;
}
