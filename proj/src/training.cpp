#include "hicap/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>

#include "hicap/error.hpp"

namespace hicap::training {

namespace {

constexpr std::string_view kVariantNames[] = {"complete", "top1_direct", "no_l2", "frozen_td_no_l2", "base"};
constexpr std::uint64_t kStreamSalt = 0x9e3779b97f4a7c15ULL;

}  // namespace

std::string_view variant_name(Variant v) noexcept { return kVariantNames[static_cast<int>(v)]; }

std::optional<Variant> parse_variant(std::string_view name) noexcept {
  for (int i = 0; i < 5; ++i) {
    if (kVariantNames[i] == name) return static_cast<Variant>(i);
  }
  return std::nullopt;
}

std::string_view form_name(encoder::ContrastiveForm f) noexcept {
  return f == encoder::ContrastiveForm::paper ? "paper" : "hinge";
}

std::optional<encoder::ContrastiveForm> parse_form(std::string_view name) noexcept {
  if (name == "paper") return encoder::ContrastiveForm::paper;
  if (name == "hinge") return encoder::ContrastiveForm::hinge;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// TrainConfig

double TrainConfig::effective_lambda2() const {
  switch (variant) {
    case Variant::no_l2:
    case Variant::frozen_td_no_l2:
    case Variant::base:
      return 0.0;
    default:
      return lambda2;
  }
}

void TrainConfig::validate() const {
  if (uses_retrieval() && k < 1) throw UsageError("config: k must be at least 1");
  if (!(c >= 0.0 && c <= 1.0)) throw UsageError("config: c must lie in [0, 1]");
  if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0) throw UsageError("config: loss weights must be non-negative");
  if (!(lr > 0.0)) throw UsageError("config: lr must be positive");
  if (epochs < 1) throw UsageError("config: epochs must be at least 1");
  if (batch_size < 1) throw UsageError("config: batch_size must be at least 1");
  if (d_model < 1 || d_embed < 1 || n_heads < 1) throw UsageError("config: widths must be positive");
  if (d_model % n_heads != 0 || d_embed % n_heads != 0) {
    throw UsageError("config: d_model and d_embed must be divisible by n_heads");
  }
  if (patch_t < 1 || patch_j < 1) throw UsageError("config: patch dimensions must be at least 1");
  if (max_gen_len < 1) throw UsageError("config: max_gen_len must be at least 1");
  if (min_freq < 1) throw UsageError("config: min_freq must be at least 1");
  if (!(init_std > 0.0)) throw UsageError("config: init_std must be positive");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"k", k},
          {"c", c},
          {"lambda1", lambda1},
          {"lambda2", lambda2},
          {"lambda3", lambda3},
          {"lr", lr},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"variant", variant_name(variant)},
          {"seed", seed},
          {"l2_form", form_name(l2_form)},
          {"exclude_self", exclude_self},
          {"lemmatize_val", lemmatize_val},
          {"grad_clip", grad_clip},
          {"d_model", d_model},
          {"n_heads", n_heads},
          {"me_layers", me_layers},
          {"td_layers", td_layers},
          {"te_layers", te_layers},
          {"d_embed", d_embed},
          {"patch_t", patch_t},
          {"patch_j", patch_j},
          {"max_patches", max_patches},
          {"max_seq_len", max_seq_len},
          {"max_gen_len", max_gen_len},
          {"init_std", init_std},
          {"min_freq", min_freq}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, TrainConfig cfg) {
  if (!j.is_object()) throw UsageError("config: expected a JSON object");
  const std::set<std::string> known = [] {
    std::set<std::string> keys;
    const nlohmann::json defaults = TrainConfig{}.to_json();
    for (const auto& [key, _] : defaults.items()) keys.insert(key);
    return keys;
  }();
  try {
    for (const auto& [key, value] : j.items()) {
      if (!known.count(key)) throw UsageError("config: unknown key '" + key + "'");
      if (key == "variant") {
        const auto v = parse_variant(value.get<std::string>());
        if (!v) throw UsageError("config: unknown variant '" + value.get<std::string>() + "'");
        cfg.variant = *v;
      } else if (key == "l2_form") {
        const auto f = parse_form(value.get<std::string>());
        if (!f) throw UsageError("config: unknown l2_form '" + value.get<std::string>() + "'");
        cfg.l2_form = *f;
      } else if (key == "k") cfg.k = value.get<std::size_t>();
      else if (key == "c") cfg.c = value.get<double>();
      else if (key == "lambda1") cfg.lambda1 = value.get<double>();
      else if (key == "lambda2") cfg.lambda2 = value.get<double>();
      else if (key == "lambda3") cfg.lambda3 = value.get<double>();
      else if (key == "lr") cfg.lr = value.get<double>();
      else if (key == "epochs") cfg.epochs = value.get<std::size_t>();
      else if (key == "batch_size") cfg.batch_size = value.get<std::size_t>();
      else if (key == "seed") cfg.seed = value.get<std::uint64_t>();
      else if (key == "exclude_self") cfg.exclude_self = value.get<bool>();
      else if (key == "lemmatize_val") cfg.lemmatize_val = value.get<bool>();
      else if (key == "grad_clip") cfg.grad_clip = value.get<double>();
      else if (key == "d_model") cfg.d_model = value.get<std::size_t>();
      else if (key == "n_heads") cfg.n_heads = value.get<std::size_t>();
      else if (key == "me_layers") cfg.me_layers = value.get<std::size_t>();
      else if (key == "td_layers") cfg.td_layers = value.get<std::size_t>();
      else if (key == "te_layers") cfg.te_layers = value.get<std::size_t>();
      else if (key == "d_embed") cfg.d_embed = value.get<std::size_t>();
      else if (key == "patch_t") cfg.patch_t = value.get<std::size_t>();
      else if (key == "patch_j") cfg.patch_j = value.get<std::size_t>();
      else if (key == "max_patches") cfg.max_patches = value.get<std::size_t>();
      else if (key == "max_seq_len") cfg.max_seq_len = value.get<std::size_t>();
      else if (key == "max_gen_len") cfg.max_gen_len = value.get<std::size_t>();
      else if (key == "init_std") cfg.init_std = value.get<double>();
      else if (key == "min_freq") cfg.min_freq = value.get<int>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  return cfg;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) { return from_json(j, TrainConfig{}); }

TrainConfig TrainConfig::preset(std::string_view name) {
  TrainConfig cfg;
  if (name == "kit-like") {
    cfg.k = 2;
    cfg.c = 0.7;
    cfg.patch_t = 16;
    cfg.patch_j = 32;
  } else if (name == "hml3d-like") {
    cfg.k = 3;
    cfg.c = 0.5;
    cfg.patch_t = 32;
    cfg.patch_j = 32;
    cfg.td_layers = 4;
  } else if (name == "both-like") {
    cfg.k = 1;
    cfg.c = 0.7;
    cfg.patch_t = 32;
    cfg.patch_j = 32;
  } else {
    throw UsageError("unknown preset '" + std::string(name) + "' (expected kit-like, hml3d-like or both-like)");
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Model

Model::Model(const TrainConfig& cfg, text::Vocabulary vocab, data::NormalizationStats norm)
    : cfg_(cfg), vocab_(std::move(vocab)), norm_(std::move(norm)) {}

std::unique_ptr<Model> Model::create(const TrainConfig& cfg, text::Vocabulary vocab, data::NormalizationStats norm) {
  cfg.validate();
  std::unique_ptr<Model> m(new Model(cfg, std::move(vocab), std::move(norm)));
  std::mt19937_64 rng(cfg.seed);
  const std::size_t v = m->vocab_.size();
  motion::EncoderConfig me{cfg.patch_t, cfg.patch_j, cfg.d_model, cfg.me_layers, cfg.n_heads, cfg.max_patches};
  m->me_ = std::make_unique<motion::MotionEncoder>(m->params_, "motion_encoder.", me, cfg.init_std, rng);
  decoder::DecoderConfig td{cfg.d_model, cfg.td_layers, cfg.n_heads, v, cfg.max_seq_len};
  m->td_ = std::make_unique<decoder::TextDecoder>(m->params_, "text_decoder.", td, cfg.init_std, rng);
  encoder::TextEncoderConfig te{cfg.d_embed, cfg.te_layers, cfg.n_heads, v, cfg.max_seq_len};
  m->te_ = std::make_unique<encoder::TextEncoder>(m->params_, "text_encoder.", te, cfg.init_std, rng);
  if (cfg.variant == Variant::frozen_td_no_l2) m->params_.freeze_prefix("text_decoder.");
  return m;
}

nn::Var Model::features(const MotionTensor& raw) const {
  if (norm_.mean.empty()) return me_->encode(raw);
  MotionTensor m = raw;
  norm_.apply(m);
  return me_->encode(m);
}

nn::Var Model::embed(const std::string& caption) const { return te_->embed(vocab_.encode(caption)); }

std::vector<double> Model::embed_values(const std::string& caption) const {
  return te_->embed_values(vocab_.encode(caption));
}

std::map<std::string, nn::Tensor> Model::snapshot() const {
  std::map<std::string, nn::Tensor> out;
  for (const auto& [path, p] : params_.entries()) out.emplace(path, p->value);
  return out;
}

void Model::restore(const std::map<std::string, nn::Tensor>& values) {
  for (const auto& [path, p] : params_.entries()) {
    auto it = values.find(path);
    if (it == values.end()) throw DataError("missing parameter '" + path + "'");
    if (it->second.shape() != p->value.shape()) {
      throw DataError("parameter '" + path + "' has shape " + it->second.shape_str() + ", model expects " +
                      p->value.shape_str());
    }
    p->value = it->second;
  }
}

// ---------------------------------------------------------------------------
// Losses

double total_loss(double l1, double l2, double l3, double lambda1, double lambda2, double lambda3) {
  const double terms[] = {l1, l2, l3};
  const char* names[] = {"l1", "l2", "l3"};
  for (int i = 0; i < 3; ++i) {
    if (!std::isfinite(terms[i])) throw NumericError(std::string("loss term ") + names[i] + " is not finite");
  }
  return lambda1 * l1 + lambda2 * l2 + lambda3 * l3;
}

namespace {

std::vector<std::vector<int>> retrieved_words(const Model& model, const retrieval::RetrievalResult& r) {
  std::vector<std::vector<int>> out;
  for (const auto& hit : r.hits) out.push_back(model.vocab().encode_words(hit.high_caption));
  return out;
}

retrieval::QueryFilter train_filter(const TrainConfig& cfg, const std::string& motion_id) {
  retrieval::QueryFilter f;
  f.splits = {Split::train};
  if (cfg.exclude_self) f.exclude_motion_id = motion_id;
  return f;
}

}  // namespace

SampleLosses sample_losses(const Model& model, const retrieval::Database& db, const data::Sample& sample,
                           std::mt19937_64& rng) {
  const TrainConfig& cfg = model.config();
  const auto& vocab = model.vocab();
  const auto& td = model.text_decoder();
  SampleLosses out;

  std::uniform_int_distribution<std::size_t> pick(0, sample.high_captions.size() - 1);
  const std::vector<int> y = vocab.encode(sample.high_captions[pick(rng)]);
  nn::Var f = model.features(sample.motion);

  if (cfg.variant == Variant::base) {
    out.l3 = td.nll(f, decoder::Mode::final, y);
    out.total = nn::affine(out.l3, cfg.lambda3);
    total_loss(0.0, 0.0, out.l3->value.item(), cfg.lambda1, 0.0, cfg.lambda3);
    return out;
  }

  const std::vector<int> z = vocab.encode(sample.low_caption);
  out.l1 = td.nll(f, decoder::Mode::lowlevel, z);
  out.low = td.generate(nn::detach(f), decoder::Mode::lowlevel, cfg.max_gen_len);
  std::vector<int> z_hat = {text::kBos};
  z_hat.insert(z_hat.end(), out.low.ids.begin(), out.low.ids.end());
  z_hat.push_back(text::kEos);

  const double lambda2 = cfg.effective_lambda2();
  std::vector<double> query;
  if (lambda2 > 0.0) {
    const retrieval::DbEntry* negative =
        db.distinct_motions() >= 2 ? db.sample_negative(rng, sample.motion_id) : nullptr;
    nn::Var u_hat = model.text_encoder().embed(z_hat);
    query = u_hat->value.storage();
    if (negative) {
      nn::Var u = model.text_encoder().embed(z);
      nn::Var u_bar = nn::constant(nn::Tensor({1, negative->embedding.size()}, negative->embedding));
      out.l2 = encoder::contrastive_loss(u_hat, u, u_bar, cfg.c, cfg.l2_form);
    } else {
      out.l2_skipped = true;
    }
  } else {
    query = model.text_encoder().embed_values(z_hat);
  }

  if (db.empty()) throw UsageError("training: retrieval database is empty");
  out.retrieved = db.topk(query, cfg.k, train_filter(cfg, sample.motion_id));
  const auto words = retrieved_words(model, out.retrieved);
  out.l3 = td.nll(td.build_prefix(words, f), decoder::Mode::final, y);

  const double l2v = out.l2 ? out.l2->value.item() : 0.0;
  total_loss(out.l1->value.item(), l2v, out.l3->value.item(), cfg.lambda1, lambda2, cfg.lambda3);
  nn::Var total = nn::add(nn::affine(out.l1, cfg.lambda1), nn::affine(out.l3, cfg.lambda3));
  if (out.l2) total = nn::add(total, nn::affine(out.l2, lambda2));
  out.total = total;
  return out;
}

std::size_t add_split(retrieval::Database& db, const Model& model, const data::Dataset& dataset, Split split) {
  const Split tag = split == Split::train || split == Split::val ? split : Split::external;
  std::size_t added = 0;
  for (const auto& s : dataset.samples) {
    if (s.split != split) continue;
    if (s.low_caption.empty()) throw DataError("sample '" + s.motion_id + "' has no low-level caption");
    const auto u = model.embed_values(s.low_caption);
    for (const auto& y : s.high_captions) {
      db.insert(s.motion_id, y, s.low_caption, tag, u);
      ++added;
    }
  }
  return added;
}

// ---------------------------------------------------------------------------
// Inference and evaluation

nlohmann::json Inference::to_json() const {
  nlohmann::json hits = nlohmann::json::array();
  for (const auto& h : retrieved.hits) {
    hits.push_back({{"id", h.id}, {"caption", h.high_caption}, {"score", h.score}});
  }
  return {{"low_caption", low_caption},
          {"low_truncated", low_truncated},
          {"retrieved", hits},
          {"retrieval_clamped", retrieved.clamped},
          {"final_caption", final_caption},
          {"final_truncated", final_truncated}};
}

Inference infer(const Model& model, const retrieval::Database& db, const MotionTensor& raw_motion, Variant variant,
                std::size_t k, const retrieval::QueryFilter& filter) {
  nn::NoGradGuard guard;
  const auto& td = model.text_decoder();
  const auto& vocab = model.vocab();
  const std::size_t max_len = model.config().max_gen_len;
  Inference out;
  nn::Var f = model.features(raw_motion);

  if (variant == Variant::base) {
    auto g = td.generate(f, decoder::Mode::final, max_len);
    out.final_caption = vocab.decode(g.ids);
    out.final_truncated = g.truncated;
    return out;
  }
  if (k < 1) throw UsageError("inference: k must be at least 1");
  if (db.empty()) throw UsageError("inference: the retrieval database is empty");

  auto low = td.generate(f, decoder::Mode::lowlevel, max_len);
  out.low_caption = vocab.decode(low.ids);
  out.low_truncated = low.truncated;
  std::vector<int> z_hat = {text::kBos};
  z_hat.insert(z_hat.end(), low.ids.begin(), low.ids.end());
  z_hat.push_back(text::kEos);
  out.retrieved = db.topk(model.text_encoder().embed_values(z_hat), k, filter);
  if (out.retrieved.hits.empty()) throw UsageError("inference: no database entry matches the split filter");

  if (variant == Variant::top1_direct) {
    out.final_caption = out.retrieved.hits.front().high_caption;
    return out;
  }
  const auto words = retrieved_words(model, out.retrieved);
  auto g = td.generate(td.build_prefix(words, f), decoder::Mode::final, max_len);
  out.final_caption = vocab.decode(g.ids);
  out.final_truncated = g.truncated;
  return out;
}

metrics::MetricReport score_pairs(std::span<const metrics::EvalPair> pairs, bool lemmatize) {
  try {
    return metrics::evaluate(pairs, lemmatize);
  } catch (const NumericError& e) {
    std::vector<metrics::EvalPair> prepared(pairs.begin(), pairs.end());
    if (lemmatize) {
      for (auto& p : prepared) {
        p.candidate = text::lemmatize(p.candidate);
        for (auto& r : p.references) r = text::lemmatize(r);
      }
    }
    metrics::MetricReport r;
    r.n_pairs = prepared.size();
    r.lemmatized = lemmatize;
    std::string warning;
    r.bleu1 = metrics::bleu(prepared, 1, &warning);
    r.bleu4 = metrics::bleu(prepared, 4);
    if (!warning.empty()) r.warnings.push_back(warning);
    r.rouge_l = metrics::rouge_l(prepared);
    r.cider = 0.0;
    r.warnings.push_back(std::string(e.what()) + "; cider reported as 0");
    return r;
  }
}

SplitEvaluation evaluate_split(const Model& model, const retrieval::Database& db, const data::Dataset& dataset,
                               Split split, Variant variant, std::size_t k, const retrieval::QueryFilter& filter,
                               bool lemmatize) {
  SplitEvaluation ev;
  std::vector<metrics::EvalPair> pairs;
  for (const auto& s : dataset.samples) {
    if (s.split != split) continue;
    ev.motion_ids.push_back(s.motion_id);
    ev.outputs.push_back(infer(model, db, s.motion, variant, k, filter));
    pairs.push_back({ev.outputs.back().final_caption, s.high_captions});
  }
  if (pairs.empty()) throw UsageError("evaluate: split '" + std::string(split_name(split)) + "' is empty");
  ev.report = score_pairs(pairs, lemmatize);
  return ev;
}

// ---------------------------------------------------------------------------
// Training loop

nlohmann::json EpochLog::to_json(bool with_wall_time) const {
  nlohmann::json j = {{"epoch", epoch},           {"l1", l1},       {"l2", l2},
                      {"l3", l3},                 {"loss", loss},   {"steps", steps},
                      {"l2_skipped", l2_skipped}, {"val", val.to_json()}};
  if (with_wall_time) j["wall_time_s"] = wall_time_s;
  return j;
}

std::size_t select_best(std::span<const double> scores) {
  if (scores.empty()) throw UsageError("select_best: no scores");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

TrainResult train(const data::Dataset& dataset, const TrainConfig& cfg, TrainObserver* observer, std::ostream* log) {
  cfg.validate();
  data::Dataset ds = dataset;
  if (ds.split(Split::train).empty()) throw UsageError("train: train split is empty");
  if (ds.split(Split::val).empty()) throw UsageError("train: val split is empty");
  for (const auto& s : ds.samples) {
    if ((s.split == Split::train || s.split == Split::val) && s.low_caption.empty() &&
        cfg.variant != Variant::base) {
      throw DataError("sample '" + s.motion_id + "' has no low-level caption; run caption expansion first");
    }
  }

  std::vector<std::string> corpus;
  for (const auto* s : ds.split(Split::train)) {
    corpus.insert(corpus.end(), s->high_captions.begin(), s->high_captions.end());
    if (!s->low_caption.empty()) corpus.push_back(s->low_caption);
  }
  auto vocab = text::Vocabulary::build(corpus, cfg.min_freq);
  // Normalize a scratch copy to obtain train statistics; the model applies
  // them to raw motions itself.
  const auto norm = data::normalize(ds);
  TrainResult result;
  result.model = Model::create(cfg, std::move(vocab), norm);
  Model& model = *result.model;
  auto& params = model.params();
  params.zero_grad();

  const data::Dataset& raw = dataset;
  std::vector<const data::Sample*> train_samples;
  for (const auto& s : raw.samples) {
    if (s.split == Split::train) train_samples.push_back(&s);
  }

  retrieval::Database& db = result.db;
  if (cfg.uses_retrieval()) {
    nn::NoGradGuard guard;
    add_split(db, model, raw, Split::train);
  }

  nn::Adam adam(nn::AdamConfig{cfg.lr});
  std::mt19937_64 rng(cfg.seed ^ kStreamSalt);
  const nlohmann::json cfg_json = cfg.to_json();
  std::vector<double> val_means;
  std::map<std::string, nn::Tensor> best_params;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochLog row;
    row.epoch = epoch;
    std::vector<const data::Sample*> order = train_samples;
    std::shuffle(order.begin(), order.end(), rng);
    double sum_l1 = 0, sum_l2 = 0, sum_l3 = 0, sum_total = 0;

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double scale = 1.0 / static_cast<double>(end - start);
      for (std::size_t i = start; i < end; ++i) {
        SampleLosses sl = sample_losses(model, db, *order[i], rng);
        if (sl.l2_skipped) {
          ++row.l2_skipped;
          if (row.l2_skipped == 1) {
            result.warnings.push_back("epoch " + std::to_string(epoch) +
                                      ": contrastive loss skipped, database has fewer than two distinct motions");
          }
        }
        sum_l1 += sl.l1 ? sl.l1->value.item() : 0.0;
        sum_l2 += sl.l2 ? sl.l2->value.item() : 0.0;
        sum_l3 += sl.l3 ? sl.l3->value.item() : 0.0;
        sum_total += sl.total->value.item();
        nn::backward(nn::affine(sl.total, scale));
      }
      ++row.steps;
      if (observer) observer->after_backward(model, epoch, row.steps);
      if (cfg.grad_clip > 0.0) params.clip_grad_norm(cfg.grad_clip);
      adam.step(params);
      if (observer) observer->step_end(model, db, epoch, row.steps);
    }

    const double n = static_cast<double>(order.size());
    row.l1 = sum_l1 / n;
    row.l2 = sum_l2 / n;
    row.l3 = sum_l3 / n;
    row.loss = sum_total / n;

    if (cfg.uses_retrieval()) {
      db.reencode_all([&](const std::string& z) { return model.embed_values(z); });
    }
    if (observer) observer->epoch_end(model, db, epoch);

    row.val = evaluate_split(model, db, raw, Split::val, cfg.variant, cfg.k, retrieval::QueryFilter{}, cfg.lemmatize_val)
                  .report;
    row.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    val_means.push_back(row.val.mean());
    if (select_best(val_means) == epoch - 1) best_params = model.snapshot();
    if (log) {
      nlohmann::json j = row.to_json();
      j["config"] = cfg_json;
      *log << j.dump() << '\n' << std::flush;
    }
    result.logs.push_back(std::move(row));
  }

  result.best_epoch = select_best(val_means) + 1;
  model.restore(best_params);
  if (cfg.uses_retrieval()) {
    db.reencode_all([&](const std::string& z) { return model.embed_values(z); });
  }
  return result;
}

}  // namespace hicap::training
