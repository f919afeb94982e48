/* C interface to the hierarchical motion-captioning library.
 *
 * Every function returns a hicap_status. On failure the calling thread's
 * hicap_last_error() holds a one-line message. Strings returned through
 * `char**` out-parameters are heap-allocated JSON documents owned by the
 * caller and released with hicap_string_free(). Handles are released with
 * their matching *_free function; passing NULL to a free function is a no-op.
 *
 * Options are passed as JSON objects (NULL or "" means all defaults). Unknown
 * keys are rejected with HICAP_ERR_USAGE.
 */
#ifndef HICAP_HICAP_H
#define HICAP_HICAP_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define HICAP_API __declspec(dllexport)
#else
#define HICAP_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum hicap_status {
  HICAP_OK = 0,
  HICAP_ERR_INTERNAL = 1,
  HICAP_ERR_USAGE = 2,   /* bad arguments or options */
  HICAP_ERR_DATA = 3,    /* unreadable, malformed or incompatible files */
  HICAP_ERR_NUMERIC = 4  /* non-finite values, failed numeric checks */
} hicap_status;

typedef struct hicap_dataset hicap_dataset;
typedef struct hicap_model hicap_model;
typedef struct hicap_db hicap_db;

HICAP_API const char* hicap_version(void);
HICAP_API const char* hicap_last_error(void);
HICAP_API void hicap_string_free(char* s);

/* Datasets (JSON-lines files). */

/* options: classes, per_class, frames, channels, seed */
HICAP_API hicap_status hicap_dataset_generate(const char* options_json, hicap_dataset** out);
HICAP_API hicap_status hicap_dataset_load(const char* path, hicap_dataset** out);
HICAP_API hicap_status hicap_dataset_save(const hicap_dataset* ds, const char* path);
HICAP_API void hicap_dataset_free(hicap_dataset* ds);
HICAP_API hicap_status hicap_dataset_size(const hicap_dataset* ds, size_t* out);
/* Word and lemma statistics over the high-level captions. */
HICAP_API hicap_status hicap_dataset_stats(const hicap_dataset* ds, int with_lemmas, char** out_json);
/* Ratios from raw counts; a negative n_lemmas omits the lemma fields. */
HICAP_API hicap_status hicap_stats_from_counts(int64_t n_words, int64_t n_motions, int64_t n_lemmas,
                                               char** out_json);
/* options: endpoint (required), template, timeout_s, max_retries, backoff_s, cache, token,
 * max_concurrency. The token defaults to the HICAP_ENDPOINT_TOKEN environment variable. */
HICAP_API hicap_status hicap_dataset_expand_captions(hicap_dataset* ds, const char* options_json,
                                                     char** out_report_json);

/* Training. `config_json` holds TrainConfig keys plus an optional "preset"
 * (kit-like, hml3d-like, both-like) applied before the other keys. EpochLogs
 * are appended as JSON lines to `log_path` when it is non-NULL. */
HICAP_API hicap_status hicap_train(const hicap_dataset* ds, const char* config_json, const char* log_path,
                                   hicap_model** out_model, hicap_db** out_db, char** out_summary_json);

/* Effective TrainConfig defaults, optionally after applying a preset (NULL for none). */
HICAP_API hicap_status hicap_train_defaults(const char* preset, char** out_json);

HICAP_API hicap_status hicap_model_load(const char* path, hicap_model** out);
HICAP_API hicap_status hicap_model_save(const hicap_model* model, const char* path);
HICAP_API void hicap_model_free(hicap_model* model);
HICAP_API hicap_status hicap_model_info(const hicap_model* model, char** out_json);

/* Retrieval database (binary "HCDB" files). */
HICAP_API hicap_status hicap_db_load(const char* path, hicap_db** out);
HICAP_API hicap_status hicap_db_save(const hicap_db* db, const char* path);
HICAP_API void hicap_db_free(hicap_db* db);
HICAP_API hicap_status hicap_db_size(const hicap_db* db, size_t* out);
HICAP_API hicap_status hicap_db_export_json(const hicap_db* db, char** out_json);
/* Adds every sample of `split` embedded with the model's text encoder. */
HICAP_API hicap_status hicap_db_enrich(hicap_db* db, const hicap_model* model, const hicap_dataset* ds,
                                       const char* split, size_t* out_size);

/* Inference and evaluation.
 * options: variant, k, db_splits (array of split names), lemmatize, split, outputs (bool) */
HICAP_API hicap_status hicap_evaluate(const hicap_model* model, const hicap_db* db, const hicap_dataset* ds,
                                      const char* options_json, char** out_report_json);
HICAP_API hicap_status hicap_caption(const hicap_model* model, const hicap_db* db, const hicap_dataset* ds,
                                     const char* motion_id, const char* options_json, char** out_json);
/* options: k, db_splits */
HICAP_API hicap_status hicap_retrieve_text(const hicap_model* model, const hicap_db* db, const char* text,
                                           const char* options_json, char** out_json);
/* Scores JSON-lines files of {id, candidate} and {id, references: [...]}. */
HICAP_API hicap_status hicap_score_files(const char* candidates_path, const char* references_path, int lemmatize,
                                         char** out_report_json);

/* options: loss (l1, l2, l3), form (paper, hinge), trials, seed, eps */
HICAP_API hicap_status hicap_grad_check(const char* options_json, char** out_report_json);

#ifdef __cplusplus
}
#endif

#endif /* HICAP_HICAP_H */
