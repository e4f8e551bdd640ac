#ifndef VEXLM_H
#define VEXLM_H

/* Generated by cbindgen from the vexlm-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code of every fallible FFI call.
 */
typedef enum {
  VEXLM_STATUS_OK = 0,
  VEXLM_STATUS_NULL_ARGUMENT = 1,
  VEXLM_STATUS_INVALID_UTF8 = 2,
  VEXLM_STATUS_IO = 3,
  VEXLM_STATUS_PARSE = 4,
  VEXLM_STATUS_MODEL = 5,
  VEXLM_STATUS_INTERNAL = 6,
} VexlmStatus;

/**
 * Opaque predictor handle: model, vocabulary, templates, schema, optional
 * thresholds and resolver table.
 */
typedef struct VexlmPredictor VexlmPredictor;

/**
 * Opaque vocabulary handle.
 */
typedef struct VexlmVocab VexlmVocab;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string; do not free.
 */
const char *vexlm_version(void);

/**
 * Message for the most recent error on this thread, or NULL. Free with
 * `vexlm_string_free`.
 */
char *vexlm_last_error(void);

/**
 * Release a string returned by this library.
 *
 * # Safety
 * `s` must have been returned by a vexlm function and not freed before.
 */
void vexlm_string_free(char *s);

/**
 * Release an id buffer returned by `vexlm_vocab_tokenize`.
 *
 * # Safety
 * `ids`/`len` must come from a vexlm call and not be freed twice.
 */
void vexlm_ids_free(uint32_t *ids, uintptr_t len);

/**
 * Load a vocabulary file (JSON lines). On success writes a handle to `out`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
VexlmStatus vexlm_vocab_load(const char *path, VexlmVocab **out);

/**
 * # Safety
 * `vocab` must be a handle from `vexlm_vocab_load`, freed at most once.
 */
void vexlm_vocab_free(VexlmVocab *vocab);

/**
 * Total number of token ids (including the five specials); 0 on NULL.
 *
 * # Safety
 * `vocab` must be NULL or a live handle.
 */
uint64_t vexlm_vocab_size(const VexlmVocab *vocab);

/**
 * Tokenize text into ids. The caller owns the buffer written to
 * `out_ids`/`out_len` and frees it with `vexlm_ids_free`.
 *
 * # Safety
 * All pointers must be valid; `vocab` must be a live handle.
 */
VexlmStatus vexlm_vocab_tokenize(const VexlmVocab *vocab,
                                 const char *text,
                                 bool entity_matching,
                                 uint32_t **out_ids,
                                 uintptr_t *out_len);

/**
 * Render ids back to text (ids are treated as word starts). The result goes
 * to `out_text`; free with `vexlm_string_free`.
 *
 * # Safety
 * `ids` must point at `len` readable u32 values; other pointers valid.
 */
VexlmStatus vexlm_vocab_detokenize(const VexlmVocab *vocab,
                                   const uint32_t *ids,
                                   uintptr_t len,
                                   char **out_text);

/**
 * Load a predictor from a checkpoint directory plus its side files.
 * `schema_path`, `thresholds_path` and `entity_dump_path` may be NULL.
 *
 * # Safety
 * Paths must be NULL or valid NUL-terminated strings; `out` must be valid.
 */
VexlmStatus vexlm_predictor_load(const char *model_dir,
                                 const char *vocab_path,
                                 const char *templates_path,
                                 const char *schema_path,
                                 const char *thresholds_path,
                                 const char *entity_dump_path,
                                 VexlmPredictor **out);

/**
 * # Safety
 * `pred` must be a handle from `vexlm_predictor_load`, freed at most once.
 */
void vexlm_predictor_free(VexlmPredictor *pred);

/**
 * Predict object candidates for (subject, relation) and return them as a
 * JSON array of `{surface, token_id, score, entity_id}` objects, sorted by
 * descending score. With `apply_thresholds` and loaded thresholds, the list
 * is cut at the relation's threshold and disambiguated against the loaded
 * entity dump. Free the string with `vexlm_string_free`.
 *
 * # Safety
 * `pred` must be a live handle; strings valid; `out_json` valid.
 */
VexlmStatus vexlm_predict_json(const VexlmPredictor *pred,
                               const char *subject,
                               const char *relation,
                               uintptr_t top_k,
                               bool apply_thresholds,
                               char **out_json);

/**
 * Score one prediction set against a gold set (both JSON arrays of strings)
 * with the challenge convention; writes precision/recall/F1.
 *
 * # Safety
 * Strings must be valid; out pointers must be valid.
 */
VexlmStatus vexlm_score_sample(const char *pred_json,
                               const char *gold_json,
                               double *out_precision,
                               double *out_recall,
                               double *out_f1);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VEXLM_H */
