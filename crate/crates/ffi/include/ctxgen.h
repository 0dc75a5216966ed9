#ifndef CTXGEN_H
#define CTXGEN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CtxgenStatus {
  CTXGEN_STATUS_OK = 0,
  CTXGEN_STATUS_USAGE = 1,
  CTXGEN_STATUS_DATA = 2,
  CTXGEN_STATUS_NUMERIC = 3,
  CTXGEN_STATUS_NULL_POINTER = 4,
  CTXGEN_STATUS_INVALID_UTF8 = 5,
  CTXGEN_STATUS_PANIC = 6,
} CtxgenStatus;

typedef struct CtxgenCondlm CtxgenCondlm;

typedef struct CtxgenEncoder CtxgenEncoder;

typedef struct CtxgenReranker CtxgenReranker;

typedef struct CtxgenSclstm CtxgenSclstm;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the
 * next call into this library on the same thread.
 */
const char *ctxgen_last_error(void);

/**
 * Frees a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void ctxgen_string_free(char *s);

/**
 * Beam-decodes a response for `da`. `encoder` may be null for a
 * zero-context generator. The result is written to `*out` and must be
 * released with `ctxgen_string_free`.
 *
 * # Safety
 * Pointers must be valid; `history` must hold `history_len` C strings.
 */
enum CtxgenStatus ctxgen_sclstm_generate(const struct CtxgenSclstm *model,
                                         const struct CtxgenEncoder *encoder,
                                         const char *const *history,
                                         size_t history_len,
                                         const char *user,
                                         const char *da,
                                         size_t beam,
                                         char **out);

/**
 * Samples `n` responses, best first, as a JSON array of
 * `{"text", "logprob"}` objects written to `*out_json`.
 *
 * # Safety
 * Pointers must be valid; `history` must hold `history_len` C strings.
 */
enum CtxgenStatus ctxgen_condlm_generate(const struct CtxgenCondlm *model,
                                         const char *const *history,
                                         size_t history_len,
                                         const char *user,
                                         const char *da,
                                         size_t n,
                                         size_t top_k,
                                         double top_p,
                                         uint64_t seed,
                                         char **out_json);

/**
 * Scores `n` candidates against `user`. Writes the index of the first
 * best candidate to `*best` and, when `scores` is not null, the summed
 * head score of each candidate to `scores[0..n]`.
 *
 * # Safety
 * `candidates` must hold `n` C strings; `scores` must be null or hold `n` doubles.
 */
enum CtxgenStatus ctxgen_reranker_select(const struct CtxgenReranker *model,
                                         const char *user,
                                         const char *const *candidates,
                                         size_t n,
                                         size_t *best,
                                         double *scores);

/**
 * Smoothed sentence BLEU-4 of `candidate` against one reference.
 *
 * # Safety
 * Pointers must be valid.
 */
enum CtxgenStatus ctxgen_bleu4(const char *candidate, const char *reference, double *out);

/**
 * Meteor of `candidate` against `reference`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum CtxgenStatus ctxgen_meteor(const char *candidate, const char *reference, double *out);

/**
 * Library version as a static string.
 */
const char *ctxgen_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CTXGEN_H */
