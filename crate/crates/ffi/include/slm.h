#ifndef SLM_H
#define SLM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Zero is success.
typedef enum SlmStatus {
  SLM_OK = 0,
  // Bad input data, e.g. a sentence without tokens.
  SLM_ERR_DATA = 1,
  // A precondition of the call was violated.
  SLM_ERR_CONTRACT = 2,
  // A checkpoint or vocabulary file is malformed.
  SLM_ERR_FORMAT = 3,
  SLM_ERR_CONFIG = 4,
  SLM_ERR_IO = 5,
  // A required pointer was null.
  SLM_ERR_NULL = 6,
  // A string argument is not valid UTF-8.
  SLM_ERR_UTF8 = 7,
  // An output buffer is too small.
  SLM_ERR_BUFFER = 8,
  // Internal failure; the message says more.
  SLM_ERR_INTERNAL = 9,
} SlmStatus;

// Opaque predictor handle.
typedef struct SlmPredictor SlmPredictor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Loads a checkpoint and vocabulary. On success `*out` owns a new handle.
//
// # Safety
// Paths must be NUL-terminated strings; `out` must be writable.
enum SlmStatus slm_predictor_open(const char *checkpoint,
                                  const char *vocab,
                                  struct SlmPredictor **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `p` must come from [`slm_predictor_open`] and not be used afterwards.
void slm_predictor_free(struct SlmPredictor *p);

// Width of each sentence embedding; 0 for a null handle.
//
// # Safety
// `p` must be null or a live handle.
size_t slm_predictor_hidden(const struct SlmPredictor *p);

// Most sentences one call accepts; 0 for a null handle.
//
// # Safety
// `p` must be null or a live handle.
size_t slm_predictor_max_sentences(const struct SlmPredictor *p);

// Greedy reconstruction of the original order of `n` sentences.
// `order_out[k]` receives the input index of the sentence placed `k`-th.
//
// # Safety
// `sentences` must hold `n` NUL-terminated strings and `order_out` room
// for `n` values.
enum SlmStatus slm_unshuffle(const struct SlmPredictor *p,
                             const char *const *sentences,
                             size_t n,
                             size_t *order_out);

// Writes `n * hidden` floats, one `[SENT]` row per sentence, into `out`.
//
// # Safety
// `sentences` must hold `n` NUL-terminated strings and `out` room for
// `out_len` floats.
enum SlmStatus slm_sentence_embeddings(const struct SlmPredictor *p,
                                       const char *const *sentences,
                                       size_t n,
                                       float *out,
                                       size_t out_len);

// Copies the calling thread's last error message into `buf` (truncated,
// always NUL-terminated when `len > 0`). Returns the full message length
// without the terminator.
//
// # Safety
// `buf` must be null or writable for `len` bytes.
size_t slm_last_error(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *slm_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SLM_H */
