#ifndef RMRC_H
#define RMRC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// `span_style` value: gold spans cover content tokens only.
#define RMRC_SPAN_BARE 0

// `span_style` value: gold spans include the leading marker token.
#define RMRC_SPAN_MARKED 1

// Result of every fallible call.
typedef enum RmrcStatus {
  RMRC_STATUS_OK = 0,
  RMRC_STATUS_NULL_ARGUMENT = 1,
  RMRC_STATUS_INVALID_UTF8 = 2,
  RMRC_STATUS_CONFIG = 3,
  RMRC_STATUS_PRECONDITION = 4,
  RMRC_STATUS_PARSE = 5,
  RMRC_STATUS_INTEGRITY = 6,
  RMRC_STATUS_IO = 7,
  RMRC_STATUS_NUMERICAL = 8,
  RMRC_STATUS_PANIC = 9,
} RmrcStatus;

// Opaque corpus handle.
typedef struct RmrcCorpus RmrcCorpus;

// Opaque reader handle.
typedef struct RmrcReader RmrcReader;

// Generator settings; fill with [`rmrc_generator_config_default`] before editing.
typedef struct RmrcGeneratorConfig {
  size_t num_documents;
  size_t sentences_min;
  size_t sentences_max;
  size_t vocabulary_size;
  size_t qa_min;
  size_t qa_max;
  double irrelevant_chat_rate;
  double irrelevant_questioner_share;
  bool shuffle;
  size_t shuffle_max_shift;
  // [`RMRC_SPAN_BARE`] or [`RMRC_SPAN_MARKED`].
  uint32_t span_style;
  uint64_t seed;
} RmrcGeneratorConfig;

typedef struct RmrcCorpusCounts {
  size_t documents;
  size_t dialogues;
  size_t chats;
  size_t truth_pairs;
} RmrcCorpusCounts;

// Inclusive token offsets of a predicted answer and its confidence `P^s[s] * P^e[e]`.
typedef struct RmrcPrediction {
  size_t start;
  size_t end;
  double confidence;
} RmrcPrediction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null when none. The pointer stays
// valid until the next failing call or [`rmrc_clear_error`] on the same thread.
const char *rmrc_last_error(void);

void rmrc_clear_error(void);

// Library version as a static NUL-terminated string.
const char *rmrc_version(void);

// Writes the default generator settings to `out`.
//
// # Safety
// `out` must be null or point to writable memory for one `RmrcGeneratorConfig`.
enum RmrcStatus rmrc_generator_config_default(struct RmrcGeneratorConfig *out);

// Generates a synthetic corpus. On success `*out` owns a new handle.
//
// # Safety
// `config` must be null or valid; `out` must be null or writable.
enum RmrcStatus rmrc_corpus_generate(const struct RmrcGeneratorConfig *config,
                                     struct RmrcCorpus **out);

// Reads a corpus JSON Lines file.
//
// # Safety
// `path` must be null or a NUL-terminated string; `out` must be null or writable.
enum RmrcStatus rmrc_corpus_read(const char *path, struct RmrcCorpus **out);

// Writes a corpus as JSON Lines.
//
// # Safety
// `corpus` must be null or a live handle; `path` must be null or a NUL-terminated string.
enum RmrcStatus rmrc_corpus_write(const struct RmrcCorpus *corpus, const char *path);

// # Safety
// `corpus` must be null or a live handle; `out` must be null or writable.
enum RmrcStatus rmrc_corpus_counts(const struct RmrcCorpus *corpus, struct RmrcCorpusCounts *out);

// Returns a new corpus with each chat moved down by up to `max_shift` positions.
//
// # Safety
// `corpus` must be null or a live handle; `out` must be null or writable.
enum RmrcStatus rmrc_corpus_shuffle(const struct RmrcCorpus *corpus,
                                    size_t max_shift,
                                    uint64_t seed,
                                    struct RmrcCorpus **out);

// Releases a corpus handle. Null is ignored.
//
// # Safety
// `corpus` must be null or a handle not yet freed.
void rmrc_corpus_free(struct RmrcCorpus *corpus);

// Loads a reader checkpoint.
//
// # Safety
// `path` must be null or a NUL-terminated string; `out` must be null or writable.
enum RmrcStatus rmrc_reader_load(const char *path, struct RmrcReader **out);

// Predicts the answer span of `question` in `document` over spans of at most `max_len`
// tokens. Offsets index the tokenized document.
//
// # Safety
// `reader` must be null or a live handle; strings must be null or NUL-terminated;
// `out` must be null or writable.
enum RmrcStatus rmrc_reader_predict(const struct RmrcReader *reader,
                                    const char *document,
                                    const char *question,
                                    size_t max_len,
                                    struct RmrcPrediction *out);

// Releases a reader handle. Null is ignored.
//
// # Safety
// `reader` must be null or a handle not yet freed.
void rmrc_reader_free(struct RmrcReader *reader);

// Token-level F1 between two answer strings, in `[0, 1]`.
//
// # Safety
// Strings must be null or NUL-terminated; `out` must be null or writable.
enum RmrcStatus rmrc_token_f1(const char *pred, const char *gold, double *out);

// Writes 1 when both strings tokenize identically, else 0.
//
// # Safety
// Strings must be null or NUL-terminated; `out` must be null or writable.
enum RmrcStatus rmrc_exact_match(const char *pred, const char *gold, uint8_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RMRC_H */
