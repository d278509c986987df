#ifndef LMLAB_H
#define LMLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum LmStatus {
  LM_STATUS_OK = 0,
  LM_STATUS_CONFIG = 2,
  LM_STATUS_DATA = 3,
  LM_STATUS_NUMERIC = 4,
  LM_STATUS_UNSUPPORTED = 5,
  LM_STATUS_IO = 6,
  /**
   * A required pointer was null or a string was not UTF-8.
   */
  LM_STATUS_INVALID_ARGUMENT = 7,
  /**
   * The output buffer is too small; the message names the needed size.
   */
  LM_STATUS_BUFFER_TOO_SMALL = 8,
  /**
   * A bug inside the library; the handle involved should be discarded.
   */
  LM_STATUS_PANIC = 9,
} LmStatus;

typedef struct LmGrammar LmGrammar;

/**
 * A trained or freshly initialized language model.
 */
typedef struct LmModel LmModel;

typedef struct LmNgram LmNgram;

/**
 * Fitted `L(P, D) = [(P_c/P)^(a_P/a_D) + D_c/D]^(a_D)`.
 */
typedef struct LmScalingFit {
  double p_c;
  double d_c;
  double alpha_p;
  double alpha_d;
  /**
   * RMS of the log residuals.
   */
  double residual;
} LmScalingFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *lm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *lm_version(void);

/**
 * Releases a string returned by the library.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void lm_string_free(char *s);

/**
 * Builds a model from `key=value` config text with parameters drawn from
 * `seed`.
 *
 * # Safety
 * `config` must be a NUL-terminated string; `out` must be writable.
 */
enum LmStatus lm_model_new(const char *config, uint64_t seed, struct LmModel **out);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum LmStatus lm_model_load(const char *path, struct LmModel **out);

/**
 * Writes a checkpoint file.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum LmStatus lm_model_save(const struct LmModel *model, const char *path);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void lm_model_free(struct LmModel *model);

/**
 * Vocabulary size, or 0 for a null handle.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t lm_model_vocab_size(const struct LmModel *model);

/**
 * Total number of scalar parameters, or 0 for a null handle.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t lm_model_num_params(const struct LmModel *model);

/**
 * Next-token logits after `prefix` into `out[0..vocab_size]`.
 *
 * # Safety
 * `prefix` must hold `prefix_len` ids and `out` room for `out_len` doubles.
 */
enum LmStatus lm_model_next_logits(const struct LmModel *model,
                                   const size_t *prefix,
                                   size_t prefix_len,
                                   double *out,
                                   size_t out_len);

/**
 * Samples up to `max_len` tokens after `prompt` at `temperature`, stopping
 * after EOS. Writes the new ids to `out` and their count to `out_len`.
 *
 * # Safety
 * `prompt` must hold `prompt_len` ids, `out` room for `max_len` ids, and
 * `out_len` must be writable.
 */
enum LmStatus lm_model_sample(const struct LmModel *model,
                              const size_t *prompt,
                              size_t prompt_len,
                              double temperature,
                              size_t max_len,
                              uint64_t seed,
                              size_t *out,
                              size_t *out_len);

/**
 * Probabilities of `logits` at `temperature` (0 means argmax) into `out`.
 *
 * # Safety
 * `logits` and `out` must both hold `n` doubles.
 */
enum LmStatus lm_decode(const double *logits, size_t n, double temperature, double *out);

/**
 * Draws an index from the distribution `p` using `seed`.
 *
 * # Safety
 * `p` must hold `n` doubles and `out` must be writable.
 */
enum LmStatus lm_draw(const double *p, size_t n, uint64_t seed, size_t *out);

/**
 * Fits an order-`order` model with add-`k` smoothing to `ids`.
 *
 * # Safety
 * `ids` must hold `n` ids; `out` must be writable.
 */
enum LmStatus lm_ngram_fit(const size_t *ids,
                           size_t n,
                           size_t order,
                           double k,
                           size_t vocab_size,
                           struct LmNgram **out);

/**
 * `P(w | context)`.
 *
 * # Safety
 * `context` must hold `context_len` ids; `out` must be writable.
 */
enum LmStatus lm_ngram_prob(const struct LmNgram *ngram,
                            const size_t *context,
                            size_t context_len,
                            size_t w,
                            double *out);

/**
 * # Safety
 * `ngram` must be NULL or a handle not yet freed.
 */
void lm_ngram_free(struct LmNgram *ngram);

/**
 * A built-in grammar by name, or grammar source text.
 *
 * # Safety
 * `spec` must be a NUL-terminated string; `out` must be writable.
 */
enum LmStatus lm_grammar_new(const char *spec, struct LmGrammar **out);

/**
 * `ln P(input)` under the grammar (`-inf` outside the language).
 *
 * # Safety
 * `grammar` must be a live handle, `input` a NUL-terminated string and
 * `out` writable.
 */
enum LmStatus lm_grammar_logprob(const struct LmGrammar *grammar, const char *input, double *out);

/**
 * Best parse of `input` as a bracketed string in `*out` (free it with
 * `lm_string_free`). A string outside the language is a data error.
 *
 * # Safety
 * `grammar` must be a live handle, `input` a NUL-terminated string and
 * `out` writable.
 */
enum LmStatus lm_grammar_parse(const struct LmGrammar *grammar, const char *input, char **out);

/**
 * # Safety
 * `grammar` must be NULL or a handle not yet freed.
 */
void lm_grammar_free(struct LmGrammar *grammar);

/**
 * Fits the scaling law to `n` points.
 *
 * # Safety
 * `params`, `tokens` and `loss` must each hold `n` doubles; `out` must be
 * writable.
 */
enum LmStatus lm_scaling_fit(const double *params,
                             const double *tokens,
                             const double *loss,
                             size_t n,
                             struct LmScalingFit *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LMLAB_H */
