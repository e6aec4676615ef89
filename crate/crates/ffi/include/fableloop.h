#ifndef FABLELOOP_H
#define FABLELOOP_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result code of every call.
typedef enum FlStatus {
  FL_STATUS_OK = 0,
  FL_STATUS_NULL_POINTER = 1,
  FL_STATUS_INVALID_UTF8 = 2,
  FL_STATUS_INVALID_ARGUMENT = 3,
  FL_STATUS_EMPTY_INPUT = 4,
  FL_STATUS_NO_SCORE_FOUND = 5,
  FL_STATUS_AMBIGUOUS_SCORE = 6,
  FL_STATUS_SCORE_OUT_OF_RANGE = 7,
  FL_STATUS_TOO_SHORT = 8,
  FL_STATUS_INVALID_TUPLE = 9,
  FL_STATUS_TEMPLATE = 10,
  FL_STATUS_NO_EVENTS = 11,
  FL_STATUS_SEPARATION = 12,
  FL_STATUS_FIT_FAILED = 13,
  FL_STATUS_BUFFER_TOO_SMALL = 14,
  FL_STATUS_PANIC = 15,
} FlStatus;

// Link function for [`fl_hazard_fit`].
typedef enum FlLink {
  FL_LINK_LOGIT = 0,
  FL_LINK_CLOGLOG = 1,
} FlLink;

// Person-period records awaiting a fit.
typedef struct FlHazardData FlHazardData;

// A fitted discrete-time hazard model.
typedef struct FlHazardFit FlHazardFit;

// Prompt templates.
typedef struct FlPromptForge FlPromptForge;

// The six elements of a story tuple. `special_appearance` may be null, in
// which case the Writer chooses it.
typedef struct FlTuple {
  const char *protagonist;
  const char *location;
  const char *mood;
  const char *important_object;
  const char *activity;
  const char *special_appearance;
} FlTuple;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null after a success.
// The pointer stays valid until the next call on the same thread.
const char *fl_last_error_message(void);

// Library version as a static string.
const char *fl_version(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void fl_string_free(char *s);

// Parses the overall score out of an Editor response. On success writes the
// value and the byte range `[start, end)` of the number within `raw`; either
// span pointer may be null.
//
// # Safety
// `raw` must be a nul-terminated string; output pointers must be writable or null.
enum FlStatus fl_extract_score(const char *raw,
                               double *out_value,
                               size_t *out_start,
                               size_t *out_end);

// First transition where `scores` fails to improve. `strict` makes a tie a
// failure. Writes the period and whether it is an event (`false` means
// censored after the last transition).
//
// # Safety
// `scores` must point to `len` doubles; output pointers must be writable.
enum FlStatus fl_detect_mortality(const double *scores,
                                  size_t len,
                                  bool strict,
                                  uint32_t *out_period,
                                  bool *out_event);

// Cumulative survival `S(t)` for `len` per-period hazards, written to `out`.
//
// # Safety
// `hazards` and `out` must each point to `len` doubles.
enum FlStatus fl_survival_from_hazards(const double *hazards, size_t len, double *out);

// Built-in prompt templates.
struct FlPromptForge *fl_prompt_forge_builtin(void);

// Templates loaded from a directory of template files.
//
// # Safety
// `dir` must be a nul-terminated path; `out` must be writable.
enum FlStatus fl_prompt_forge_load_dir(const char *dir, struct FlPromptForge **out);

// # Safety
// `forge` must come from this library and not have been freed. Null is ignored.
void fl_prompt_forge_free(struct FlPromptForge *forge);

// Renders the first Writer prompt for `tuple`. The result is released with
// [`fl_string_free`].
//
// # Safety
// `forge` and `tuple` must be valid; every non-null string in `tuple` must be
// nul-terminated; `out` must be writable.
enum FlStatus fl_prompt_forge_render_writer_first(const struct FlPromptForge *forge,
                                                  const struct FlTuple *tuple,
                                                  char **out);

// An empty record set with `n_covariates` covariates per record.
struct FlHazardData *fl_hazard_data_new(size_t n_covariates);

// # Safety
// `data` must come from this library and not have been freed. Null is ignored.
void fl_hazard_data_free(struct FlHazardData *data);

// Adds one record: a branch at risk in `period` (1-based) with covariates `x`
// (`n_covariates` doubles; may be null when there are none).
//
// # Safety
// `data` must be valid; `x` must point to `n_covariates` doubles.
enum FlStatus fl_hazard_data_push(struct FlHazardData *data,
                                  uint32_t period,
                                  const double *x,
                                  bool event);

// Number of records added so far.
//
// # Safety
// `data` must be valid or null.
size_t fl_hazard_data_len(const struct FlHazardData *data);

// Fits the hazard model. With `firth` set, separation is handled by a
// penalized fit (logit only); otherwise it is an error.
//
// # Safety
// `data` must be valid; `out` must be writable.
enum FlStatus fl_hazard_fit(const struct FlHazardData *data,
                            enum FlLink link,
                            bool firth,
                            struct FlHazardFit **out);

// # Safety
// `fit` must come from this library and not have been freed. Null is ignored.
void fl_hazard_fit_free(struct FlHazardFit *fit);

// # Safety
// `fit` must be valid or null.
size_t fl_hazard_fit_n_periods(const struct FlHazardFit *fit);

// # Safety
// `fit` must be valid or null.
size_t fl_hazard_fit_n_covariates(const struct FlHazardFit *fit);

// Whether the penalized fit was used.
//
// # Safety
// `fit` must be valid or null.
bool fl_hazard_fit_penalized(const struct FlHazardFit *fit);

// Log-likelihood at the estimate.
//
// # Safety
// `fit` must be valid or null (NaN is returned).
double fl_hazard_fit_log_likelihood(const struct FlHazardFit *fit);

// Likelihood-ratio p-value of the covariate block; NaN without covariates.
//
// # Safety
// `fit` must be valid or null (NaN is returned).
double fl_hazard_fit_p_value(const struct FlHazardFit *fit);

// Copies the period effects into `out`. `written` (may be null) receives the
// number needed, also when `capacity` is too small.
//
// # Safety
// `fit` must be valid; `out` must point to `capacity` doubles.
enum FlStatus fl_hazard_fit_period_effects(const struct FlHazardFit *fit,
                                           double *out,
                                           size_t capacity,
                                           size_t *written);

// Copies the covariate coefficients into `out`, as for period effects.
//
// # Safety
// `fit` must be valid; `out` must point to `capacity` doubles.
enum FlStatus fl_hazard_fit_coefficients(const struct FlHazardFit *fit,
                                         double *out,
                                         size_t capacity,
                                         size_t *written);

// Fitted hazards `h(t | x)` for every period.
//
// # Safety
// `fit` must be valid; `x` must point to `n_covariates` doubles; `out` to
// `capacity` doubles.
enum FlStatus fl_hazard_fit_hazards(const struct FlHazardFit *fit,
                                    const double *x,
                                    double *out,
                                    size_t capacity,
                                    size_t *written);

// Survival curve `S(t | x)` for every period.
//
// # Safety
// As for [`fl_hazard_fit_hazards`].
enum FlStatus fl_hazard_fit_survival(const struct FlHazardFit *fit,
                                     const double *x,
                                     double *out,
                                     size_t capacity,
                                     size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FABLELOOP_H */
