#ifndef PBA_H
#define PBA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum PbaStatus {
  PBA_STATUS_OK = 0,
  PBA_STATUS_NULL_POINTER = 1,
  PBA_STATUS_INVALID_ARGUMENT = 2,
  PBA_STATUS_BUFFER_TOO_SMALL = 3,
  PBA_STATUS_INCOHERENT = 4,
  PBA_STATUS_SESSION_CLOSED = 5,
  PBA_STATUS_DEGENERATE = 6,
  PBA_STATUS_INTERNAL = 7,
  PBA_STATUS_PANIC = 8,
} PbaStatus;

// Which per-variable row of a report to read.
typedef enum PbaReportRow {
  // Adjusted expectation of the quantity.
  PBA_REPORT_ROW_ASSESSMENT = 0,
  // Diagonal of the adjusted variance.
  PBA_REPORT_ROW_ADJUSTED_VARIANCE = 1,
  // Diagonal of the prior variance.
  PBA_REPORT_ROW_PRIOR_VARIANCE = 2,
  // Diagonal of the discrepancy variance.
  PBA_REPORT_ROW_DISCREPANCY_VARIANCE = 3,
  // Percentage of prior variance resolved.
  PBA_REPORT_ROW_RESOLVED_PCT = 4,
  // Percentage resolvable with unlimited model runs.
  PBA_REPORT_ROW_MAX_RESOLVABLE_PCT = 5,
} PbaReportRow;

// Opaque assessment report.
typedef struct PbaReport PbaReport;

// Opaque elicitation session.
typedef struct PbaSession PbaSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread; empty after a
// success. Valid until the next call into the library on this thread.
const char *pba_last_error(void);

// Releases a string returned by the library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void pba_string_free(char *s);

// Moore-Penrose inverse of a `rows x cols` matrix into `out` (`cols x rows`).
//
// # Safety
// `m` holds `rows * cols` doubles and `out` has room for as many.
enum PbaStatus pba_pseudo_inverse(const double *m, size_t rows, size_t cols, double *out);

// Adjusts `B` (length `nb`) by observing `D` (length `nd`).
//
// Writes `P_D(B)` to `out_expectation` (`nb`) and `Var_D(B)` to
// `out_variance` (`nb x nb`); either output may be null to skip it.
// Returns `Incoherent` when the joint specification is not coherent.
//
// # Safety
// Inputs must hold the stated number of doubles.
enum PbaStatus pba_adjust(size_t nb,
                          size_t nd,
                          const double *prevision_b,
                          const double *prevision_d,
                          const double *var_b,
                          const double *var_d,
                          const double *cov_bd,
                          const double *observed_d,
                          double *out_expectation,
                          double *out_variance);

// Starts a session over `n` variables named by `names`, all sharing
// `unit`. `integral` nonzero rounds hypothetical values to integers;
// `multiplier` is the number of conditional standard deviations added to
// form each hypothetical (0.5 is the usual choice).
//
// # Safety
// `names` holds `n` NUL-terminated strings; `out` is writable.
enum PbaStatus pba_session_new(const char *const *names,
                               size_t n,
                               const char *unit,
                               int integral,
                               double first_prevision,
                               double first_variance,
                               double multiplier,
                               struct PbaSession **out);

// # Safety
// `s` must come from [`pba_session_new`] and not have been freed.
void pba_session_free(struct PbaSession *s);

// Number of variables elicited so far.
//
// # Safety
// `s` is a live session handle or null (returns 0).
size_t pba_session_elicited(const struct PbaSession *s);

// The next question as a JSON document.
//
// # Safety
// `s` is a live session handle; `out` is writable.
enum PbaStatus pba_session_next_json(const struct PbaSession *s, char **out);

// Hypothetical values chosen so far, into `out` (capacity `cap`); the count
// is written to `len`.
//
// # Safety
// `out` has room for `cap` doubles; `len` is writable.
enum PbaStatus pba_session_hypotheticals(const struct PbaSession *s,
                                         double *out,
                                         size_t cap,
                                         size_t *len);

// Answers for the next variable: one conditional prevision per
// conditioning set (`k` of them for the `k`-th variable, counting from 0),
// the conditional variance given all of them, and the unconditional
// prevision. The session is unchanged on failure.
//
// # Safety
// `conditional_previsions` holds `k` doubles.
enum PbaStatus pba_session_submit(struct PbaSession *s,
                                  const double *conditional_previsions,
                                  size_t k,
                                  double conditional_variance,
                                  double prior_prevision);

// The covariance elicited so far (`k x k`, `k` = [`pba_session_elicited`]).
//
// # Safety
// `out` has room for `k * k` doubles.
enum PbaStatus pba_session_covariance(const struct PbaSession *s, double *out);

// Rescales the elicited correlations by `n` directly assessed marginal
// variances and closes the session. Writes the `n x n` covariance to
// `out_covariance` when non-null.
//
// # Safety
// `marginal_variances` holds `n` doubles; `out_covariance` has room for
// `n * n`.
enum PbaStatus pba_session_finalize(struct PbaSession *s,
                                    const double *marginal_variances,
                                    size_t n,
                                    double *out_covariance);

// The finalized prior as a prior document (JSON).
//
// # Safety
// `s` is a live session handle; `out` is writable.
enum PbaStatus pba_session_prior_json(const struct PbaSession *s, char **out);

// The session transcript (JSON), enough to replay it.
//
// # Safety
// `s` is a live session handle; `out` is writable.
enum PbaStatus pba_session_transcript_json(const struct PbaSession *s, char **out);

// Runs the assessment from prior, class-structure and model-output
// documents (JSON).
//
// # Safety
// String arguments are NUL-terminated UTF-8; `out` is writable.
enum PbaStatus pba_report_compute(const char *prior_json,
                                  const char *classes_json,
                                  const char *batch_json,
                                  struct PbaReport **out);

// Parses a report document (JSON).
//
// # Safety
// `json` is NUL-terminated UTF-8; `out` is writable.
enum PbaStatus pba_report_from_json(const char *json, struct PbaReport **out);

// # Safety
// `r` must come from this library and not have been freed.
void pba_report_free(struct PbaReport *r);

// Number of assessed variables, or 0 for a null handle.
//
// # Safety
// `r` is a live report handle or null.
size_t pba_report_dim(const struct PbaReport *r);

// Copies one per-variable row into `out` (capacity `cap`).
//
// # Safety
// `out` has room for `cap` doubles.
enum PbaStatus pba_report_row(const struct PbaReport *r,
                              enum PbaReportRow row,
                              double *out,
                              size_t cap);

// 1 when the assessment is at least as close to the quantity as every
// individual model in every variable, 0 otherwise or for a null handle.
//
// # Safety
// `r` is a live report handle or null.
int pba_report_dominance_holds(const struct PbaReport *r);

// The report document (JSON), identical to what the service stores.
//
// # Safety
// `r` is a live report handle; `out` is writable.
enum PbaStatus pba_report_to_json(const struct PbaReport *r, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PBA_H */
