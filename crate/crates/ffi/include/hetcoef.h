#ifndef HETCOEF_H
#define HETCOEF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HcStatus {
  HC_STATUS_OK = 0,
  HC_STATUS_INVALID_ARGUMENT = 1,
  HC_STATUS_DATA_ERROR = 2,
  HC_STATUS_IDENTIFICATION_FAILURE = 3,
  HC_STATUS_IO_ERROR = 4,
  HC_STATUS_NULL_POINTER = 5,
  HC_STATUS_NOT_APPLICABLE = 6,
  HC_STATUS_PANIC = 7,
} HcStatus;

typedef struct HcControl HcControl;

typedef struct HcDataset HcDataset;

typedef struct HcFit HcFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * Valid until the next `hc_*` call on the same thread.
 */
const char *hc_last_error_message(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void hc_string_free(char *s);

/**
 * Reads a dataset CSV (columns `y`, `x` or `x1..xT`, optional `z`, `v`).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum HcStatus hc_dataset_from_csv(const char *path, struct HcDataset **out);

/**
 * Builds a dataset from row-major arrays. `z` and `v` may be null.
 *
 * # Safety
 * `y`, `z`, `v` must hold `n` values and `x` must hold `n * x_cols` values.
 */
enum HcStatus hc_dataset_new(const double *y,
                             const double *x,
                             size_t n,
                             size_t x_cols,
                             const uint32_t *z,
                             const double *v,
                             struct HcDataset **out);

/**
 * Simulates `n` rows from a DGP configuration given as JSON.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `out` must be writable.
 */
enum HcStatus hc_simulate(const char *config_json, size_t n, uint64_t seed, struct HcDataset **out);

/**
 * Number of rows, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t hc_dataset_rows(const struct HcDataset *ds);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void hc_dataset_free(struct HcDataset *ds);

/**
 * Estimates the control variable from the instrument column.
 *
 * # Safety
 * `ds` must be a live handle; `out` must be writable.
 */
enum HcStatus hc_control_estimate(const struct HcDataset *ds, struct HcControl **out);

/**
 * Uses the dataset's `v` column as the control.
 *
 * # Safety
 * `ds` must be a live handle; `out` must be writable.
 */
enum HcStatus hc_control_passthrough(const struct HcDataset *ds, struct HcControl **out);

/**
 * Copies the control values into `buf`, which must hold at least as many
 * values as the dataset has rows.
 *
 * # Safety
 * `ctrl` must be a live handle; `buf` must hold `len` values.
 */
enum HcStatus hc_control_values(const struct HcControl *ctrl, double *buf, size_t len);

/**
 * # Safety
 * `ctrl` must be null or a handle not yet freed.
 */
void hc_control_free(struct HcControl *ctrl);

/**
 * Fits the sieve control regression. `p` and `psi` use the CLI syntax, e.g.
 * `"power:2"` and `"indicator:8"`.
 *
 * # Safety
 * Handles must be live; strings NUL-terminated; `out` writable.
 */
enum HcStatus hc_fit(const struct HcDataset *ds,
                     const struct HcControl *ctrl,
                     const char *p,
                     const char *psi,
                     double ridge,
                     struct HcFit **out);

/**
 * # Safety
 * `fit` must be null or a handle not yet freed.
 */
void hc_fit_free(struct HcFit *fit);

/**
 * Basis dimensions `J` (outcome) and `K` (control sieve).
 *
 * # Safety
 * `fit` must be a live handle; `j` and `k` writable.
 */
enum HcStatus hc_fit_dims(const struct HcFit *fit, size_t *j, size_t *k);

/**
 * Copies the `J * K` coefficients, laid out `(b_1', ..., b_J')'`.
 *
 * # Safety
 * `fit` must be a live handle; `buf` must hold `len` values.
 */
enum HcStatus hc_fit_coefficients(const struct HcFit *fit, double *buf, size_t len);

/**
 * # Safety
 * `fit` must be a live handle; `out` writable.
 */
enum HcStatus hc_fit_gram_min_eigenvalue(const struct HcFit *fit, double *out);

/**
 * `p(x)' q_hat(v)`.
 *
 * # Safety
 * `fit` must be a live handle; `x` must hold `x_len` values; `out` writable.
 */
enum HcStatus hc_fit_predict_crf(const struct HcFit *fit,
                                 const double *x,
                                 size_t x_len,
                                 double v,
                                 double *out);

/**
 * Average structural function at `x`.
 *
 * # Safety
 * Handles must be live; `x` must hold `x_len` values; `out` writable.
 */
enum HcStatus hc_fit_asf(const struct HcFit *fit,
                         const struct HcControl *ctrl,
                         const double *x,
                         size_t x_len,
                         double *out);

/**
 * Treatment effects `mu(t) - mu(0)`; writes the count to `written`.
 *
 * # Safety
 * Handles must be live; `buf` must hold `len` values; `written` writable.
 */
enum HcStatus hc_fit_ate(const struct HcFit *fit,
                         const struct HcControl *ctrl,
                         double *buf,
                         size_t len,
                         size_t *written);

/**
 * Serializes the fit as JSON. Free the result with [`hc_string_free`].
 *
 * # Safety
 * `fit` must be a live handle; `out` writable.
 */
enum HcStatus hc_fit_to_json(const struct HcFit *fit, char **out);

/**
 * Runs the identification diagnostics with default tolerances and returns
 * the report as JSON. Failed conditions are verdicts in the report, not
 * error statuses.
 *
 * # Safety
 * Handles must be live; `p` NUL-terminated; `out` writable.
 */
enum HcStatus hc_diagnose(const struct HcDataset *ds,
                          const struct HcControl *ctrl,
                          const char *p,
                          size_t bins,
                          char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HETCOEF_H */
