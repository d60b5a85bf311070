#ifndef CENCOV_H
#define CENCOV_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every fallible entry point.
 */
typedef enum CencovStatus {
  CENCOV_STATUS_OK = 0,
  CENCOV_STATUS_NULL_POINTER = 1,
  CENCOV_STATUS_INVALID_INPUT = 2,
  CENCOV_STATUS_NON_CONVERGENCE = 3,
  CENCOV_STATUS_SINGULAR = 4,
  CENCOV_STATUS_NUMERICAL = 5,
  CENCOV_STATUS_PANIC = 6,
  CENCOV_STATUS_BUFFER_TOO_SMALL = 7,
} CencovStatus;

typedef enum CencovEstimator {
  CENCOV_ESTIMATOR_CC = 0,
  CENCOV_ESTIMATOR_IPW = 1,
  CENCOV_ESTIMATOR_MLE = 2,
  CENCOV_ESTIMATOR_ACC = 3,
  CENCOV_ESTIMATOR_MACC = 4,
  CENCOV_ESTIMATOR_AIPW = 5,
} CencovEstimator;

typedef enum CencovLambda {
  CENCOV_LAMBDA_NONE = 0,
  CENCOV_LAMBDA_PLAIN = 1,
  CENCOV_LAMBDA_NUISANCE_ADJUSTED = 2,
} CencovLambda;

/**
 * Opaque dataset handle.
 */
typedef struct CencovDataset CencovDataset;

/**
 * Opaque fit handle.
 */
typedef struct CencovFit CencovFit;

/**
 * Opaque nuisance handle.
 */
typedef struct CencovNuisance CencovNuisance;

/**
 * Estimator selection for [`cencov_fit`]. The problem type comes from the dataset.
 */
typedef struct CencovSpec {
  enum CencovEstimator estimator;
  enum CencovLambda lambda;
  /**
   * Non-zero for dependent censoring or missingness.
   */
  uint8_t dependent;
  /**
   * Non-zero to use the conditional-expectation form of the augmentation term.
   */
  uint8_t effective_psi;
  /**
   * Non-zero to model `Pr(observed | Y, Z)` by logistic regression.
   */
  uint8_t logistic_pi_yz;
} CencovSpec;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message on this thread, or null. Valid until the next failing call.
 */
const char *cencov_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cencov_version(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void cencov_string_free(char *s);

/**
 * Builds a censored-covariate dataset from column arrays. `z` is row-major `n x nz`.
 * `age_column < 0` selects the linear-in-x mean; otherwise the time-to-event mean with
 * that covariate as the age.
 *
 * # Safety
 * Array pointers must be valid for the stated lengths; `out` must be writable.
 */
enum CencovStatus cencov_dataset_censored(const double *y,
                                          const double *w,
                                          const uint8_t *delta,
                                          const double *z,
                                          uintptr_t n,
                                          uintptr_t nz,
                                          int32_t age_column,
                                          struct CencovDataset **out);

/**
 * Builds a missing-covariate dataset. `x[i]` is ignored when `r[i] == 0`.
 *
 * # Safety
 * As for [`cencov_dataset_censored`].
 */
enum CencovStatus cencov_dataset_missing(const double *y,
                                         const double *x,
                                         const uint8_t *r,
                                         const double *z,
                                         uintptr_t n,
                                         uintptr_t nz,
                                         int32_t age_column,
                                         struct CencovDataset **out);

/**
 * Number of records in a dataset, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live dataset handle.
 */
uintptr_t cencov_dataset_len(const struct CencovDataset *ds);

/**
 * # Safety
 * `ds` must be null or a handle from this library, freed once.
 */
void cencov_dataset_free(struct CencovDataset *ds);

/**
 * Parses a nuisance bundle from JSON (the `NuisanceBundle` document layout).
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum CencovStatus cencov_nuisance_from_json(const char *json, struct CencovNuisance **out);

/**
 * # Safety
 * `nu` must be null or a handle from this library, freed once.
 */
void cencov_nuisance_free(struct CencovNuisance *nu);

/**
 * Fits an estimator. A null `nuisance` estimates the required nuisance blocks from the
 * data; otherwise the supplied blocks are treated as known.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum CencovStatus cencov_fit(const struct CencovDataset *ds,
                             struct CencovSpec spec,
                             const struct CencovNuisance *nuisance,
                             struct CencovFit **out);

/**
 * Fits an estimator described by a JSON request
 * `{"estimator": {...}, "nuisance": {...}, "options": {...}}`. The `problem` field of the
 * estimator is overridden by the dataset's problem type.
 *
 * # Safety
 * `ds` must be live, `json` NUL-terminated and `out` writable.
 */
enum CencovStatus cencov_fit_json(const struct CencovDataset *ds,
                                  const char *json,
                                  struct CencovFit **out);

/**
 * Length of the parameter vector `(beta..., sigma)` of a fit, or 0 for null.
 *
 * # Safety
 * `fit` must be null or live.
 */
uintptr_t cencov_fit_dim(const struct CencovFit *fit);

/**
 * 1 when the final solve met its tolerance, 0 otherwise (including null).
 *
 * # Safety
 * `fit` must be null or live.
 */
uint8_t cencov_fit_converged(const struct CencovFit *fit);

/**
 * Copies the estimates into `out` (capacity `len`).
 *
 * # Safety
 * `fit` must be live and `out` valid for `len` doubles.
 */
enum CencovStatus cencov_fit_estimates(const struct CencovFit *fit, double *out, uintptr_t len);

/**
 * Copies the sandwich standard errors into `out` (capacity `len`).
 *
 * # Safety
 * As for [`cencov_fit_estimates`].
 */
enum CencovStatus cencov_fit_std_errors(const struct CencovFit *fit, double *out, uintptr_t len);

/**
 * Serializes the full fit result to JSON. Free the string with [`cencov_string_free`].
 *
 * # Safety
 * `fit` must be live and `out` writable.
 */
enum CencovStatus cencov_fit_to_json(const struct CencovFit *fit, char **out);

/**
 * # Safety
 * `fit` must be null or a handle from this library, freed once.
 */
void cencov_fit_free(struct CencovFit *fit);

/**
 * Closed-form augmentation vector `Psi(y, z)` for a Gaussian x-law with mean `mu_x` and sd
 * `sd_x`. Writes `nbeta + 1` values into `out`.
 *
 * # Safety
 * `beta` valid for `nbeta`, `z` for `nz`, `out` for `out_len` doubles.
 */
enum CencovStatus cencov_psi_closed(const double *beta,
                                    uintptr_t nbeta,
                                    double sigma,
                                    double y,
                                    const double *z,
                                    uintptr_t nz,
                                    int32_t age_column,
                                    double mu_x,
                                    double sd_x,
                                    double *out,
                                    uintptr_t out_len);

/**
 * Standard normal upper tail `1 - Phi(t)`.
 */
double cencov_normal_upper_tail(double t);

/**
 * `log(1 - Phi(t))`, accurate far into the upper tail.
 */
double cencov_log_normal_upper_tail(double t);

/**
 * Runs a simulation scenario given as JSON and returns the summary as JSON.
 * `threads == 0` uses the default worker pool.
 *
 * # Safety
 * `scenario_json` must be NUL-terminated; `out` writable.
 */
enum CencovStatus cencov_simulate_json(const char *scenario_json, uintptr_t threads, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CENCOV_H */
