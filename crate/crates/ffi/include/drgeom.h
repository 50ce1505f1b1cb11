#ifndef DRGEOM_H
#define DRGEOM_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DrgStatus {
  DRG_STATUS_OK = 0,
  DRG_STATUS_NULL_POINTER = 1,
  DRG_STATUS_INVALID_UTF8 = 2,
  DRG_STATUS_INVALID_SPEC = 3,
  DRG_STATUS_INVALID_ARGUMENT = 4,
  DRG_STATUS_BUFFER_TOO_SMALL = 5,
  DRG_STATUS_INTERNAL = 6,
} DrgStatus;

/**
 * Opaque model handle.
 */
typedef struct DrgModel DrgModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next call into this library from the same thread.
 */
const char *drg_last_error(void);

/**
 * Library version as a static string.
 */
const char *drg_version(void);

/**
 * Builds a model from a model-spec JSON document.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a writable pointer.
 */
enum DrgStatus drg_model_from_json(const char *json, struct DrgModel **out);

/**
 * # Safety
 * `m` must be NULL or a handle from [`drg_model_from_json`] not yet freed.
 */
void drg_model_free(struct DrgModel *m);

/**
 * # Safety
 * `m` must be a live handle and `out` writable.
 */
enum DrgStatus drg_model_theta(const struct DrgModel *m, double *out);

/**
 * # Safety
 * `m` must be a live handle and `out` writable.
 */
enum DrgStatus drg_model_num_states(const struct DrgModel *m, size_t *out);

/**
 * Copies the true state probabilities into `buf`, which must hold at least
 * [`drg_model_num_states`] entries.
 *
 * # Safety
 * `m` must be a live handle and `buf` must point to `len` writable doubles.
 */
enum DrgStatus drg_model_truth(const struct DrgModel *m, double *buf, size_t len);

/**
 * Runs one verification suite (`verify-dr`, `geometry`, `eic` or
 * `simulate`) on the model. `options` is NULL or a JSON object whose keys
 * are the command-line flags without dashes (`{"seed": 3, "grid_size": 100}`).
 * The report is written to `*report` and released with
 * [`drg_string_free`]; `*pass` tells whether every check passed.
 *
 * # Safety
 * `m` must be a live handle, `command` a NUL-terminated string, `options`
 * NULL or NUL-terminated, `report` and `pass` writable.
 */
enum DrgStatus drg_run(const struct DrgModel *m,
                       const char *command,
                       const char *options,
                       char **report,
                       bool *pass);

/**
 * `|<D1, D2>_P - <e(D1), m(D2)>_{P'}|` for functions centered under `p`,
 * where `e` and `m` are the exponential and mixture transports from `p` to
 * `p_prime`. All arrays hold `k` entries.
 *
 * # Safety
 * `p`, `p_prime`, `d1` and `d2` must each point to `k` readable doubles and
 * `out` must be writable.
 */
enum DrgStatus drg_duality_gap(size_t k,
                               const double *p,
                               const double *p_prime,
                               const double *d1,
                               const double *d2,
                               double *out);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library not yet freed.
 */
void drg_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DRGEOM_H */
