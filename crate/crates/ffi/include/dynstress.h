/* Generated by cbindgen; do not edit. */

#ifndef DYNSTRESS_H
#define DYNSTRESS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DsStatus {
  DS_STATUS_OK = 0,
  DS_STATUS_NULL_POINTER = 1,
  DS_STATUS_INVALID_ARGUMENT = 2,
  DS_STATUS_INFEASIBLE = 3,
  DS_STATUS_NUMERICAL = 4,
  DS_STATUS_IO = 5,
  DS_STATUS_PANIC = 6,
  DS_STATUS_BUFFER_TOO_SMALL = 7,
} DsStatus;

// Calibrated stressed dynamics handle.
typedef struct DsDynamics DsDynamics;

// Compound Poisson model handle.
typedef struct DsModel DsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `len`). Returns the full message length excluding the NUL,
// or 0 when there is no error.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
uintptr_t ds_last_error_message(char *buf, uintptr_t len);

// Creates a model with Gamma(shape, rate) severities.
//
// # Safety
// `out` must be a valid pointer.
enum DsStatus ds_model_new_gamma(double kappa,
                                 double shape,
                                 double rate,
                                 double horizon,
                                 struct DsModel **out);

// # Safety
// `model` must come from `ds_model_new_gamma` (or be null) and not be used afterwards.
void ds_model_free(struct DsModel *model);

// VaR_alpha(X_t) under the reference measure.
//
// # Safety
// Pointers must be valid.
enum DsStatus ds_reference_var(const struct DsModel *model, double alpha, double t, double *out);

// CVaR_alpha(X_t) under the reference measure.
//
// # Safety
// Pointers must be valid.
enum DsStatus ds_reference_cvar(const struct DsModel *model, double alpha, double t, double *out);

// Calibrates the stress Q(X_{stress_time} < q) = alpha.
//
// # Safety
// Pointers must be valid.
enum DsStatus ds_dynamics_new_var(const struct DsModel *model,
                                  double q,
                                  double alpha,
                                  double stress_time,
                                  struct DsDynamics **out);

// Calibrates the stress VaR_alpha = q and CVaR_alpha = s at `stress_time`.
//
// # Safety
// Pointers must be valid.
enum DsStatus ds_dynamics_new_cvar(const struct DsModel *model,
                                   double q,
                                   double s,
                                   double alpha,
                                   double stress_time,
                                   struct DsDynamics **out);

// # Safety
// `dynamics` must come from a `ds_dynamics_new_*` call (or be null) and not be used afterwards.
void ds_dynamics_free(struct DsDynamics *dynamics);

// Copies the multipliers into `buf`; `len` receives their number.
// Returns `BufferTooSmall` (with `len` set) when `cap` is insufficient.
//
// # Safety
// `buf` must be valid for `cap` doubles; `len` must be valid.
enum DsStatus ds_dynamics_multipliers(const struct DsDynamics *dynamics,
                                      double *buf,
                                      uintptr_t cap,
                                      uintptr_t *len);

// Girsanov kernel h*(t, x, y).
//
// # Safety
// Pointers must be valid.
enum DsStatus ds_kernel(const struct DsDynamics *dynamics,
                        double t,
                        double x,
                        double y,
                        double *out);

// Stressed intensity kappa*(t, x).
//
// # Safety
// Pointers must be valid.
enum DsStatus ds_intensity(const struct DsDynamics *dynamics, double t, double x, double *out);

// dQ*/dP as a function of the state at the stress time.
//
// # Safety
// Pointers must be valid.
enum DsStatus ds_rn_terminal(const struct DsDynamics *dynamics, double x, double *out);

// Simulates `n_paths` stressed paths and writes X_T of each into `buf`.
//
// # Safety
// `buf` must be valid for `n_paths` doubles.
enum DsStatus ds_simulate_terminal(const struct DsDynamics *dynamics,
                                   uintptr_t n_paths,
                                   double dt,
                                   uint64_t seed,
                                   double *buf);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DYNSTRESS_H */
