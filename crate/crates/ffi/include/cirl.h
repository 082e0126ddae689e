#ifndef CIRL_H
#define CIRL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CirlStatus {
  CIRL_STATUS_OK = 0,
  CIRL_STATUS_INVALID_ARGUMENT = 1,
  CIRL_STATUS_NULL_POINTER = 2,
  CIRL_STATUS_PARSE = 3,
  CIRL_STATUS_MISSING_ARTIFACT = 4,
  CIRL_STATUS_NUMERICAL = 5,
  CIRL_STATUS_INVALID_STATE = 6,
  CIRL_STATUS_IO = 7,
  CIRL_STATUS_PANIC = 8,
} CirlStatus;

/**
 * A logged cohort read from disk.
 */
typedef struct CirlDataset CirlDataset;

/**
 * Simulated treatment environment with its own random stream.
 */
typedef struct CirlEnv CirlEnv;

/**
 * A recurrent Q-network (expert or candidate policy).
 */
typedef struct CirlQNetwork CirlQNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into this library on the same thread.
 */
const char *cirl_last_error(void);

/**
 * Library version, a static NUL-terminated string.
 */
const char *cirl_version(void);

/**
 * Create an environment of autoregressive order `order` with the default
 * dynamics for that order and noise level `noise_std`; it starts reset.
 *
 * # Safety
 * `out_env` must be valid for a pointer write.
 */
enum CirlStatus cirl_env_new(size_t order,
                             double noise_std,
                             uint64_t seed,
                             struct CirlEnv **out_env);

/**
 * # Safety
 * `env` must come from [`cirl_env_new`] and not be used afterwards. NULL is ignored.
 */
void cirl_env_free(struct CirlEnv *env);

/**
 * Start a new episode.
 *
 * # Safety
 * `env` must be a live handle.
 */
enum CirlStatus cirl_env_reset(struct CirlEnv *env);

/**
 * Current covariates and step index.
 *
 * # Safety
 * `env` must be a live handle; the outputs must be writable.
 */
enum CirlStatus cirl_env_observe(const struct CirlEnv *env, double *x, double *z, size_t *t);

/**
 * Apply `action` (0 or 1); writes the next covariates and whether the
 * episode has ended. Stepping a finished episode is `CIRL_STATUS_INVALID_STATE`.
 *
 * # Safety
 * `env` must be a live handle; the outputs must be writable.
 */
enum CirlStatus cirl_env_step(struct CirlEnv *env,
                              uint8_t action,
                              double *x,
                              double *z,
                              bool *done);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out_dataset` writable.
 */
enum CirlStatus cirl_dataset_load(const char *path, struct CirlDataset **out_dataset);

/**
 * # Safety
 * `dataset` must come from [`cirl_dataset_load`]. NULL is ignored.
 */
void cirl_dataset_free(struct CirlDataset *dataset);

/**
 * Number of trajectories; 0 for NULL.
 *
 * # Safety
 * `dataset` must be NULL or a live handle.
 */
size_t cirl_dataset_len(const struct CirlDataset *dataset);

/**
 * Copy trajectory `index`: `T` actions and `T + 1` covariate pairs
 * (interleaved `x, z`). With `capacity < T` nothing is copied and the
 * call fails with `CIRL_STATUS_INVALID_ARGUMENT`; `length` is always set.
 *
 * # Safety
 * `covariates` must hold `2 * (capacity + 1)` doubles, `actions` `capacity` bytes.
 */
enum CirlStatus cirl_dataset_trajectory(const struct CirlDataset *dataset,
                                        size_t index,
                                        double *covariates,
                                        uint8_t *actions,
                                        size_t capacity,
                                        size_t *length);

/**
 * Load a saved Q-network; input scaling follows `env`'s configuration.
 *
 * # Safety
 * `path` must be NUL-terminated, `env` live, `out_network` writable.
 */
enum CirlStatus cirl_qnetwork_load(const char *path,
                                   const struct CirlEnv *env,
                                   struct CirlQNetwork **out_network);

/**
 * # Safety
 * `network` must come from [`cirl_qnetwork_load`]. NULL is ignored.
 */
void cirl_qnetwork_free(struct CirlQNetwork *network);

/**
 * `Q(h, 0)` and `Q(h, 1)` for the history of `steps` actions and
 * `steps + 1` interleaved covariate pairs.
 *
 * # Safety
 * Buffers must have the stated lengths; `q_out` holds 2 doubles.
 */
enum CirlStatus cirl_qnetwork_q_values(const struct CirlQNetwork *network,
                                       const double *covariates,
                                       const uint8_t *actions,
                                       size_t steps,
                                       double *q_out);

/**
 * One orthogonal-projection step: writes the new `mu_bar` (length `dim`)
 * and the margin `||mu_expert - mu_bar||`.
 *
 * # Safety
 * Vector arguments hold `dim` doubles; `margin` is writable.
 */
enum CirlStatus cirl_projection_step(const double *mu_expert,
                                     const double *mu_bar_prev,
                                     const double *mu_k,
                                     size_t dim,
                                     double *mu_bar_out,
                                     double *margin);

/**
 * Mixing weights over `count` feature expectations (row-major,
 * `count * dim`) minimizing the distance to `mu_expert`.
 *
 * # Safety
 * `mus` holds `count * dim` doubles, `lambdas_out` `count`; `distance` writable.
 */
enum CirlStatus cirl_mixing_policy(const double *mu_expert,
                                   const double *mus,
                                   size_t count,
                                   size_t dim,
                                   double *lambdas_out,
                                   double *distance);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CIRL_H */
