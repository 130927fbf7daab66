#ifndef DIMORL_H
#define DIMORL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible function.
typedef enum DimorlStatus {
  DIMORL_STATUS_OK = 0,
  DIMORL_STATUS_NULL_POINTER = 1,
  DIMORL_STATUS_INVALID_ARGUMENT = 2,
  DIMORL_STATUS_IO = 3,
  DIMORL_STATUS_NUMERIC = 4,
  DIMORL_STATUS_DIMENSION = 5,
  DIMORL_STATUS_PANIC = 6,
} DimorlStatus;

// Trained SAC policy.
typedef struct DimorlAgent DimorlAgent;

// Trained environment-model ensemble.
typedef struct DimorlEnsemble DimorlEnsemble;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call into this library on the same thread.
const char *dimorl_last_error(void);

// Library version as a static NUL-terminated string.
const char *dimorl_version(void);

// Load an ensemble written by `train-model`.
enum DimorlStatus dimorl_ensemble_load(const char *path, struct DimorlEnsemble **out);

void dimorl_ensemble_free(struct DimorlEnsemble *ensemble);

// State dimension, or 0 for a null handle.
size_t dimorl_ensemble_state_dim(const struct DimorlEnsemble *ensemble);

// Action dimension, or 0 for a null handle.
size_t dimorl_ensemble_action_dim(const struct DimorlEnsemble *ensemble);

// Number of members, or 0 for a null handle.
size_t dimorl_ensemble_members(const struct DimorlEnsemble *ensemble);

// Gaussian prediction of one member over `(s', r)`. `mean_out` and
// `var_out` must each hold `state_dim + 1` values.
enum DimorlStatus dimorl_ensemble_predict(const struct DimorlEnsemble *ensemble,
                                          size_t member,
                                          const double *state,
                                          const double *action,
                                          double *mean_out,
                                          double *var_out);

// Reward-penalty uncertainty at `(s, a)`: the largest member norm of the
// predicted variance (or std when `on_std`).
enum DimorlStatus dimorl_ensemble_uncertainty(const struct DimorlEnsemble *ensemble,
                                              const double *state,
                                              const double *action,
                                              bool on_std,
                                              double *out);

// Load a policy written by `train-policy`.
enum DimorlStatus dimorl_agent_load(const char *path, struct DimorlAgent **out);

void dimorl_agent_free(struct DimorlAgent *agent);

size_t dimorl_agent_state_dim(const struct DimorlAgent *agent);

size_t dimorl_agent_action_dim(const struct DimorlAgent *agent);

// Policy action for one state. Stochastic actions draw from a stream
// seeded by `seed`; `deterministic` uses the squashed mean.
enum DimorlStatus dimorl_agent_act(const struct DimorlAgent *agent,
                                   const double *state,
                                   bool deterministic,
                                   uint64_t seed,
                                   double *action_out);

// `Σ risks + β·Var(risks) + weight_reg + var_bound_reg`.
enum DimorlStatus dimorl_vrex_combine(const double *risks,
                                      size_t n,
                                      double beta,
                                      double weight_reg,
                                      double var_bound_reg,
                                      double *out);

// `raw − λ·u` where `u` is the largest member norm of the variance rows.
// `variances` is row-major, `members × dim`.
enum DimorlStatus dimorl_penalized_reward(double raw,
                                          const double *variances,
                                          size_t members,
                                          size_t dim,
                                          double lambda,
                                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIMORL_H */
