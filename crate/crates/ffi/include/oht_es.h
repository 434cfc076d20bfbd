#ifndef OHT_ES_H
#define OHT_ES_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Update rule of a Gaussian tuner.
 */
typedef enum OhtGaussianMode {
  OHT_GAUSSIAN_MODE_ES_GRADIENT = 0,
  OHT_GAUSSIAN_MODE_CEM = 1,
} OhtGaussianMode;

/**
 * Result code of every call.
 */
typedef enum OhtStatus {
  OHT_STATUS_OK = 0,
  OHT_STATUS_INVALID_ARGUMENT = 1,
  OHT_STATUS_NUMERIC = 2,
  OHT_STATUS_UNAVAILABLE = 3,
  OHT_STATUS_LOGIC = 4,
  OHT_STATUS_IO = 5,
  OHT_STATUS_NULL_POINTER = 6,
  OHT_STATUS_PANIC = 7,
} OhtStatus;

/**
 * Categorical tuner over a discrete support, with its own generator.
 */
typedef struct OhtCategoricalTuner OhtCategoricalTuner;

/**
 * An environment instance.
 */
typedef struct OhtEnv OhtEnv;

/**
 * Gaussian tuner over log10 learning rates, with its own generator.
 */
typedef struct OhtGaussianTuner OhtGaussianTuner;

/**
 * A deterministic policy restored from a run checkpoint.
 */
typedef struct OhtPolicy OhtPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes.
 */
size_t oht_last_error(char *buf, size_t len);

/**
 * Creates `name` ("pendulum" or "pointmass"); `delay > 1` accumulates
 * rewards over that many steps.
 */
enum OhtStatus oht_env_new(const char *name, size_t delay, struct OhtEnv **out);

void oht_env_free(struct OhtEnv *env);

enum OhtStatus oht_env_dims(const struct OhtEnv *env, size_t *obs_dim, size_t *act_dim);

/**
 * Starts an episode and writes the first observation.
 */
enum OhtStatus oht_env_reset(struct OhtEnv *env, uint64_t seed, double *obs, size_t obs_len);

/**
 * Advances one step. `done` ends the episode; `terminal` marks a true
 * terminal state (not a time limit).
 */
enum OhtStatus oht_env_step(struct OhtEnv *env,
                            const double *action,
                            size_t act_len,
                            double *obs,
                            size_t obs_len,
                            double *reward,
                            bool *done,
                            bool *terminal);

/**
 * Gaussian tuner with `dim` dimensions and population `n`.
 */
enum OhtStatus oht_gaussian_tuner_new(const double *mu,
                                      const double *sigma,
                                      size_t dim,
                                      double beta,
                                      size_t n,
                                      enum OhtGaussianMode mode,
                                      uint64_t seed,
                                      struct OhtGaussianTuner **out);

void oht_gaussian_tuner_free(struct OhtGaussianTuner *t);

/**
 * Turns fitness standardization on or off (on by default).
 */
enum OhtStatus oht_gaussian_tuner_set_standardize(struct OhtGaussianTuner *t, bool on);

/**
 * Writes `n × dim` samples, row-major, into `etas`.
 */
enum OhtStatus oht_gaussian_tuner_sample(struct OhtGaussianTuner *t, double *etas, size_t len);

/**
 * Updates the distribution from `count` samples (row-major `count × dim`)
 * and their fitness values.
 */
enum OhtStatus oht_gaussian_tuner_update(struct OhtGaussianTuner *t,
                                         const double *etas,
                                         const double *fitness,
                                         size_t count);

/**
 * Current mean and standard deviation, `dim` entries each.
 */
enum OhtStatus oht_gaussian_tuner_state(const struct OhtGaussianTuner *t,
                                        double *mu,
                                        double *sigma,
                                        size_t dim);

/**
 * Categorical tuner over `support` (`k` values), `n` samples per update.
 */
enum OhtStatus oht_categorical_tuner_new(const size_t *support,
                                         size_t k,
                                         double epsilon,
                                         size_t n,
                                         double beta,
                                         uint64_t seed,
                                         struct OhtCategoricalTuner **out);

void oht_categorical_tuner_free(struct OhtCategoricalTuner *t);

enum OhtStatus oht_categorical_tuner_set_standardize(struct OhtCategoricalTuner *t, bool on);

/**
 * Draws one support index.
 */
enum OhtStatus oht_categorical_tuner_sample(struct OhtCategoricalTuner *t, size_t *index);

/**
 * Score-function update from exactly `n` (index, fitness) pairs.
 */
enum OhtStatus oht_categorical_tuner_update(struct OhtCategoricalTuner *t,
                                            const size_t *indices,
                                            const double *fitness,
                                            size_t count);

/**
 * Softmax of the logits, `k` entries.
 */
enum OhtStatus oht_categorical_tuner_probabilities(const struct OhtCategoricalTuner *t,
                                                   double *probs,
                                                   size_t k);

/**
 * Loads the actor from a run's `checkpoint.bin`; `env_name` supplies the
 * action bounds.
 */
enum OhtStatus oht_policy_load(const char *checkpoint,
                               const char *env_name,
                               struct OhtPolicy **out);

void oht_policy_free(struct OhtPolicy *p);

/**
 * Deterministic action for one observation.
 */
enum OhtStatus oht_policy_act(const struct OhtPolicy *p,
                              const double *obs,
                              size_t obs_len,
                              double *action,
                              size_t act_len);

/**
 * `(ret − low) / (high − low)`.
 */
enum OhtStatus oht_normalized_score(double ret, double low, double high, double *out);

/**
 * ES estimate versus analytic value on the scalar quadratic problem
 * (`A=2, b=0, ψ=0, g=1, μ=1`). `error` is relative to the analytic value.
 */
enum OhtStatus oht_prop1_check(double sigma,
                               size_t n,
                               uint64_t seed,
                               bool antithetic,
                               double *estimate,
                               double *analytic,
                               double *error);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OHT_ES_H */
