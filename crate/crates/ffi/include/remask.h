/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef REMASK_H
#define REMASK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RemaskStatus {
  REMASK_STATUS_OK = 0,
  REMASK_STATUS_NULL_POINTER = 1,
  REMASK_STATUS_INVALID_ARGUMENT = 2,
  REMASK_STATUS_IO = 3,
  REMASK_STATUS_PARSE = 4,
  REMASK_STATUS_UNKNOWN_CONDITION = 5,
  REMASK_STATUS_INFEASIBLE = 6,
  REMASK_STATUS_INTERNAL = 7,
} RemaskStatus;

typedef enum RemaskStrategyKind {
  REMASK_STRATEGY_KIND_UNIFORM_FIXED = 0,
  REMASK_STRATEGY_KIND_PURITY = 1,
  REMASK_STRATEGY_KIND_RANDOM_REVOKE = 2,
  REMASK_STRATEGY_KIND_PERSISTENT = 3,
  REMASK_STRATEGY_KIND_TCTS = 4,
  REMASK_STRATEGY_KIND_TCTS_FAS = 5,
} RemaskStrategyKind;

typedef enum RemaskScheduleKind {
  REMASK_SCHEDULE_KIND_COSINE = 0,
  REMASK_SCHEDULE_KIND_LINEAR = 1,
} RemaskScheduleKind;

// A token generator bound to a world's shape.
typedef struct RemaskGenerator RemaskGenerator;

// A per-location confidence scorer.
typedef struct RemaskSelector RemaskSelector;

// A toy world.
typedef struct RemaskWorld RemaskWorld;

// Sampling settings. `weight` may be `INFINITY`; it is ignored by the
// strategies that take no weight, as is `phi` outside `TCTS_FAS`.
typedef struct RemaskSamplingParams {
  enum RemaskStrategyKind strategy;
  double weight;
  double phi;
  size_t steps;
  enum RemaskScheduleKind schedule;
  double guidance;
  bool argmax;
} RemaskSamplingParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *remask_version(void);

// Message of the last failed call on this thread, empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *remask_last_error(void);

// Static name of a status code.
const char *remask_status_name(enum RemaskStatus status);

// Defaults: TCTS-FAS with weight 15 and threshold 0.45, 8 cosine steps,
// guidance 5, stochastic draws.
struct RemaskSamplingParams remask_sampling_params_default(void);

// Loads a bundled world by name (`disjoint`, `overlap`, `bgfg`,
// `attractive`) or a world JSON file by path.
//
// # Safety
// `name` must be a NUL-terminated string; `out` must be writable.
enum RemaskStatus remask_world_load(const char *name, struct RemaskWorld **out);

// Builds a world from its JSON description.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum RemaskStatus remask_world_from_json(const char *json, struct RemaskWorld **out);

// # Safety
// `world` must come from a world constructor and not be freed twice.
void remask_world_free(struct RemaskWorld *world);

// Grid height, width and codebook size. Any output pointer may be null.
//
// # Safety
// `world` must be a live handle; non-null outputs must be writable.
enum RemaskStatus remask_world_shape(const struct RemaskWorld *world,
                                     size_t *height,
                                     size_t *width,
                                     size_t *codebook_size);

// Number of conditions.
//
// # Safety
// `world` must be a live handle; `count` must be writable.
enum RemaskStatus remask_world_condition_count(const struct RemaskWorld *world, size_t *count);

// Id of the condition at `index`.
//
// # Safety
// `world` must be a live handle; `id` must be writable.
enum RemaskStatus remask_world_condition_id(const struct RemaskWorld *world,
                                            size_t index,
                                            int64_t *id);

// Fraction of compositional constraints of condition `condition_id` that
// a fully revealed grid satisfies.
//
// # Safety
// `world` must be a live handle; `cells` must point to `len` tokens;
// `score` must be writable.
enum RemaskStatus remask_alignment_score(const struct RemaskWorld *world,
                                         int64_t condition_id,
                                         const uint32_t *cells,
                                         size_t len,
                                         double *score);

// Exact log-probability of a fully revealed grid under a condition.
//
// # Safety
// As for [`remask_alignment_score`].
enum RemaskStatus remask_log_prob(const struct RemaskWorld *world,
                                  int64_t condition_id,
                                  const uint32_t *cells,
                                  size_t len,
                                  double *log_prob);

// Exact predictive of the world at the given temperature (1 is exact).
//
// # Safety
// `world` must be a live handle; `out` must be writable.
enum RemaskStatus remask_generator_oracle(const struct RemaskWorld *world,
                                          double temperature,
                                          struct RemaskGenerator **out);

// Loads a trained generator checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum RemaskStatus remask_generator_load(const char *path, struct RemaskGenerator **out);

// # Safety
// `generator` must come from a generator constructor and not be freed twice.
void remask_generator_free(struct RemaskGenerator *generator);

// Exact leave-one-out scorer of the world.
//
// # Safety
// `world` must be a live handle; `out` must be writable.
enum RemaskStatus remask_selector_oracle(const struct RemaskWorld *world,
                                         struct RemaskSelector **out);

// Loads a trained selector checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum RemaskStatus remask_selector_load(const char *path, struct RemaskSelector **out);

// # Safety
// `selector` must come from a selector constructor and not be freed twice.
void remask_selector_free(struct RemaskSelector *selector);

// Samples one grid into `out_cells` (`len` must equal the world's cell
// count). `selector` may be null for strategies that use no scores. The
// same `seed` and `sample_index` always give the same grid.
//
// # Safety
// Handles must be live; `params` must be readable; `out_cells` must be
// writable for `len` tokens.
enum RemaskStatus remask_generate(const struct RemaskWorld *world,
                                  const struct RemaskGenerator *generator,
                                  const struct RemaskSelector *selector,
                                  int64_t condition_id,
                                  const struct RemaskSamplingParams *params,
                                  uint64_t seed,
                                  uint64_t sample_index,
                                  uint32_t *out_cells,
                                  size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REMASK_H */
