#ifndef PROSODY_LAB_H
#define PROSODY_LAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every call.
typedef enum PlStatus {
  PL_OK = 0,
  PL_ERR_NULL = 1,
  PL_ERR_INVALID_ARGUMENT = 2,
  PL_ERR_UTF8 = 3,
  PL_ERR_IO = 4,
  PL_ERR_CHECKPOINT = 5,
  PL_ERR_UNKNOWN_SYSTEM = 6,
  PL_ERR_BUFFER_TOO_SMALL = 7,
  PL_ERR_PANIC = 8,
} PlStatus;

// Environment preset for `pl_scenario_new`.
typedef enum PlEnvPreset {
  PL_ENV_STANDARD = 0,
  PL_ENV_HACKABLE = 1,
} PlEnvPreset;

// Policy checkpoint.
typedef struct PlPolicy PlPolicy;

// ELO rating table.
typedef struct PlRatingTable PlRatingTable;

// Built environment: vocabulary, prompt pools and base checkpoint.
typedef struct PlScenario PlScenario;

// Held-out evaluation statistics.
typedef struct PlEvalSummary {
  size_t n;
  double mean_cer;
  double std_logf0;
  double nonterm_rate;
  double mean_len;
  double mean_sim;
} PlEvalSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf`.
//
// # Safety
// `buf` must be writable for `cap` bytes or null; `needed` may be null.
enum PlStatus pl_last_error(char *buf, size_t cap, size_t *needed);

// Library version as a static NUL-terminated string.
const char *pl_version(void);

// Character error rate of `hypothesis` against `reference`.
//
// # Safety
// Both strings must be valid NUL-terminated; `out` must be writable.
enum PlStatus pl_cer(const char *reference, const char *hypothesis, double *out);

// Harmonic-mean reward of one candidate's metrics.
//
// With `has_sim` false the two-term reward is used and `sim`, `lambda_s`
// are ignored.
//
// # Safety
// `out` must be writable.
enum PlStatus pl_reward(double cer,
                        double nll,
                        double sim,
                        bool has_sim,
                        double lambda_c,
                        double lambda_ell,
                        double lambda_s,
                        double tau_c,
                        double tau_ell,
                        double sim_floor,
                        double *out);

// Builds an environment preset with its base checkpoint.
//
// # Safety
// `out` must be writable; free the result with `pl_scenario_free`.
enum PlStatus pl_scenario_new(enum PlEnvPreset preset, struct PlScenario **out);

// # Safety
// `s` must come from `pl_scenario_new` and not be used afterwards; null is ignored.
void pl_scenario_free(struct PlScenario *s);

// Number of training and held-out prompts.
//
// # Safety
// `s` must be a live scenario; out-pointers must be writable.
enum PlStatus pl_scenario_sizes(const struct PlScenario *s, size_t *n_train, size_t *n_heldout);

// A copy of the scenario's base checkpoint.
//
// # Safety
// `s` must be a live scenario; free the result with `pl_policy_free`.
enum PlStatus pl_scenario_base_policy(const struct PlScenario *s, struct PlPolicy **out);

// Reads a checkpoint file.
//
// # Safety
// `path` must be a valid string; free the result with `pl_policy_free`.
enum PlStatus pl_policy_load(const char *path, struct PlPolicy **out);

// Writes a checkpoint file.
//
// # Safety
// `p` must be a live policy and `path` a valid string.
enum PlStatus pl_policy_save(const struct PlPolicy *p, const char *path);

// # Safety
// `p` must come from a `pl_policy_*` constructor and not be used afterwards; null is ignored.
void pl_policy_free(struct PlPolicy *p);

// Hex sha256 of the checkpoint encoding (64 characters plus NUL).
//
// # Safety
// `p` must be a live policy; `buf` writable for `cap` bytes.
enum PlStatus pl_policy_hash(const struct PlPolicy *p, char *buf, size_t cap, size_t *needed);

// Version string stored in the checkpoint.
//
// # Safety
// `p` must be a live policy; `buf` writable for `cap` bytes.
enum PlStatus pl_policy_version(const struct PlPolicy *p, char *buf, size_t cap, size_t *needed);

// Samples `samples_per_prompt` candidates per held-out prompt and
// summarizes them.
//
// # Safety
// Handles must be live; `out` writable.
enum PlStatus pl_policy_evaluate(const struct PlPolicy *p,
                                 const struct PlScenario *s,
                                 size_t samples_per_prompt,
                                 double temperature,
                                 uint64_t seed,
                                 struct PlEvalSummary *out);

// Empty rating table.
//
// # Safety
// `out` must be writable; free the result with `pl_elo_free`.
enum PlStatus pl_elo_new(double k_factor, double initial_rating, struct PlRatingTable **out);

// # Safety
// `t` must come from `pl_elo_new` and not be used afterwards; null is ignored.
void pl_elo_free(struct PlRatingTable *t);

// Adds a system at the initial rating; registering twice is a no-op.
//
// # Safety
// `t` must be a live table and `system` a valid string.
enum PlStatus pl_elo_register(struct PlRatingTable *t, const char *system);

// Applies one vote; `delta` (nullable) receives the points transferred.
//
// # Safety
// `t` must be a live table and the strings valid.
enum PlStatus pl_elo_vote(struct PlRatingTable *t,
                          const char *system_a,
                          const char *system_b,
                          bool a_wins,
                          double *delta);

// Current rating of `system`.
//
// # Safety
// `t` must be a live table, `system` valid, `out` writable.
enum PlStatus pl_elo_rating(const struct PlRatingTable *t, const char *system, double *out);

// Leaderboard as `system,rating,n_votes` CSV.
//
// # Safety
// `t` must be a live table; `buf` writable for `cap` bytes.
enum PlStatus pl_elo_leaderboard_csv(const struct PlRatingTable *t,
                                     char *buf,
                                     size_t cap,
                                     size_t *needed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROSODY_LAB_H */
