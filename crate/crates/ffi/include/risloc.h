/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef RISLOC_H
#define RISLOC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Zero is success.
typedef enum RislocStatus {
  RISLOC_STATUS_OK = 0,
  RISLOC_STATUS_NULL_POINTER = 1,
  RISLOC_STATUS_INVALID_ARGUMENT = 2,
  RISLOC_STATUS_DEGENERATE_GEOMETRY = 3,
  RISLOC_STATUS_SINGULAR = 4,
  RISLOC_STATUS_SOLVER_FAILED = 5,
  RISLOC_STATUS_SIGNAL_ABSENT = 6,
  RISLOC_STATUS_IO = 7,
  RISLOC_STATUS_PARSE = 8,
  RISLOC_STATUS_BUFFER_TOO_SMALL = 9,
  RISLOC_STATUS_PANIC = 10,
  // Scenario or input file rejected as a configuration.
  RISLOC_STATUS_INVALID_CONFIG = 11,
} RislocStatus;

// Opaque phase-shift handle.
typedef struct RislocPhases RislocPhases;

// Opaque scenario handle.
typedef struct RislocScenario RislocScenario;

// Outcome of one estimation run.
typedef struct RislocEstimate {
  double x;
  double y;
  double z;
  double phi;
  double objective;
  size_t outer_iters;
  size_t inner_iters;
  // 1 if the outer loop met its tolerance.
  int32_t converged;
} RislocEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or NULL. The pointer stays
// valid until the next failing call on the same thread.
const char *risloc_last_error(void);

void risloc_clear_error(void);

// Library version as a static NUL-terminated string.
const char *risloc_version(void);

// Reference scenario with `n_ris` elements (a perfect square).
//
// # Safety
// `out` must be NULL or writable.
enum RislocStatus risloc_scenario_reference(size_t n_ris, struct RislocScenario **out);

// Scenario from TOML text.
//
// # Safety
// `toml` must be NULL or a NUL-terminated string.
enum RislocStatus risloc_scenario_from_toml(const char *toml, struct RislocScenario **out);

// # Safety
// `scenario` must be NULL or a live handle.
enum RislocStatus risloc_scenario_set_tx_power_dbm(struct RislocScenario *scenario, double dbm);

// # Safety
// `scenario` must be NULL or a live handle.
size_t risloc_scenario_n_ris(const struct RislocScenario *scenario);

// # Safety
// `scenario` must be NULL or a handle not yet freed.
void risloc_scenario_free(struct RislocScenario *scenario);

// I.i.d. uniform phases.
//
// # Safety
// `out` must be NULL or writable.
enum RislocStatus risloc_phases_random(size_t n_ris, uint64_t seed, struct RislocPhases **out);

// Phase shifts from `len` angles in radians.
//
// # Safety
// `phases` must point to `len` doubles.
enum RislocStatus risloc_phases_from_angles(const double *phases,
                                            size_t len,
                                            struct RislocPhases **out);

// Designs phase shifts for the scenario's AOI from `samples` random AOI
// points. Can take tens of seconds for large surfaces.
//
// # Safety
// `scenario` must be NULL or a live handle.
enum RislocStatus risloc_phases_optimize(const struct RislocScenario *scenario,
                                         size_t samples,
                                         uint64_t seed,
                                         struct RislocPhases **out);

// # Safety
// `phases` must be NULL or a live handle.
size_t risloc_phases_len(const struct RislocPhases *phases);

// Copies the angles in radians into `out[0..len)`.
//
// # Safety
// `phases` must be a live handle and `out` must hold `len` doubles.
enum RislocStatus risloc_phases_angles(const struct RislocPhases *phases, double *out, size_t len);

// # Safety
// `phases` must be NULL or a handle not yet freed.
void risloc_phases_free(struct RislocPhases *phases);

// Position error bound (m) and CFO/PN bound (rad^2) at a UE position.
// Either output may be NULL.
//
// # Safety
// Handles must be live; outputs NULL or writable.
enum RislocStatus risloc_peb(const struct RislocScenario *scenario,
                             const struct RislocPhases *phases,
                             double x,
                             double y,
                             double z,
                             double *peb,
                             double *cfo_pn_bound);

// Number of pilot subcarriers, i.e. the length of a received vector.
//
// # Safety
// `scenario` must be NULL or a live handle.
size_t risloc_scenario_subcarriers(const struct RislocScenario *scenario);

// Synthesizes a received vector at a UE position with CFO `phi`, a phase
// noise path and receiver noise drawn from `seed`. Writes `len` real and
// imaginary parts.
//
// # Safety
// Handles must be live; `re` and `im` must hold `len` doubles.
enum RislocStatus risloc_synthesize(const struct RislocScenario *scenario,
                                    const struct RislocPhases *phases,
                                    double x,
                                    double y,
                                    double z,
                                    double phi,
                                    uint64_t seed,
                                    double *re,
                                    double *im,
                                    size_t len);

// Joint CFO, phase-noise and position estimation from a received vector,
// starting at the AOI center with default settings.
//
// # Safety
// Handles must be live; `re` and `im` must hold `len` doubles; `out`
// must be writable.
enum RislocStatus risloc_estimate(const struct RislocScenario *scenario,
                                  const struct RislocPhases *phases,
                                  const double *re,
                                  const double *im,
                                  size_t len,
                                  struct RislocEstimate *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RISLOC_H */
