/* sonotrack C API — generated by cbindgen, do not edit. */

#ifndef SONOTRACK_H
#define SONOTRACK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Translation solver selector.
 */
typedef enum {
  /**
   * Coarse-to-fine regular-step gradient descent.
   */
  ST_SOLVER_GRADIENT_DESCENT = 0,
  /**
   * Levenberg-Marquardt.
   */
  ST_SOLVER_LEVENBERG_MARQUARDT = 1,
} StSolver;

/**
 * Result codes of the C API.
 */
typedef enum {
  ST_STATUS_OK = 0,
  /**
   * A required pointer argument was NULL.
   */
  ST_STATUS_NULL_ARGUMENT = 1,
  /**
   * Malformed argument (bad UTF-8, bad enum value, bad dimensions).
   */
  ST_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Configuration rejected.
   */
  ST_STATUS_CONFIG_ERROR = 3,
  /**
   * File system failure.
   */
  ST_STATUS_IO_ERROR = 4,
  /**
   * Numerical failure (degenerate input, no overlap, empty volume).
   */
  ST_STATUS_NUMERICAL_ERROR = 5,
  /**
   * Input artifacts from different configurations.
   */
  ST_STATUS_HASH_MISMATCH = 6,
} StStatus;

/**
 * Opaque experiment configuration.
 */
typedef struct StConfig StConfig;

/**
 * Opaque 3D scalar volume.
 */
typedef struct StVolume StVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message of the current thread; valid until the next failing
 * call on this thread. Never NULL.
 */
const char *st_last_error(void);

/**
 * Library version as a static string.
 */
const char *st_version(void);

/**
 * Create a default configuration with the given seed. Free with
 * [`st_config_free`].
 */
StConfig *st_config_default(uint64_t seed);

/**
 * Parse a configuration file. Returns NULL on failure (see
 * [`st_last_error`]).
 *
 * # Safety
 * `path` must be a valid NUL-terminated string.
 */
StConfig *st_config_load(const char *path);

/**
 * Write the 16-hex-digit configuration hash into `out` (at least 17 bytes).
 *
 * # Safety
 * `config` must come from this API and `out` must hold 17 writable bytes.
 */
StStatus st_config_hash(const StConfig *config, char *out);

/**
 * Release a configuration handle; NULL is a no-op.
 *
 * # Safety
 * `config` must have been returned by this API and not yet freed.
 */
void st_config_free(StConfig *config);

/**
 * Run the closed-loop acquisition and write the record into `out_dir`.
 *
 * # Safety
 * `config` must be a live handle; `out_dir` a valid string.
 */
StStatus st_simulate(const StConfig *config, const char *out_dir);

/**
 * Run the offline super-resolution pipeline on a record directory.
 *
 * # Safety
 * Both paths must be valid strings.
 */
StStatus st_ulm(const char *record_dir, const char *out_dir);

/**
 * Generate the evaluation report. `ulm_dir` and `compare_dir` may be NULL.
 *
 * # Safety
 * Non-NULL paths must be valid strings.
 */
StStatus st_report(const char *record_dir,
                   const char *ulm_dir,
                   const char *compare_dir,
                   const char *out_dir);

/**
 * Load a volume from `<stem>.raw` / `<stem>.hdr`. Returns NULL on failure.
 *
 * # Safety
 * `path_stem` must be a valid string.
 */
StVolume *st_volume_load(const char *path_stem);

/**
 * Wrap a caller-provided buffer (copied) as a volume. `data` holds
 * `dims[0]*dims[1]*dims[2]` f32 samples, x fastest.
 *
 * # Safety
 * `data`, `dims`, `spacing_mm`, `origin_mm` must point to valid memory of
 * the documented lengths.
 */
StVolume *st_volume_from_data(const float *data,
                              const uintptr_t *dims,
                              const double *spacing_mm,
                              const double *origin_mm);

/**
 * Volume dimensions (3 values written to `out`).
 *
 * # Safety
 * `volume` must be live; `out` must hold three usize slots.
 */
StStatus st_volume_dims(const StVolume *volume, uintptr_t *out);

/**
 * Borrow the sample buffer (x fastest); valid while the handle lives.
 *
 * # Safety
 * `volume` must be live.
 */
const float *st_volume_data(const StVolume *volume);

/**
 * Save a volume to `<stem>.raw` / `<stem>.hdr` with the given hash tag.
 *
 * # Safety
 * `volume` must be live; both strings valid.
 */
StStatus st_volume_save(const StVolume *volume, const char *path_stem, const char *config_hash);

/**
 * Release a volume handle; NULL is a no-op.
 *
 * # Safety
 * `volume` must have been returned by this API and not yet freed.
 */
void st_volume_free(StVolume *volume);

/**
 * Register `moving` against `reference`: writes the translation (mm) that
 * maps reference voxels onto the moving volume into `out_translation[3]`
 * and the iteration count into `out_iterations` (may be NULL).
 *
 * # Safety
 * Both volumes must be live handles; `out_translation` must hold three
 * doubles.
 */
StStatus st_register_translation(const StVolume *reference,
                                 const StVolume *moving,
                                 StSolver solver,
                                 double *out_translation,
                                 uintptr_t *out_iterations);

/**
 * Built-in invariant checks; returns the number of failures.
 */
uintptr_t st_selftest(void);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SONOTRACK_H */
