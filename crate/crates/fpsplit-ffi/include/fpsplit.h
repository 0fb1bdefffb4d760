#ifndef FPSPLIT_H
#define FPSPLIT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of a call.
 */
typedef enum FpsplitStatus {
  FPSPLIT_STATUS_OK = 0,
  FPSPLIT_STATUS_NULL_POINTER = 1,
  FPSPLIT_STATUS_INVALID_UTF8 = 2,
  FPSPLIT_STATUS_CONFIG = 3,
  FPSPLIT_STATUS_SIZE = 4,
  FPSPLIT_STATUS_SOLVER = 5,
  FPSPLIT_STATUS_ORACLE = 6,
  FPSPLIT_STATUS_IO = 7,
  FPSPLIT_STATUS_OUT_OF_RANGE = 8,
  FPSPLIT_STATUS_BUFFER_TOO_SMALL = 9,
  FPSPLIT_STATUS_PANIC = 10,
} FpsplitStatus;

/**
 * Parsed run configuration.
 */
typedef struct FpsplitConfig FpsplitConfig;

/**
 * Densities and report of a completed run.
 */
typedef struct FpsplitTrajectory FpsplitTrajectory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *fpsplit_version(void);

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *fpsplit_last_error(void);

/**
 * Reads and validates a TOML config file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum FpsplitStatus fpsplit_config_load(const char *path, struct FpsplitConfig **out);

/**
 * Parses config text; `origin` names it in messages and anchors relative paths (may be null).
 *
 * # Safety
 * `toml` and a non-null `origin` must be NUL-terminated strings; `out` must be writable.
 */
enum FpsplitStatus fpsplit_config_parse(const char *toml,
                                        const char *origin,
                                        struct FpsplitConfig **out);

/**
 * # Safety
 * `cfg` must come from this library and not be used afterwards; null is ignored.
 */
void fpsplit_config_free(struct FpsplitConfig *cfg);

/**
 * Overrides the window count `N`.
 *
 * # Safety
 * `cfg` must be a live config handle.
 */
enum FpsplitStatus fpsplit_config_set_windows(struct FpsplitConfig *cfg, size_t windows);

/**
 * Overrides the horizon `T`.
 *
 * # Safety
 * `cfg` must be a live config handle.
 */
enum FpsplitStatus fpsplit_config_set_t_final(struct FpsplitConfig *cfg, double t_final);

/**
 * Space dimension, or 0 for a null handle.
 *
 * # Safety
 * `cfg` must be null or a live config handle.
 */
size_t fpsplit_config_dim(const struct FpsplitConfig *cfg);

/**
 * Number of grid cells, or 0 for a null handle.
 *
 * # Safety
 * `cfg` must be null or a live config handle.
 */
size_t fpsplit_config_cells(const struct FpsplitConfig *cfg);

/**
 * Runs the model and scaling checks; the failed checks are named in the last error.
 *
 * # Safety
 * `cfg` must be a live config handle.
 */
enum FpsplitStatus fpsplit_validate(const struct FpsplitConfig *cfg);

/**
 * Solves all windows in memory; nothing is written to disk.
 *
 * # Safety
 * `cfg` must be a live config handle and `out` writable.
 */
enum FpsplitStatus fpsplit_run(const struct FpsplitConfig *cfg, struct FpsplitTrajectory **out);

/**
 * # Safety
 * `traj` must come from this library and not be used afterwards; null is ignored.
 */
void fpsplit_trajectory_free(struct FpsplitTrajectory *traj);

/**
 * Completed windows `N`; densities are indexed `0..=N`. 0 for a null handle.
 *
 * # Safety
 * `traj` must be null or a live trajectory handle.
 */
size_t fpsplit_trajectory_windows(const struct FpsplitTrajectory *traj);

/**
 * Window length `h`, or NaN for a null handle.
 *
 * # Safety
 * `traj` must be null or a live trajectory handle.
 */
double fpsplit_trajectory_h(const struct FpsplitTrajectory *traj);

/**
 * Entropic parameter `ε`, or NaN for a null handle.
 *
 * # Safety
 * `traj` must be null or a live trajectory handle.
 */
double fpsplit_trajectory_epsilon(const struct FpsplitTrajectory *traj);

/**
 * Copies `ρⁿ` (row-major, last axis fastest) into `out`, which holds `len` doubles.
 *
 * # Safety
 * `traj` must be a live handle and `out` valid for `len` writes.
 */
enum FpsplitStatus fpsplit_trajectory_density(const struct FpsplitTrajectory *traj,
                                              size_t n,
                                              double *out,
                                              size_t len);

/**
 * Mean (`d` values) and row-major covariance (`d²` values) of `ρⁿ`.
 *
 * # Safety
 * `traj` must be a live handle, `mean` valid for `d` and `cov` for `d²` writes.
 */
enum FpsplitStatus fpsplit_trajectory_moments(const struct FpsplitTrajectory *traj,
                                              size_t n,
                                              double *mean,
                                              double *cov);

/**
 * Writes the per-window report as NUL-terminated CSV. `needed` (may be null)
 * receives the size including the terminator, also when `cap` is too small.
 *
 * # Safety
 * `traj` must be a live handle and `buf` valid for `cap` writes (or null with `cap == 0`).
 */
enum FpsplitStatus fpsplit_trajectory_report_csv(const struct FpsplitTrajectory *traj,
                                                 char *buf,
                                                 size_t cap,
                                                 size_t *needed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FPSPLIT_H */
