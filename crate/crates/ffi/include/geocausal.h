#ifndef GEOCAUSAL_H
#define GEOCAUSAL_H

/* Generated by cbindgen from the geocausal-ffi crate. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Nonzero values mirror the command-line exit codes.
typedef enum GcStatus {
  GC_STATUS_OK = 0,
  // Null pointer, bad UTF-8 or a buffer of the wrong size.
  GC_STATUS_INVALID_ARGUMENT = 1,
  // Input or configuration failed validation.
  GC_STATUS_VALIDATION = 2,
  // Numerical failure during fitting or evaluation.
  GC_STATUS_NUMERIC = 3,
  GC_STATUS_IO = 4,
  // A Rust panic was caught at the boundary.
  GC_STATUS_PANIC = 5,
} GcStatus;

// Opaque grid handle.
typedef struct GcGrid GcGrid;

// Opaque fitted-model handle.
typedef struct GcModel GcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread, or null. The pointer
// stays valid until the next call into this library on the same thread.
const char *gc_last_error(void);

// Library version as a static NUL-terminated string.
const char *gc_version(void);

// Loads a grid CSV with the default column names.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum GcStatus gc_grid_load(const char *path, struct GcGrid **out);

// Generates a synthetic grid from the `[synth]` table of a TOML run
// configuration (null for defaults).
//
// # Safety
// `config_toml` must be null or NUL-terminated; `out` must be valid.
enum GcStatus gc_grid_synth(const char *config_toml, struct GcGrid **out);

// Number of locations, or 0 for a null handle.
//
// # Safety
// `grid` must be null or a live handle.
uintptr_t gc_grid_len(const struct GcGrid *grid);

// # Safety
// `grid` must be null or a handle not yet freed.
void gc_grid_free(struct GcGrid *grid);

// Fits a model using the `[fit]` table of a TOML run configuration (null
// for defaults).
//
// # Safety
// `grid` must be a live handle, `config_toml` null or NUL-terminated and
// `out` valid.
enum GcStatus gc_fit(const struct GcGrid *grid, const char *config_toml, struct GcModel **out);

// Completed training iterations, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uint64_t gc_model_iterations(const struct GcModel *model);

// # Safety
// `model` must be a live handle and `path` NUL-terminated.
enum GcStatus gc_model_save(const struct GcModel *model, const char *path);

// # Safety
// `path` must be NUL-terminated and `out` valid.
enum GcStatus gc_model_load(const char *path, struct GcModel **out);

// # Safety
// `model` must be null or a handle not yet freed.
void gc_model_free(struct GcModel *model);

// Writes posterior probabilities row-major as `(q_ls, q_lf, q_bd)` per
// location into `q_out`, which must hold exactly `3 * gc_grid_len(grid)`
// values.
//
// # Safety
// Handles must be live and `q_out` must point to `q_len` writable doubles.
enum GcStatus gc_predict(const struct GcModel *model,
                         const struct GcGrid *grid,
                         uintptr_t mc_samples,
                         uint64_t seed,
                         double *q_out,
                         uintptr_t q_len);

// Area under the ROC curve; `labels` holds 0 or nonzero bytes.
//
// # Safety
// `scores` and `labels` must each point to `n` readable elements and
// `out` must be valid.
enum GcStatus gc_roc_auc(const double *scores, const uint8_t *labels, uintptr_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GEOCAUSAL_H */
