#ifndef DIRACWAVE_H
#define DIRACWAVE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DwStatus {
  DW_STATUS_OK = 0,
  DW_STATUS_NULL_POINTER = 1,
  DW_STATUS_INVALID_ARGUMENT = 2,
  DW_STATUS_BAND_EDGE = 3,
  DW_STATUS_ILL_CONDITIONED = 4,
  DW_STATUS_MISMATCH = 5,
  DW_STATUS_MISSING_SAMPLES = 6,
  DW_STATUS_IO = 7,
  DW_STATUS_CONFIG = 8,
  DW_STATUS_ITERATE = 9,
  DW_STATUS_PANIC = 98,
  DW_STATUS_OTHER = 99,
} DwStatus;

/**
 * y-dependence of the potential coefficients.
 */
typedef enum DwProfile {
  DW_PROFILE_HERMITE = 0,
  DW_PROFILE_SCALED = 1,
  DW_PROFILE_CONSTANT = 2,
} DwProfile;

/**
 * Opaque experiment configuration.
 */
typedef struct DwConfig DwConfig;

/**
 * Opaque potential.
 */
typedef struct DwPotential DwPotential;

/**
 * Opaque TR matrix at one energy.
 */
typedef struct DwTr DwTr;

/**
 * Summary of a reconstruction run.
 */
typedef struct DwRunSummary {
  size_t iterations;
  double objective;
  double misfit;
  /**
   * NaN when the run has no reference.
   */
  double err;
  /**
   * NaN when undefined for the reference.
   */
  double err_avg;
} DwRunSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *dw_version(void);

/**
 * Copy the last error message of this thread into `buf`.
 *
 * Returns the full message length excluding the NUL; the copy is truncated
 * to `len - 1` bytes.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes of writes.
 */
size_t dw_last_error(char *buf, size_t len);

/**
 * Zero potential with `(n_x + 1)(n_y + 1)` coefficients per Pauli channel.
 *
 * # Safety
 * `out` must be valid for a pointer write. The handle must be released
 * with [`dw_potential_free`].
 */
enum DwStatus dw_potential_new(double x_left,
                               double x_right,
                               size_t n_x,
                               size_t n_y,
                               enum DwProfile profile,
                               struct DwPotential **out_pot);

/**
 * # Safety
 * `pot` must be null or a handle from this library not yet freed.
 */
void dw_potential_free(struct DwPotential *pot);

/**
 * # Safety
 * `pot` must be a live handle.
 */
size_t dw_potential_len(const struct DwPotential *pot);

/**
 * Set the coefficient of x-function `j`, y-function `k`, Pauli channel `c`.
 *
 * # Safety
 * `pot` must be a live handle not used concurrently.
 */
enum DwStatus dw_potential_set(struct DwPotential *pot, size_t j, size_t k, size_t c, double v);

/**
 * # Safety
 * `pot` must be a live handle; `value` must be valid for a write.
 */
enum DwStatus dw_potential_get(const struct DwPotential *pot,
                               size_t j,
                               size_t k,
                               size_t c,
                               double *value);

/**
 * Evaluate the four Pauli channels at `(x, y)` into `values[0..4]`.
 *
 * # Safety
 * `pot` must be a live handle; `values` must be valid for 4 writes.
 */
enum DwStatus dw_potential_eval(const struct DwPotential *pot, double x, double y, double *values);

/**
 * TR matrix of the potential's support at `energy`, keeping levels up to
 * `n_y`. `order = 0` picks the Legendre order automatically.
 *
 * # Safety
 * `pot` must be a live handle; `out_tr` must be valid for a pointer write.
 * Release the result with [`dw_tr_free`].
 */
enum DwStatus dw_slab_tr(const struct DwPotential *pot,
                         double energy,
                         size_t n_y,
                         size_t order,
                         struct DwTr **out_tr);

/**
 * # Safety
 * `tr` must be null or a handle from this library not yet freed.
 */
void dw_tr_free(struct DwTr *tr);

/**
 * Side length of the TR matrix, `2 n_y + 1`.
 *
 * # Safety
 * `tr` must be a live handle or null.
 */
size_t dw_tr_dim(const struct DwTr *tr);

/**
 * Entry `(row, col)`. Rows and columns follow the mode order
 * `(0,-)..(n_y,-)` then `(1,+)..(n_y,+)`.
 *
 * # Safety
 * `tr` must be a live handle; `re` and `im` must be valid for writes.
 */
enum DwStatus dw_tr_get(const struct DwTr *tr, size_t row, size_t col, double *re, double *im);

/**
 * Frobenius norm of `S^H S - I` on the propagating block.
 *
 * # Safety
 * `tr` must be a live handle; `defect` must be valid for a write.
 */
enum DwStatus dw_tr_unitarity_defect(const struct DwTr *tr, double *defect);

/**
 * Named preset, e.g. `"exp2-small"`.
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out_cfg` valid for a write.
 * Release with [`dw_config_free`].
 */
enum DwStatus dw_config_from_preset(const char *name, struct DwConfig **out_cfg);

/**
 * Configuration parsed from TOML text.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out_cfg` valid for a write.
 */
enum DwStatus dw_config_from_toml(const char *text, struct DwConfig **out_cfg);

/**
 * # Safety
 * `cfg` must be null or a handle from this library not yet freed.
 */
void dw_config_free(struct DwConfig *cfg);

/**
 * Override the iteration budget.
 *
 * # Safety
 * `cfg` must be a live handle not used concurrently.
 */
enum DwStatus dw_config_set_iterations(struct DwConfig *cfg, size_t iters);

/**
 * Reference potential of the configuration.
 *
 * # Safety
 * `cfg` must be a live handle; `out_pot` valid for a write.
 */
enum DwStatus dw_config_reference(const struct DwConfig *cfg, struct DwPotential **out_pot);

/**
 * Run the reconstruction. `out_dir` may be null to skip writing artifacts.
 * `out_pot` may be null; otherwise it receives the final iterate.
 *
 * # Safety
 * `cfg` must be a live handle, `out_dir` null or NUL-terminated, `summary`
 * valid for a write, `out_pot` null or valid for a pointer write.
 */
enum DwStatus dw_reconstruct(const struct DwConfig *cfg,
                             const char *out_dir,
                             struct DwRunSummary *summary,
                             struct DwPotential **out_pot);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIRACWAVE_H */
