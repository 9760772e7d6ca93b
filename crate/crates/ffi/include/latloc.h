#ifndef LATLOC_H
#define LATLOC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Status codes.
 */
typedef enum LlStatus {
  LL_STATUS_OK = 0,
  LL_STATUS_NULL_POINTER = 1,
  LL_STATUS_INVALID_INPUT = 2,
  LL_STATUS_NON_CONVERGENCE = 3,
  LL_STATUS_TOO_MANY_EMITTERS = 4,
  LL_STATUS_NO_LATTICE_CONSTANT = 5,
  LL_STATUS_OUTSIDE_ATLAS = 6,
  LL_STATUS_CONFIG = 7,
  LL_STATUS_CALIBRATION_MISSING = 8,
  LL_STATUS_IO = 9,
  LL_STATUS_BUFFER_TOO_SMALL = 10,
  LL_STATUS_OUT_OF_RANGE = 11,
  LL_STATUS_PANIC = 12,
} LlStatus;

/**
 * Sampled line spread function.
 */
typedef struct LlLsf LlLsf;

/**
 * Analysis result of one profile.
 */
typedef struct LlResult LlResult;

/**
 * Noise parameters of the compact and channel models.
 */
typedef struct LlNoise {
  double sigma_b;
  double c1;
  double c2;
  double g;
  double sigma_ro;
  double cic_rate;
  double dark_rate;
  double stray_rate;
  bool em_enabled;
} LlNoise;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ll_version(void);

/**
 * Message of the last failed call on this thread (empty after a
 * success). Valid until the next call on the same thread.
 */
const char *ll_last_error_message(void);

/**
 * Default detector noise.
 */
enum LlStatus ll_noise_default(struct LlNoise *out_noise);

/**
 * Gaussian response of rms `sigma_px` sampled `s` times per pixel over
 * `±half_width_px`.
 */
enum LlStatus ll_lsf_new_gaussian(double sigma_px,
                                  size_t s,
                                  double half_width_px,
                                  double delta_s_um,
                                  struct LlLsf **out_lsf);

/**
 * Response from `n` samples at `x0 + j/s` pixels.
 */
enum LlStatus ll_lsf_from_samples(const double *samples,
                                  size_t n,
                                  size_t s,
                                  double x0,
                                  double delta_s_um,
                                  struct LlLsf **out_lsf);

/**
 * Responses of the default optics with the reference aberrations:
 * the optical one (for simulation) and the pixel-integrated one (for
 * analysis). Either out pointer may be null.
 */
enum LlStatus ll_lsf_default_optics(struct LlLsf **out_optical, struct LlLsf **out_ccd);

enum LlStatus ll_lsf_eval(const struct LlLsf *lsf, double x, double *out_value);

void ll_lsf_free(struct LlLsf *lsf);

/**
 * `√(σ_b² + c1² S + c2² S²)`.
 */
enum LlStatus ll_sigma_model(double s, const struct LlNoise *noise, double *out_sigma);

/**
 * Single-emitter localization precision in the unit of the inputs.
 */
enum LlStatus ll_precision_bound(double rms_psf,
                                 double delta_p,
                                 double n_photons,
                                 double sigma_b,
                                 size_t n_perp,
                                 bool emccd,
                                 double *out_bound);

/**
 * Simulates one exposure of `n_atoms` emitters through the optical
 * response `lsf` with the default optics and writes the transversely
 * integrated profile (`n_cols` values) to `out_values`.
 */
enum LlStatus ll_simulate_profile(const struct LlLsf *lsf,
                                  const double *positions,
                                  const double *amplitudes,
                                  size_t n_atoms,
                                  const struct LlNoise *noise,
                                  size_t n_cols,
                                  size_t n_rows,
                                  uint64_t seed,
                                  double *out_values,
                                  size_t capacity);

/**
 * Analyzes a background-containing profile of `n` values summed over
 * `n_perp` rows. `lsf` is the pixel-integrated response; every region is
 * assumed to hold `atoms_per_roi` emitters.
 */
enum LlStatus ll_analyze_profile(const double *values,
                                 size_t n,
                                 size_t n_perp,
                                 const struct LlLsf *lsf,
                                 const struct LlNoise *noise,
                                 double a_px,
                                 double delta_l,
                                 size_t atoms_per_roi,
                                 struct LlResult **out_result);

enum LlStatus ll_result_roi_count(const struct LlResult *res, size_t *out_count);

/**
 * Positions (pixels) of region `roi`, from the discrete fit when
 * `discrete` is set and the continuous one otherwise. `out_len` receives
 * the number of emitters even when the buffer is too small.
 */
enum LlStatus ll_result_positions(const struct LlResult *res,
                                  size_t roi,
                                  bool discrete,
                                  double *out_positions,
                                  size_t capacity,
                                  size_t *out_len);

/**
 * Lattice sites of region `roi` from the discrete fit.
 */
enum LlStatus ll_result_sites(const struct LlResult *res,
                              size_t roi,
                              int64_t *out_sites,
                              size_t capacity,
                              size_t *out_len);

/**
 * JSON record of the result; release with [`ll_string_free`].
 */
enum LlStatus ll_result_to_json(const struct LlResult *res, char **out_json);

void ll_result_free(struct LlResult *res);

void ll_string_free(char *s);

/**
 * Length of a NUL-terminated string returned by the library, or zero for
 * null.
 */
size_t ll_string_len(const char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LATLOC_H */
