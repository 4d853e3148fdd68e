#ifndef ASYNDIFF_H
#define ASYNDIFF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AsynStatus {
  ASYN_STATUS_OK = 0,
  ASYN_STATUS_NULL_POINTER = 1,
  ASYN_STATUS_INVALID_ARGUMENT = 2,
  ASYN_STATUS_DOMAIN = 3,
  ASYN_STATUS_OUT_OF_RANGE = 4,
  ASYN_STATUS_DEGENERATE = 5,
  ASYN_STATUS_SHAPE_MISMATCH = 6,
  ASYN_STATUS_NUMERICAL = 7,
  ASYN_STATUS_IO = 8,
  ASYN_STATUS_PANIC = 9,
} AsynStatus;

typedef enum AsynCurve {
  ASYN_CURVE_LINEAR = 0,
  ASYN_CURVE_QUADRATIC = 1,
  ASYN_CURVE_PIECEWISE_LINEAR = 2,
  ASYN_CURVE_EXPONENTIAL = 3,
  ASYN_CURVE_EXTREME_CLAMP = 4,
} AsynCurve;

typedef enum AsynTimestepMode {
  ASYN_TIMESTEP_MODE_CONTINUOUS = 0,
  ASYN_TIMESTEP_MODE_ROUNDED = 1,
} AsynTimestepMode;

typedef enum AsynGaussianKind {
  ASYN_GAUSSIAN_KIND_ISOTROPIC = 0,
  ASYN_GAUSSIAN_KIND_SMOOTH = 1,
} AsynGaussianKind;

/**
 * Oracle-driven sampler over a Gaussian target.
 */
typedef struct AsynGaussianSampler AsynGaussianSampler;

/**
 * Scheduler family `f` (optionally reweighted toward the linear schedule).
 */
typedef struct AsynSchedule AsynSchedule;

/**
 * Parameters of [`asyn_gaussian_sampler_new`].
 */
typedef struct AsynGaussianSamplerConfig {
  /**
   * Target grid is `side x side`, one channel.
   */
  size_t side;
  enum AsynGaussianKind kind;
  double variance;
  /**
   * Squared-exponential length scale (smooth targets only).
   */
  double length_scale;
  uint64_t data_seed;
  enum AsynCurve curve;
  double omega;
  size_t steps;
  /**
   * DDIM noise weight.
   */
  double eta;
  /**
   * Per-step probability that a pixel is masked.
   */
  double mask_density;
  uint64_t seed;
} AsynGaussianSamplerConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static nul-terminated string.
 */
const char *asyn_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always nul-terminated when `len > 0`). Returns the full message length,
 * or 0 when there is no error.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t asyn_last_error_message(char *buf, size_t len);

/**
 * Creates a scheduler; `omega = 1` gives the plain curve.
 *
 * # Safety
 * `out` must be a valid pointer; the handle is freed with [`asyn_schedule_free`].
 */
enum AsynStatus asyn_schedule_new(enum AsynCurve curve,
                                  double omega,
                                  double horizon,
                                  struct AsynSchedule **out);

/**
 * # Safety
 * `schedule` must be null or a handle from [`asyn_schedule_new`], freed once.
 */
void asyn_schedule_free(struct AsynSchedule *schedule);

/**
 * `f(i)` for `i` in `[0, T]`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum AsynStatus asyn_schedule_eval(const struct AsynSchedule *schedule, double i, double *out);

/**
 * Shift `(a, b)` with `f(i0 - a) + b = t0` and `f(T - a) + b = 0`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum AsynStatus asyn_solve_shift(const struct AsynSchedule *schedule,
                                 double i0,
                                 double t0,
                                 double *out_a,
                                 double *out_b);

/**
 * Next timestep of a masked pixel at `(i, t)`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum AsynStatus asyn_advance_concave(const struct AsynSchedule *schedule,
                                     double i,
                                     double t,
                                     double *out);

/**
 * Next timestep of an unmasked pixel at `(i, t)`.
 *
 * # Safety
 * `out` must be valid.
 */
enum AsynStatus asyn_advance_linear(double horizon, double i, double t, double *out);

/**
 * Largest `f(i) - (T - i)` over the schedule.
 *
 * # Safety
 * Pointers must be valid.
 */
enum AsynStatus asyn_max_timestep_gap(const struct AsynSchedule *schedule, double *out);

/**
 * Advances a row-major `height x width` timestep field at step `step_index`.
 * `mask` holds one byte per pixel (non-zero = masked); `out` receives
 * `height * width` timesteps and may alias neither input.
 *
 * # Safety
 * Arrays must hold `height * width` elements.
 */
enum AsynStatus asyn_transition_field(const struct AsynSchedule *schedule,
                                      size_t height,
                                      size_t width,
                                      size_t step_index,
                                      const double *timesteps,
                                      const uint8_t *mask,
                                      enum AsynTimestepMode mode,
                                      double *out);

/**
 * Mask from one attention map laid out token-major
 * (`n_tokens x height x width`), OR-ing the above-mean pixels of the
 * selected tokens and upsampling to `target_height x target_width`.
 *
 * # Safety
 * `attention` must hold `n_tokens * height * width` values, `tokens`
 * `n_selected` indices and `out` `target_height * target_width` bytes.
 */
enum AsynStatus asyn_extract_mask(size_t n_tokens,
                                  size_t height,
                                  size_t width,
                                  const double *attention,
                                  const size_t *tokens,
                                  size_t n_selected,
                                  size_t target_height,
                                  size_t target_width,
                                  uint8_t *out);

/**
 * Builds a DDIM sampler driven by the exact Gaussian denoiser, with random
 * per-step masks.
 *
 * # Safety
 * Pointers must be valid; free the handle with [`asyn_gaussian_sampler_free`].
 */
enum AsynStatus asyn_gaussian_sampler_new(const struct AsynGaussianSamplerConfig *config,
                                          struct AsynGaussianSampler **out);

/**
 * # Safety
 * `sampler` must be null or a handle from [`asyn_gaussian_sampler_new`], freed once.
 */
void asyn_gaussian_sampler_free(struct AsynGaussianSampler *sampler);

/**
 * Draws one `side * side` sample from random stream `stream`; `synchronous`
 * runs the scalar-timestep sampler instead.
 *
 * # Safety
 * `out` must hold `out_len` values and `out_len` must equal `side * side`.
 */
enum AsynStatus asyn_gaussian_sampler_sample(const struct AsynGaussianSampler *sampler,
                                             uint64_t stream,
                                             bool synchronous,
                                             double *out,
                                             size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ASYNDIFF_H */
