#ifndef RDEPTH_H
#define RDEPTH_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum RdStatus {
  RdStatus_Ok = 0,
  RdStatus_NullPointer = 1,
  RdStatus_InvalidArgument = 2,
  RdStatus_ShapeMismatch = 3,
  RdStatus_IoError = 4,
  RdStatus_FormatError = 5,
  RdStatus_InternalError = 6,
} RdStatus;

/**
 * Opaque trained pipeline (model descriptor plus parameters).
 */
typedef struct RdPipeline RdPipeline;

/**
 * Opaque noise schedule.
 */
typedef struct RdSchedule RdSchedule;

/**
 * Opaque dense f32 tensor.
 */
typedef struct RdTensor RdTensor;

/**
 * Standard depth metric set over masked pixels.
 */
typedef struct RdMetrics {
  double rmse;
  double abs_rel;
  double sq_rel;
  double rmse_log;
  double delta1;
  double delta2;
  double delta3;
  size_t pixels;
} RdMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent error on this thread; valid until the next
 * failing call on the same thread.
 */
const char *rd_last_error(void);

/**
 * Library version as a static string.
 */
const char *rd_version(void);

/**
 * Builds a tensor from row-major data. `dims` has `ndim` entries.
 *
 * # Safety
 * `dims` must point to `ndim` usizes and `data` to the implied number of
 * floats; `out` must be a valid location for a pointer.
 */
enum RdStatus rd_tensor_create(const size_t *dims,
                               size_t ndim,
                               const float *data,
                               struct RdTensor **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string, `out` a valid location.
 */
enum RdStatus rd_tensor_load(const char *path, struct RdTensor **out);

/**
 * # Safety
 * `t` must be a live tensor handle and `path` a NUL-terminated string.
 */
enum RdStatus rd_tensor_save(const struct RdTensor *t, const char *path);

/**
 * # Safety
 * `t` must be a live tensor handle.
 */
size_t rd_tensor_ndim(const struct RdTensor *t);

/**
 * Dimension `i`, or 0 when out of range.
 *
 * # Safety
 * `t` must be a live tensor handle.
 */
size_t rd_tensor_dim(const struct RdTensor *t, size_t i);

/**
 * # Safety
 * `t` must be a live tensor handle.
 */
size_t rd_tensor_numel(const struct RdTensor *t);

/**
 * Borrowed pointer to the row-major payload; valid while the handle lives.
 *
 * # Safety
 * `t` must be a live tensor handle.
 */
const float *rd_tensor_data(const struct RdTensor *t);

/**
 * # Safety
 * `t` must be an owned handle from this library, freed exactly once.
 */
void rd_tensor_free(struct RdTensor *t);

/**
 * Linear schedule with `steps` forward steps.
 *
 * # Safety
 * `out` must be a valid location for a pointer.
 */
enum RdStatus rd_schedule_create(size_t steps, struct RdSchedule **out);

/**
 * Cumulative noise coefficient at step `t` (0..=steps).
 *
 * # Safety
 * `s` must be a live schedule handle, `out` a valid f64 location.
 */
enum RdStatus rd_schedule_alpha_bar(const struct RdSchedule *s, size_t t, double *out);

/**
 * # Safety
 * `s` must be an owned handle from this library, freed exactly once.
 */
void rd_schedule_free(struct RdSchedule *s);

/**
 * Loads a pipeline from a model descriptor JSON and a checkpoint file.
 *
 * # Safety
 * Paths must be NUL-terminated strings, `out` a valid location.
 */
enum RdStatus rd_pipeline_load(const char *descriptor_json,
                               const char *checkpoint,
                               struct RdPipeline **out);

/**
 * Depth from the no-diffusion path. The output tensor is (1, H, W) meters.
 *
 * # Safety
 * `p` and `image` must be live handles, `out` a valid location.
 */
enum RdStatus rd_pipeline_baseline_depth(const struct RdPipeline *p,
                                         const struct RdTensor *image,
                                         struct RdTensor **out);

/**
 * Depth through the restoration process: `t_total` forward steps,
 * `strides` reverse strides, deterministic for a fixed `seed`.
 *
 * # Safety
 * `p` and `image` must be live handles, `out` a valid location.
 */
enum RdStatus rd_pipeline_infer_depth(const struct RdPipeline *p,
                                      const struct RdTensor *image,
                                      size_t t_total,
                                      size_t strides,
                                      uint64_t seed,
                                      bool literal_removal,
                                      struct RdTensor **out);

/**
 * # Safety
 * `p` must be an owned handle from this library, freed exactly once.
 */
void rd_pipeline_free(struct RdPipeline *p);

/**
 * # Safety
 * All tensor handles must be live and `out` a valid location.
 */
enum RdStatus rd_depth_metrics(const struct RdTensor *pred,
                               const struct RdTensor *gt,
                               const struct RdTensor *mask,
                               struct RdMetrics *out);

/**
 * Scale-invariant log loss over masked pixels.
 *
 * # Safety
 * All tensor handles must be live and `out` a valid f64 location.
 */
enum RdStatus rd_silog_loss(const struct RdTensor *pred,
                            const struct RdTensor *gt,
                            const struct RdTensor *mask,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RDEPTH_H */
