#ifndef RESINV_H
#define RESINV_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Floats per image (16 x 16).
 */
#define RESINV_PIXELS 256

typedef enum ResinvStatus {
  RESINV_STATUS_OK = 0,
  RESINV_STATUS_NULL_POINTER = 1,
  RESINV_STATUS_INVALID_ARGUMENT = 2,
  RESINV_STATUS_IO = 3,
  RESINV_STATUS_FORMAT = 4,
  RESINV_STATUS_NUMERIC = 5,
  RESINV_STATUS_PANIC = 6,
  RESINV_STATUS_INTERNAL = 7,
} ResinvStatus;

/**
 * An image inverted into a model's trajectory space, with its residuals.
 */
typedef struct ResinvBundle ResinvBundle;

/**
 * A loaded denoiser.
 */
typedef struct ResinvModel ResinvModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *resinv_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len - 1` bytes) and returns the full message
 * length in bytes. `buf` may be null to query the length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t resinv_last_error(char *buf, size_t len);

/**
 * Loads a weight file written by `resinv train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer. On
 * success `*out` owns a model that must be released with
 * [`resinv_model_free`].
 */
enum ResinvStatus resinv_model_load(const char *path, struct ResinvModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`resinv_model_load`] that has not
 * been freed.
 */
void resinv_model_free(struct ResinvModel *model);

/**
 * Number of diffusion steps, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t resinv_model_steps(const struct ResinvModel *model);

/**
 * 1 for a personalized (identity-conditioned) model, 0 for a base model,
 * -1 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
int32_t resinv_model_is_personalized(const struct ResinvModel *model);

/**
 * Inverts an image under scene `scene_code` and, for personalized models,
 * the identity with index `identity` (negative for none). The returned
 * bundle reconstructs the image exactly and drives [`resinv_bundle_sample`].
 *
 * # Safety
 * `model` must be a live handle, `pixels` must point to `len` floats and
 * `out` must be valid. Release the result with [`resinv_bundle_free`].
 */
enum ResinvStatus resinv_invert(const struct ResinvModel *model,
                                const float *pixels,
                                size_t len,
                                size_t scene_code,
                                int64_t identity_index,
                                float guidance,
                                struct ResinvBundle **out);

/**
 * # Safety
 * `bundle` must be null or a handle from [`resinv_invert`] that has not
 * been freed.
 */
void resinv_bundle_free(struct ResinvBundle *bundle);

/**
 * Replays the recorded residuals to rebuild the inverted image.
 *
 * # Safety
 * `model` and `bundle` must be live handles and `out` must point to `len`
 * writable floats.
 */
enum ResinvStatus resinv_reconstruct(const struct ResinvModel *model,
                                     const struct ResinvBundle *bundle,
                                     float *out,
                                     size_t len);

/**
 * Triple-flow sampling from an inverted image: the first `mss` steps mix
 * the reconstruction (scaled by `lambda_bkwd`) with the identity guidance
 * (scaled by `lambda_fwd`).
 *
 * # Safety
 * `model` and `bundle` must be live handles and `out` must point to `len`
 * writable floats.
 */
enum ResinvStatus resinv_bundle_sample(const struct ResinvModel *model,
                                       const struct ResinvBundle *bundle,
                                       size_t mss,
                                       float lambda_bkwd,
                                       float lambda_fwd,
                                       float *out,
                                       size_t len);

/**
 * Runs the full pipeline (base sample, glyph swap, inversion, triple-flow
 * sampling) with default settings and writes the enhanced image.
 *
 * # Safety
 * `base` and `personalized` must be live handles and `out` must point to
 * `len` writable floats.
 */
enum ResinvStatus resinv_enhance(const struct ResinvModel *base,
                                 const struct ResinvModel *personalized,
                                 size_t scene_code,
                                 int64_t identity_index,
                                 uint64_t seed,
                                 float *out,
                                 size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RESINV_H */
