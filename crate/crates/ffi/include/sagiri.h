#ifndef SAGIRI_H
#define SAGIRI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SagiriStatus {
  SAGIRI_STATUS_OK = 0,
  SAGIRI_STATUS_NULL_ARGUMENT = 1,
  SAGIRI_STATUS_INVALID_ARGUMENT = 2,
  SAGIRI_STATUS_NOT_FOUND = 3,
  SAGIRI_STATUS_IO = 4,
  SAGIRI_STATUS_FORMAT = 5,
  SAGIRI_STATUS_SHAPE = 6,
  SAGIRI_STATUS_CHECKPOINT = 7,
  SAGIRI_STATUS_RUNTIME = 8,
  SAGIRI_STATUS_PANIC = 9,
} SagiriStatus;

/**
 * Decoded image, 3 channels.
 */
typedef struct SagiriImage SagiriImage;

/**
 * Binary unknown-region mask.
 */
typedef struct SagiriMask SagiriMask;

/**
 * VAE, control-conditioned denoiser and noise schedule.
 */
typedef struct SagiriRefiner SagiriRefiner;

/**
 * Stage-one restorer.
 */
typedef struct SagiriRestorer SagiriRestorer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Owned by the library.
 */
const char *sagiri_last_error(void);

/**
 * Library version, static string.
 */
const char *sagiri_version(void);

/**
 * Loads a PNG or PFM file. HDR files are rejected.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum SagiriStatus sagiri_image_load(const char *path, struct SagiriImage **out);

/**
 * Wraps `height * width * 3` interleaved 8-bit sRGB samples (copied).
 *
 * # Safety
 * `data` must point to `width * height * 3` readable bytes.
 */
enum SagiriStatus sagiri_image_from_rgb8(const uint8_t *data,
                                         size_t width,
                                         size_t height,
                                         struct SagiriImage **out);

/**
 * # Safety
 * `img` must be null or a live image handle.
 */
size_t sagiri_image_width(const struct SagiriImage *img);

/**
 * # Safety
 * `img` must be null or a live image handle.
 */
size_t sagiri_image_height(const struct SagiriImage *img);

/**
 * Copies the image as interleaved 8-bit RGB into `buf` (`len >= width * height * 3`).
 *
 * # Safety
 * `buf` must point to `len` writable bytes.
 */
enum SagiriStatus sagiri_image_copy_rgb8(const struct SagiriImage *img, uint8_t *buf, size_t len);

/**
 * Writes the image as PNG.
 *
 * # Safety
 * `img` must be a live handle and `path` a nul-terminated string.
 */
enum SagiriStatus sagiri_image_save(const struct SagiriImage *img, const char *path);

/**
 * # Safety
 * `img` must be null or a handle not yet freed.
 */
void sagiri_image_free(struct SagiriImage *img);

/**
 * Marks pixels with any channel at 0 or 255 as unknown.
 *
 * # Safety
 * `img` must be a live handle; `out` must be writable.
 */
enum SagiriStatus sagiri_mask_detect(const struct SagiriImage *img, struct SagiriMask **out);

/**
 * Loads a mask image; white (nonzero) pixels are unknown.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum SagiriStatus sagiri_mask_load(const char *path, struct SagiriMask **out);

/**
 * Share of unknown pixels in `[0, 1]`, or -1 for a null handle.
 *
 * # Safety
 * `mask` must be null or a live handle.
 */
double sagiri_mask_unknown_fraction(const struct SagiriMask *mask);

/**
 * # Safety
 * `mask` must be null or a handle not yet freed.
 */
void sagiri_mask_free(struct SagiriMask *mask);

/**
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum SagiriStatus sagiri_restorer_load(const char *path, struct SagiriRestorer **out);

/**
 * Stage-one restoration of `img` into a new image.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum SagiriStatus sagiri_restorer_apply(const struct SagiriRestorer *restorer,
                                        const struct SagiriImage *img,
                                        struct SagiriImage **out);

/**
 * # Safety
 * `restorer` must be null or a handle not yet freed.
 */
void sagiri_restorer_free(struct SagiriRestorer *restorer);

/**
 * Loads the VAE and refiner checkpoints with the default noise schedule.
 *
 * # Safety
 * Paths must be nul-terminated strings; `out` must be writable.
 */
enum SagiriStatus sagiri_refiner_load(const char *vae_path,
                                      const char *sagiri_path,
                                      struct SagiriRefiner **out);

/**
 * Refines `img`. `prompt` and `mask` may be null; without a mask the
 * clipped pixels of `img` are regenerated. `n_steps` of 0 selects the default.
 *
 * # Safety
 * Non-null pointers must be live handles or nul-terminated strings; `out` must be writable.
 */
enum SagiriStatus sagiri_refiner_refine(const struct SagiriRefiner *refiner,
                                        const struct SagiriImage *img,
                                        const char *prompt,
                                        const struct SagiriMask *mask,
                                        size_t n_steps,
                                        uint64_t seed,
                                        struct SagiriImage **out);

/**
 * # Safety
 * `refiner` must be null or a handle not yet freed.
 */
void sagiri_refiner_free(struct SagiriRefiner *refiner);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAGIRI_H */
