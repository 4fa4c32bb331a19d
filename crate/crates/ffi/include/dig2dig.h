#ifndef DIG2DIG_H
#define DIG2DIG_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum D2dStatus {
  D2D_STATUS_OK = 0,
  D2D_STATUS_NULL_POINTER = 1,
  D2D_STATUS_INVALID_ARGUMENT = 2,
  D2D_STATUS_CONFIG = 3,
  D2D_STATUS_IO = 4,
  D2D_STATUS_DIVERGENCE = 5,
  D2D_STATUS_PANIC = 6,
} D2dStatus;

// Run configuration, edited with the same keys as the command line config file.
typedef struct D2dConfig D2dConfig;

// Output of one fusion run.
typedef struct D2dFusion D2dFusion;

// A single image in model space, row-major with interleaved channels.
typedef struct D2dImage D2dImage;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *d2d_version(void);

// Message of the last failed call on this thread, empty after a success.
// Valid until the next call into this library on the same thread.
const char *d2d_last_error(void);

// Copies `len` values into a new `height x width x channels` image.
//
// # Safety
// `data` must point to `len` readable doubles; `out` must be writable.
enum D2dStatus d2d_image_new(size_t height,
                             size_t width,
                             size_t channels,
                             const double *data,
                             size_t len,
                             struct D2dImage **out);

// Loads an 8- or 16-bit PNG/PGM/PPM into model space.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum D2dStatus d2d_image_load(const char *path, struct D2dImage **out);

// Writes an 8-bit image; the format follows the file extension.
//
// # Safety
// `image` must be a live handle and `path` a NUL-terminated string.
enum D2dStatus d2d_image_save(const struct D2dImage *image, const char *path);

// # Safety
// `image` must be a live handle; the output pointers must be writable.
enum D2dStatus d2d_image_shape(const struct D2dImage *image,
                               size_t *height,
                               size_t *width,
                               size_t *channels);

// Copies the pixel values into `buf`, which must hold exactly the image size.
//
// # Safety
// `image` must be a live handle and `buf` must point to `len` writable doubles.
enum D2dStatus d2d_image_copy_data(const struct D2dImage *image, double *buf, size_t len);

// # Safety
// `image` must be null or a handle not yet freed.
void d2d_image_free(struct D2dImage *image);

// New configuration with library defaults.
//
// # Safety
// `out` must be writable.
enum D2dStatus d2d_config_new(struct D2dConfig **out);

// Sets one key, e.g. `steps`, `dig_interval`, `oracle`, `seed`.
//
// # Safety
// `config` must be a live handle; `key` and `value` NUL-terminated strings.
enum D2dStatus d2d_config_set(struct D2dConfig *config, const char *key, const char *value);

// Applies a `key = value` config file on top of the current values.
//
// # Safety
// `config` must be a live handle and `path` a NUL-terminated string.
enum D2dStatus d2d_config_load(struct D2dConfig *config, const char *path);

// # Safety
// `config` must be null or a handle not yet freed.
void d2d_config_free(struct D2dConfig *config);

// Fuses `count` same-shaped modalities under `config`.
//
// # Safety
// `config` must be a live handle, `modalities` must point to `count` live
// image handles, and `out` must be writable.
enum D2dStatus d2d_fuse(const struct D2dConfig *config,
                        const struct D2dImage *const *modalities,
                        size_t count,
                        struct D2dFusion **out);

// Copies the fused image into a new image handle.
//
// # Safety
// `fusion` must be a live handle and `out` writable.
enum D2dStatus d2d_fusion_image(const struct D2dFusion *fusion, struct D2dImage **out);

// Number of gain records in the run trace; 0 for a null handle.
//
// # Safety
// `fusion` must be null or a live handle.
size_t d2d_fusion_records(const struct D2dFusion *fusion);

// The run trace as CSV in a new string released with [`d2d_string_free`].
//
// # Safety
// `fusion` must be a live handle and `out` writable.
enum D2dStatus d2d_fusion_trace_csv(const struct D2dFusion *fusion, char **out);

// # Safety
// `fusion` must be null or a handle not yet freed.
void d2d_fusion_free(struct D2dFusion *fusion);

// # Safety
// `s` must be null or a string returned by this library and not yet freed.
void d2d_string_free(char *s);

// Peak-255 PSNR of two images after conversion to 8-bit gray; `+inf` when equal.
//
// # Safety
// `a` and `b` must be live handles and `out` writable.
enum D2dStatus d2d_psnr(const struct D2dImage *a, const struct D2dImage *b, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIG2DIG_H */
