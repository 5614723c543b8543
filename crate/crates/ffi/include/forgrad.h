#ifndef FORGRAD_H
#define FORGRAD_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum ForgradStatus {
  FORGRAD_STATUS_OK = 0,
  FORGRAD_STATUS_NULL_POINTER = 1,
  FORGRAD_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Malformed file or buffer.
   */
  FORGRAD_STATUS_FORMAT = 3,
  FORGRAD_STATUS_IO = 4,
  FORGRAD_STATUS_SHAPE_MISMATCH = 5,
  /**
   * A computation produced a non-finite value or too little data.
   */
  FORGRAD_STATUS_NUMERIC = 6,
  FORGRAD_STATUS_UNSUPPORTED = 7,
  /**
   * Output buffer too small; the message names the required size.
   */
  FORGRAD_STATUS_BUFFER_TOO_SMALL = 8,
  FORGRAD_STATUS_PANIC = 9,
} ForgradStatus;

/**
 * Filtering mode for [`forgrad_attribute`].
 */
typedef enum ForgradMode {
  FORGRAD_MODE_GRADIENT = 0,
  FORGRAD_MODE_MAP = 1,
} ForgradMode;

/**
 * Opaque model handle.
 */
typedef struct ForgradModel ForgradModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t forgrad_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *forgrad_version(void);

/**
 * Loads a model file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum ForgradStatus forgrad_model_load(const char *path, struct ForgradModel **out);

/**
 * Parses a model from an in-memory buffer.
 *
 * # Safety
 * `bytes` must point to `len` readable bytes; `out` must be writable.
 */
enum ForgradStatus forgrad_model_from_bytes(const uint8_t *bytes,
                                            size_t len,
                                            struct ForgradModel **out);

/**
 * Builds an untrained preset (`cnn-max`, `cnn-avg`, `cnn-strideN`, `linear`).
 *
 * # Safety
 * `preset` must be a NUL-terminated string; `out` must be writable.
 */
enum ForgradStatus forgrad_model_build(const char *preset,
                                       size_t channels,
                                       size_t height,
                                       size_t width,
                                       size_t num_classes,
                                       uint64_t seed,
                                       struct ForgradModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from a `forgrad_model_*` constructor and not be used
 * afterwards.
 */
void forgrad_model_free(struct ForgradModel *model);

/**
 * Writes `[C, H, W]` to `shape` and the class count to `num_classes`.
 *
 * # Safety
 * `model` must be a live handle; `shape` must hold 3 values.
 */
enum ForgradStatus forgrad_model_info(const struct ForgradModel *model,
                                      size_t *shape,
                                      size_t *num_classes);

/**
 * Writes the hex SHA-256 of the serialized model (64 chars plus NUL).
 *
 * # Safety
 * `model` must be a live handle; `buf` must hold `len` bytes.
 */
enum ForgradStatus forgrad_model_hash(const struct ForgradModel *model, char *buf, size_t len);

/**
 * Logits for one image. `logits` must hold `num_classes` values.
 *
 * # Safety
 * `input` must hold `input_len` values and `logits` `logits_len` values.
 */
enum ForgradStatus forgrad_logits(const struct ForgradModel *model,
                                  const double *input,
                                  size_t input_len,
                                  double *logits,
                                  size_t logits_len);

/**
 * Predicted class for one image.
 *
 * # Safety
 * `input` must hold `input_len` values; `class` must be writable.
 */
enum ForgradStatus forgrad_predict(const struct ForgradModel *model,
                                   const double *input,
                                   size_t input_len,
                                   size_t *class_);

/**
 * Attribution map (`H x W`) for `class`. A negative or NaN `sigma` means no
 * filtering; otherwise high frequencies beyond `sigma` are removed in the
 * given mode. `method` takes the command-line names (`saliency`,
 * `smoothgrad`, `integrated-gradients`, ...).
 *
 * # Safety
 * `input` must hold `input_len` values, `map` `map_len` values, and
 * `method` must be a NUL-terminated string.
 */
enum ForgradStatus forgrad_attribute(const struct ForgradModel *model,
                                     const double *input,
                                     size_t input_len,
                                     size_t class_,
                                     const char *method,
                                     double sigma,
                                     enum ForgradMode mode,
                                     uint64_t seed,
                                     double *map,
                                     size_t map_len);

/**
 * Ideal low-pass of an `H x W` map keeping radius `<= sigma / 2`.
 *
 * # Safety
 * `map` and `out` must each hold `height * width` values.
 */
enum ForgradStatus forgrad_lowpass(const double *map,
                                   size_t height,
                                   size_t width,
                                   double sigma,
                                   double *out);

/**
 * Power/frequency slope of the radial signature of `count` maps of size
 * `H x W`, stored back to back.
 *
 * # Safety
 * `maps` must hold `count * height * width` values; `slope` must be writable.
 */
enum ForgradStatus forgrad_power_slope(const double *maps,
                                       size_t count,
                                       size_t height,
                                       size_t width,
                                       double *slope);

/**
 * Faithfulness (insertion minus deletion AUC) of `map` for `class`, with
 * default metric settings and a zero baseline.
 *
 * # Safety
 * `input` must hold `input_len` values and `map` `map_len` values.
 */
enum ForgradStatus forgrad_faithfulness(const struct ForgradModel *model,
                                        const double *input,
                                        size_t input_len,
                                        const double *map,
                                        size_t map_len,
                                        size_t class_,
                                        double *score);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FORGRAD_H */
