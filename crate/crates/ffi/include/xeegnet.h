#ifndef XEEGNET_H
#define XEEGNET_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum XeegStatus {
  XEEG_STATUS_OK = 0,
  XEEG_STATUS_NULL_POINTER = 1,
  XEEG_STATUS_INVALID_ARGUMENT = 2,
  XEEG_STATUS_CONFIG = 3,
  XEEG_STATUS_DATA = 4,
  XEEG_STATUS_IO = 5,
  XEEG_STATUS_NUMERICAL = 6,
  XEEG_STATUS_BUFFER_TOO_SMALL = 7,
  XEEG_STATUS_PANIC = 8,
} XeegStatus;

/**
 * Opaque model handle.
 */
typedef struct XeegModel XeegModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *xeeg_version(void);

/**
 * Copy the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be valid for `len` bytes or null.
 */
size_t xeeg_last_error(char *buf, size_t len);

/**
 * Build a model from a named preset adapted to the given input shape.
 * Weights are initialized from `seed`.
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out` a valid pointer.
 */
enum XeegStatus xeeg_model_from_preset(const char *name,
                                       size_t channels,
                                       size_t samples,
                                       double fs,
                                       uint64_t seed,
                                       struct XeegModel **out);

/**
 * Load a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid pointer.
 */
enum XeegStatus xeeg_model_load(const char *path, struct XeegModel **out);

/**
 * Write a checkpoint file.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum XeegStatus xeeg_model_save(const struct XeegModel *model, const char *path);

/**
 * Release a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void xeeg_model_free(struct XeegModel *model);

/**
 * Input shape and output sizes of a model.
 *
 * # Safety
 * All pointers must be valid.
 */
enum XeegStatus xeeg_model_shape(const struct XeegModel *model,
                                 size_t *channels,
                                 size_t *samples,
                                 size_t *n_classes,
                                 size_t *n_features);

/**
 * Trainable and total parameter counts.
 *
 * # Safety
 * All pointers must be valid.
 */
enum XeegStatus xeeg_model_count_params(const struct XeegModel *model,
                                        size_t *trainable,
                                        size_t *total);

/**
 * Eval-mode class probabilities for `n_windows` windows; `out` receives
 * `n_windows × n_classes` values.
 *
 * # Safety
 * `data` must hold `n_windows × channels × samples` doubles and `out`
 * `out_len` doubles.
 */
enum XeegStatus xeeg_model_predict_proba(const struct XeegModel *model,
                                         const double *data,
                                         size_t n_windows,
                                         double *out,
                                         size_t out_len);

/**
 * Eval-mode log-power features (`n_windows × n_features`).
 *
 * # Safety
 * As for `xeeg_model_predict_proba`.
 */
enum XeegStatus xeeg_model_features(const struct XeegModel *model,
                                    const double *data,
                                    size_t n_windows,
                                    double *out,
                                    size_t out_len);

/**
 * Design a band-pass FIR kernel of `length` taps for `[f_low, f_high]` Hz.
 *
 * # Safety
 * `taps` must hold `taps_len` doubles.
 */
enum XeegStatus xeeg_design_bandpass(double f_low,
                                     double f_high,
                                     size_t length,
                                     double fs,
                                     double *taps,
                                     size_t taps_len);

/**
 * Channel-averaged Welch band powers in dB for the seven canonical bands,
 * delta to gamma. `out` must hold 7 values.
 *
 * # Safety
 * `data` must hold `channels × samples` doubles.
 */
enum XeegStatus xeeg_band_powers(const double *data,
                                 size_t channels,
                                 size_t samples,
                                 double fs,
                                 double *out,
                                 size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* XEEGNET_H */
