#ifndef ABSEG_H
#define ABSEG_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AbsegStatus {
  ABSEG_STATUS_OK = 0,
  ABSEG_STATUS_NULL_POINTER = 1,
  ABSEG_STATUS_INVALID_ARGUMENT = 2,
  ABSEG_STATUS_IO = 3,
  ABSEG_STATUS_FORMAT = 4,
  ABSEG_STATUS_SHAPE_MISMATCH = 5,
  ABSEG_STATUS_CONFIG = 6,
  ABSEG_STATUS_NON_FINITE = 7,
  ABSEG_STATUS_BUFFER_TOO_SMALL = 8,
  ABSEG_STATUS_PANIC = 9,
} AbsegStatus;

// Opaque trained network.
typedef struct AbsegModel AbsegModel;

// Sliding-window and test-time flip settings for [`abseg_model_predict`].
typedef struct AbsegInferenceOptions {
  size_t patch_size[3];
  // Fraction of the patch shared by neighbouring windows, in [0, 1).
  double overlap;
  // Bit 0 = x, bit 1 = y, bit 2 = z. 0 disables flip averaging.
  uint8_t flip_axes;
  // Center-weighted window blending instead of uniform averaging.
  bool gaussian_weighting;
} AbsegInferenceOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null if the last
// call succeeded. Valid until the next call into the library.
const char *abseg_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *abseg_version(void);

// Loads a checkpoint. On success `*out` owns a model that must be
// released with [`abseg_model_free`].
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum AbsegStatus abseg_model_load(const char *path, struct AbsegModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from [`abseg_model_load`] and not be used afterwards.
void abseg_model_free(struct AbsegModel *model);

// Output class count of the model, or 0 for null.
//
// # Safety
// `model` must be null or a live model.
size_t abseg_model_num_classes(const struct AbsegModel *model);

// Input channel count of the model, or 0 for null.
//
// # Safety
// `model` must be null or a live model.
size_t abseg_model_in_channels(const struct AbsegModel *model);

// Predicts class probabilities for one (C_in, X, Y, Z) volume into
// `out_probs`, which must hold `num_classes * X * Y * Z` values.
//
// # Safety
// `input` must point to `in_channels * x * y * z` readable values and
// `out_probs` to `out_len` writable ones.
enum AbsegStatus abseg_model_predict(const struct AbsegModel *model,
                                     const double *input,
                                     size_t x,
                                     size_t y,
                                     size_t z,
                                     const struct AbsegInferenceOptions *options,
                                     double *out_probs,
                                     size_t out_len);

// Polynomial learning-rate decay at `epoch` of `total_epochs`.
//
// # Safety
// `out` must be writable.
enum AbsegStatus abseg_poly_lr(uint64_t epoch,
                               uint64_t total_epochs,
                               double lr0,
                               double power,
                               double *out);

// Hard Dice of `class_id` between two label volumes of shape (x, y, z).
//
// # Safety
// `pred` and `gt` must each point to `x * y * z` labels; `out` must be writable.
enum AbsegStatus abseg_dice(const uint8_t *pred,
                            const uint8_t *gt,
                            size_t x,
                            size_t y,
                            size_t z,
                            size_t num_classes,
                            size_t class_id,
                            double *out);

// Surface Dice of `class_id` at tolerance `tau_mm`; `spacing` holds the
// three voxel sizes in millimetres.
//
// # Safety
// As [`abseg_dice`]; `spacing` must point to three values.
enum AbsegStatus abseg_surface_dice(const uint8_t *pred,
                                    const uint8_t *gt,
                                    size_t x,
                                    size_t y,
                                    size_t z,
                                    size_t num_classes,
                                    size_t class_id,
                                    const double *spacing,
                                    double tau_mm,
                                    double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ABSEG_H */
