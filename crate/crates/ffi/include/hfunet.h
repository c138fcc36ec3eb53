#ifndef HFUNET_H
#define HFUNET_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HfStatus {
  HF_STATUS_OK = 0,
  HF_STATUS_NULL_POINTER = 1,
  HF_STATUS_INVALID_ARGUMENT = 2,
  HF_STATUS_IO = 3,
  HF_STATUS_CHECKPOINT = 4,
  HF_STATUS_MODEL = 5,
  HF_STATUS_BUFFER_TOO_SMALL = 6,
  HF_STATUS_PANIC = 7,
} HfStatus;

// Opaque model handle.
typedef struct HfModel HfModel;

// Metrics of one case; undefined values are NaN.
typedef struct HfMetrics {
  double dsc;
  double asd_mm;
  double sen;
  double ppv;
} HfMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `len`). Returns the full message length.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
uintptr_t hf_last_error(char *buf, uintptr_t len);

// Library version as a static NUL-terminated string.
const char *hf_version(void);

// Builds a freshly initialized model from a topology name (`unet`, `eb`,
// `lb`, `hf-<k>`).
//
// # Safety
// `name` must be a NUL-terminated string; `out` must be valid for a write.
enum HfStatus hf_model_build(const char *name, uint64_t seed, struct HfModel **out);

// Loads a checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid for a write.
enum HfStatus hf_model_load(const char *path, struct HfModel **out);

// Writes a checkpoint.
//
// # Safety
// `model` must come from this library; `path` must be NUL-terminated.
enum HfStatus hf_model_save(const struct HfModel *model, const char *path);

// Releases a model; null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void hf_model_free(struct HfModel *model);

// Input slices per prediction (the 2.5D stack depth), 0 for null.
//
// # Safety
// `model` must be null or a live handle.
uintptr_t hf_model_in_slices(const struct HfModel *model);

// Hex SHA-256 over every parameter, written NUL-terminated into `buf`
// (needs 65 bytes).
//
// # Safety
// `model` must be a live handle; `buf` valid for `len` bytes.
enum HfStatus hf_model_checksum(const struct HfModel *model, char *buf, uintptr_t len);

// Foreground probabilities `[batch, h, w]` for a `[batch, slices, h, w]`
// stack batch.
//
// # Safety
// `input` must hold `batch*slices*h*w` floats; `probs` `batch*h*w`.
enum HfStatus hf_model_predict(const struct HfModel *model,
                               const float *input,
                               uintptr_t batch,
                               uintptr_t slices,
                               uintptr_t h,
                               uintptr_t w,
                               float *probs);

// Segments a region volume (x fastest, square slices), writing a 0/1 mask
// of the same size; keeps the largest component when `largest` is nonzero.
//
// # Safety
// `data` and `mask` must hold `nx*ny*nz` elements.
enum HfStatus hf_segment_region(const struct HfModel *model,
                                const float *data,
                                uintptr_t nx,
                                uintptr_t ny,
                                uintptr_t nz,
                                int32_t largest,
                                uint8_t *mask);

// Truncated Gaussian contour heatmap of a binary `nx x ny` mask (x
// fastest).
//
// # Safety
// `mask` and `out` must hold `nx*ny` elements.
enum HfStatus hf_contour_heatmap(const uint8_t *mask,
                                 uintptr_t nx,
                                 uintptr_t ny,
                                 double sigma,
                                 double truncation,
                                 double *out);

// DSC, ASD (mm), sensitivity and precision of two binary volumes.
//
// # Safety
// `gt` and `seg` must hold `nx*ny*nz` bytes; `spacing` 3 floats; `out`
// valid for a write.
enum HfStatus hf_metrics(const uint8_t *gt,
                         const uint8_t *seg,
                         uintptr_t nx,
                         uintptr_t ny,
                         uintptr_t nz,
                         const float *spacing,
                         struct HfMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HFUNET_H */
