#ifndef MPMAE_H
#define MPMAE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum {
  MPMAE_STATUS_OK = 0,
  // A required pointer was null or a string was not UTF-8.
  MPMAE_STATUS_NULL_POINTER = 1,
  // Bad argument, configuration or buffer size.
  MPMAE_STATUS_INVALID_ARGUMENT = 2,
  // Missing, corrupt or incompatible data on disk.
  MPMAE_STATUS_DATA_ERROR = 3,
  // Non-finite values or a broken internal invariant.
  MPMAE_STATUS_NUMERIC_FAILURE = 4,
  MPMAE_STATUS_PANIC = 5,
} MpmaeStatus;

// A dataset directory written by `mpmae gen`, with its band statistics.
typedef struct MpmaeDataset MpmaeDataset;

// A trained or randomly initialized encoder.
typedef struct MpmaeEncoder MpmaeEncoder;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *mpmae_version(void);

// Message for the most recent failure on this thread, or null. Valid until
// the next call into the library from the same thread.
const char *mpmae_last_error(void);

// Load the encoder from a pretraining checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
MpmaeStatus mpmae_encoder_load(const char *path, MpmaeEncoder **out);

// A randomly initialized tiny encoder for `image_size` inputs.
//
// # Safety
// `out` must be writable.
MpmaeStatus mpmae_encoder_random(uintptr_t image_size,
                                 uintptr_t patch_size,
                                 uint64_t seed,
                                 MpmaeEncoder **out);

// # Safety
// `enc` must come from this library and not be used afterwards.
void mpmae_encoder_free(MpmaeEncoder *enc);

// Input side length, patch size and pooled feature width.
//
// # Safety
// `enc` must be a live handle; the out pointers must be writable.
MpmaeStatus mpmae_encoder_info(const MpmaeEncoder *enc,
                               uintptr_t *image_size,
                               uintptr_t *patch_size,
                               uintptr_t *feature_dim);

// Pooled features for `n` standardized images laid out `n × S × S × 12`.
// `out` receives `n × feature_dim` floats.
//
// # Safety
// `input` and `out` must hold `input_len` and `out_len` floats.
MpmaeStatus mpmae_encoder_embed(const MpmaeEncoder *enc,
                                const float *input,
                                uintptr_t n,
                                uintptr_t input_len,
                                float *out,
                                uintptr_t out_len);

// Open a dataset directory; it must carry band statistics.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
MpmaeStatus mpmae_dataset_open(const char *path, MpmaeDataset **out);

// # Safety
// `ds` must come from this library and not be used afterwards.
void mpmae_dataset_free(MpmaeDataset *ds);

// # Safety
// `ds` must be a live handle; `len` must be writable.
MpmaeStatus mpmae_dataset_len(const MpmaeDataset *ds, uintptr_t *len);

// Standardized optical bands of sample `index`, top-left cropped to `size`,
// written as `size × size × 12`.
//
// # Safety
// `ds` must be a live handle; `out` must hold `out_len` floats.
MpmaeStatus mpmae_dataset_optical(const MpmaeDataset *ds,
                                  uintptr_t index,
                                  uintptr_t size,
                                  float *out,
                                  uintptr_t out_len);

// Sample a random patch mask; `out[i]` is 1 when patch `i` (row-major) is hidden.
//
// # Safety
// `out` must hold `out_len` bytes.
MpmaeStatus mpmae_sample_mask(uintptr_t image_size,
                              uintptr_t patch_size,
                              double ratio,
                              uint64_t seed,
                              uint8_t *out,
                              uintptr_t out_len);

// # Safety
// `pred` and `labels` must hold `len` values; `out` must be writable.
MpmaeStatus mpmae_overall_accuracy(const uint32_t *pred,
                                   const uint32_t *labels,
                                   uintptr_t len,
                                   double *out);

// Micro-averaged F1 over flattened multi-label indicators (nonzero = present).
//
// # Safety
// `pred` and `labels` must hold `len` bytes; `out` must be writable.
MpmaeStatus mpmae_micro_f1(const uint8_t *pred, const uint8_t *labels, uintptr_t len, double *out);

// Mean IoU over `classes`; pixels labelled `ignore` are skipped unless
// `ignore` is negative.
//
// # Safety
// `pred` and `labels` must hold `len` values; `out` must be writable.
MpmaeStatus mpmae_macro_iou(const uint32_t *pred,
                            const uint32_t *labels,
                            uintptr_t len,
                            uintptr_t classes,
                            int64_t ignore,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MPMAE_H */
