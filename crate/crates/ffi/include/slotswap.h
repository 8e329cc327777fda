#ifndef SLOTSWAP_H
#define SLOTSWAP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every entry point.
typedef enum SlotswapStatus {
  SLOTSWAP_STATUS_OK = 0,
  // A required pointer was null.
  SLOTSWAP_STATUS_NULL_ARGUMENT = 1,
  // Bad input: unknown attribute or value, wrong buffer size, invalid
  // weights, non-UTF-8 string.
  SLOTSWAP_STATUS_INVALID_ARGUMENT = 2,
  // A registry entry needed for domain translation is empty.
  SLOTSWAP_STATUS_NOT_READY = 3,
  // File could not be read.
  SLOTSWAP_STATUS_IO = 4,
  // File is not a valid checkpoint.
  SLOTSWAP_STATUS_CHECKPOINT = 5,
  // Any other failure inside the model.
  SLOTSWAP_STATUS_RUNTIME = 6,
  // A Rust panic was caught at the boundary.
  SLOTSWAP_STATUS_PANIC = 7,
} SlotswapStatus;

// Opaque handle to a loaded checkpoint.
typedef struct SlotswapModel SlotswapModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Loads a checkpoint file (or a run directory with a `latest` marker).
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SlotswapStatus slotswap_model_load(const char *path, struct SlotswapModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from [`slotswap_model_load`] and not be used afterwards.
void slotswap_model_free(struct SlotswapModel *model);

// Side length of the square images the model takes.
//
// # Safety
// `model` must be a live handle; `out` a valid pointer.
enum SlotswapStatus slotswap_model_image_size(const struct SlotswapModel *model, uintptr_t *out);

// Number of attributes in the model's schema.
//
// # Safety
// `model` must be a live handle; `out` a valid pointer.
enum SlotswapStatus slotswap_model_attribute_count(const struct SlotswapModel *model,
                                                   uintptr_t *out);

// Domain-level translation of `count` images to `attribute = value`.
//
// # Safety
// `input` and `output` must each hold `count * size * size * 3` floats.
enum SlotswapStatus slotswap_translate(const struct SlotswapModel *model,
                                       const char *attribute,
                                       const char *value,
                                       const float *input,
                                       uintptr_t count,
                                       float *output);

// Instance-level transfer of `attribute` from `reference[i]` onto `input[i]`.
//
// # Safety
// `input`, `reference` and `output` must each hold `count * size * size * 3` floats.
enum SlotswapStatus slotswap_transfer(const struct SlotswapModel *model,
                                      const char *attribute,
                                      const float *input,
                                      const float *reference,
                                      uintptr_t count,
                                      float *output);

// Encode and regenerate without edits.
//
// # Safety
// `input` and `output` must each hold `count * size * size * 3` floats.
enum SlotswapStatus slotswap_reconstruct(const struct SlotswapModel *model,
                                         const float *input,
                                         uintptr_t count,
                                         float *output);

// Weighted generator objective from its three scalar terms.
//
// # Safety
// `out` must be a valid pointer.
enum SlotswapStatus slotswap_generation_loss(double transfer,
                                             double back,
                                             double attr,
                                             double lambda1,
                                             double lambda2,
                                             double lambda3,
                                             double *out);

// Message of the last failure on this thread, or null. Valid until the
// next call into this library from the same thread.
const char *slotswap_last_error(void);

// Library version as a static NUL-terminated string.
const char *slotswap_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SLOTSWAP_H */
