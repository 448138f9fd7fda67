#ifndef FDDWNET_H
#define FDDWNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every function.
typedef enum FddwStatus {
  FDDW_STATUS_OK = 0,
  FDDW_STATUS_NULL_POINTER = 1,
  FDDW_STATUS_INVALID_ARGUMENT = 2,
  FDDW_STATUS_SHAPE_MISMATCH = 3,
  FDDW_STATUS_BAD_MAGIC = 4,
  FDDW_STATUS_VERSION_UNSUPPORTED = 5,
  FDDW_STATUS_CHECKSUM_MISMATCH = 6,
  FDDW_STATUS_SHAPE_MISMATCH_ON_LOAD = 7,
  FDDW_STATUS_UNSUPPORTED_FORMAT = 8,
  FDDW_STATUS_IO_FAILURE = 9,
  FDDW_STATUS_BUFFER_TOO_SMALL = 10,
  FDDW_STATUS_PANIC = 11,
} FddwStatus;

// Opaque network handle.
typedef struct FddwNet FddwNet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Builds a network for `classes` classes with weights initialized from
// `seed`, storing the handle in `*out`.
//
// # Safety
// `out` must be valid for writes.
enum FddwStatus fddw_net_new(uint32_t classes, uint64_t seed, struct FddwNet **out);

// Releases a handle; null is ignored.
//
// # Safety
// `net` must be null or a handle from [`fddw_net_new`] not yet freed.
void fddw_net_free(struct FddwNet *net);

// Number of output classes.
//
// # Safety
// `net` must be a live handle and `out` valid for writes.
enum FddwStatus fddw_net_classes(const struct FddwNet *net, uint32_t *out);

// Trainable parameter count and total count including running statistics.
//
// # Safety
// `net` must be a live handle; the output pointers must be valid for writes.
enum FddwStatus fddw_net_param_count(const struct FddwNet *net,
                                     uint64_t *trainable,
                                     uint64_t *total);

// `(n - 1) * r + 1` for odd `n >= 1` and `r >= 1`.
//
// # Safety
// `out` must be valid for writes.
enum FddwStatus fddw_receptive_field(uint32_t n, uint32_t r, uint32_t *out);

// Loads an archive file; on failure the weights are unchanged.
//
// # Safety
// `net` must be a live handle not used concurrently; `path` a NUL-terminated
// string.
enum FddwStatus fddw_net_load_weights(struct FddwNet *net, const char *path);

// Writes the weights to `path` atomically.
//
// # Safety
// `net` must be a live handle; `path` a NUL-terminated string.
enum FddwStatus fddw_net_save_weights(const struct FddwNet *net, const char *path);

// Loads an archive held in memory.
//
// # Safety
// `net` must be a live handle not used concurrently; `data` must point to
// `len` readable bytes.
enum FddwStatus fddw_net_load_weights_bytes(struct FddwNet *net, const uint8_t *data, size_t len);

// Serializes the weights into `buf`. `*written` receives the archive size
// even when the call fails with `BufferTooSmall`; pass a null `buf` and
// zero `capacity` to query it.
//
// # Safety
// `net` must be a live handle; `buf` must be null or point to `capacity`
// writable bytes; `written` must be valid for writes.
enum FddwStatus fddw_net_save_weights_bytes(const struct FddwNet *net,
                                            uint8_t *buf,
                                            size_t capacity,
                                            size_t *written);

// Inference on a normalized `batch x 3 x height x width` input (NCHW,
// row-major). Writes `batch x classes x height x width` logits.
//
// # Safety
// `net` must be a live handle; `input` must hold `batch*3*height*width`
// floats and `output` `output_len` writable floats.
enum FddwStatus fddw_net_forward(const struct FddwNet *net,
                                 const float *input,
                                 uint32_t batch,
                                 uint32_t height,
                                 uint32_t width,
                                 float *output,
                                 size_t output_len);

// Inference followed by a per-pixel argmax; writes `batch x height x width`
// class indices.
//
// # Safety
// As [`fddw_net_forward`], with `labels` holding `labels_len` writable
// integers.
enum FddwStatus fddw_net_predict(const struct FddwNet *net,
                                 const float *input,
                                 uint32_t batch,
                                 uint32_t height,
                                 uint32_t width,
                                 uint32_t *labels,
                                 size_t labels_len);

// Message for the last failed call on this thread (empty after a success).
// The pointer stays valid until the next call on the same thread.
const char *fddw_last_error_message(void);

// Static name of a status code; unknown codes map to "unknown status".
const char *fddw_status_name(int32_t code);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FDDWNET_H */
