#ifndef RELIT_H
#define RELIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RelitStatus {
  RELIT_STATUS_OK = 0,
  RELIT_STATUS_NULL_ARGUMENT = 1,
  RELIT_STATUS_INVALID_ARGUMENT = 2,
  RELIT_STATUS_IO = 3,
  RELIT_STATUS_FORMAT = 4,
  RELIT_STATUS_RUNTIME = 5,
  RELIT_STATUS_PANIC = 6,
  RELIT_STATUS_BUFFER_TOO_SMALL = 7,
} RelitStatus;

/**
 * A loaded scene model.
 */
typedef struct RelitModel RelitModel;

typedef struct RelitModelInfo {
  uint64_t points;
  uint32_t descriptor_width;
  uint64_t trained_steps;
} RelitModelInfo;

/**
 * Bytes owned by the library; release with [`relit_buffer_free`].
 */
typedef struct RelitBuffer {
  uint8_t *data;
  size_t len;
} RelitBuffer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static NUL-terminated string.
 */
const char *relit_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until
 * the next call on the same thread.
 */
const char *relit_last_error(void);

/**
 * Loads a model container.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum RelitStatus relit_model_load(const char *path, struct RelitModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`relit_model_load`] and not be used afterwards.
 */
void relit_model_free(struct RelitModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum RelitStatus relit_model_info(const struct RelitModel *model, struct RelitModelInfo *out);

/**
 * Renders a request (the HTTP `/render` body) to sRGB PNG bytes,
 * identical to the service response.
 *
 * # Safety
 * `model` must be a live handle, `request_json` NUL-terminated, `out`
 * writable. On success release `out` with [`relit_buffer_free`].
 */
enum RelitStatus relit_render_png(const struct RelitModel *model,
                                  const char *request_json,
                                  struct RelitBuffer *out);

/**
 * Renders a request to linear RGB floats, row-major and interleaved
 * (`h*w*3` values). `width` and `height` are always written when
 * non-null, so a call with `len = 0` sizes the buffer.
 *
 * # Safety
 * `out` must hold `len` floats; `width`/`height` may be null.
 */
enum RelitStatus relit_render_linear(const struct RelitModel *model,
                                     const char *request_json,
                                     float *out,
                                     size_t len,
                                     uint32_t *width,
                                     uint32_t *height);

/**
 * Releases a buffer from [`relit_render_png`]; empty buffers are ignored.
 *
 * # Safety
 * `buffer` must come from this library and not be freed twice.
 */
void relit_buffer_free(struct RelitBuffer buffer);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RELIT_H */
