#ifndef DCSEG_H
#define DCSEG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DcsegStatus {
  DCSEG_STATUS_OK = 0,
  DCSEG_STATUS_NULL_POINTER = 1,
  DCSEG_STATUS_INVALID_ARGUMENT = 2,
  DCSEG_STATUS_STRUCTURAL = 3,
  DCSEG_STATUS_ADAPTATION_STEP = 4,
  DCSEG_STATUS_INPUT = 5,
  DCSEG_STATUS_CONFIG = 6,
  DCSEG_STATUS_PROTOCOL = 7,
  DCSEG_STATUS_FORMAT = 8,
  DCSEG_STATUS_DATASET = 9,
  DCSEG_STATUS_PRETRAIN = 10,
  DCSEG_STATUS_IO = 11,
  DCSEG_STATUS_JSON = 12,
  DCSEG_STATUS_BUFFER_TOO_SMALL = 13,
  DCSEG_STATUS_PANIC = 99,
} DcsegStatus;

typedef enum DcsegMode {
  DCSEG_MODE_BASELINE = 0,
  DCSEG_MODE_NAIVE_TTA = 1,
  DCSEG_MODE_DC_ONLY = 2,
  DCSEG_MODE_DC_TTA_NO_MERGE = 3,
  DCSEG_MODE_DC_TTA = 4,
} DcsegMode;

// Pretrained parameters. Shareable across sessions.
typedef struct DcsegModel DcsegModel;

// One interactive session.
typedef struct DcsegSession DcsegSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after success.
// The pointer stays valid until the next dcseg call on this thread.
const char *dcseg_last_error(void);

// Loads a model file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum DcsegStatus dcseg_model_load(const char *path, struct DcsegModel **out);

// An untrained model from a seed, for tests.
//
// # Safety
// `out` must be a valid pointer.
enum DcsegStatus dcseg_model_init(uint64_t seed, struct DcsegModel **out);

// Hex SHA-256 of the model file. Owned by the model.
//
// # Safety
// `model` must come from `dcseg_model_load` or `dcseg_model_init`.
const char *dcseg_model_hash(const struct DcsegModel *model);

// # Safety
// `model` must be null or an unfreed model handle. Sessions keep their own
// reference, so freeing the model while sessions live is allowed.
void dcseg_model_free(struct DcsegModel *model);

// Starts a session on an 8-bit interleaved RGB image of `width * height * 3` bytes.
//
// # Safety
// `rgb` must point to `rgb_len` readable bytes; `model` and `out` must be valid.
enum DcsegStatus dcseg_session_new(const struct DcsegModel *model,
                                   const uint8_t *rgb,
                                   size_t rgb_len,
                                   uint32_t width,
                                   uint32_t height,
                                   enum DcsegMode mode,
                                   struct DcsegSession **out);

// # Safety
// `session` must be null or an unfreed session handle.
void dcseg_session_free(struct DcsegSession *session);

// Applies one click and writes the resulting mask, one byte (0 or 1) per
// pixel in row-major order. A failed click leaves the session unchanged.
//
// # Safety
// `session` must be valid and `mask_out` must point to `mask_len` writable bytes.
enum DcsegStatus dcseg_session_click(struct DcsegSession *session,
                                     uint32_t x,
                                     uint32_t y,
                                     bool positive,
                                     uint8_t *mask_out,
                                     size_t mask_len);

// Back to the pretrained model with no clicks.
//
// # Safety
// `session` must be valid.
enum DcsegStatus dcseg_session_reset(struct DcsegSession *session);

// Number of clicks applied so far.
//
// # Safety
// `session` must be valid and `out` writable.
enum DcsegStatus dcseg_session_iteration(const struct DcsegSession *session, size_t *out);

// Number of segmentation units, the global one included.
//
// # Safety
// `session` must be valid and `out` writable.
enum DcsegStatus dcseg_session_unit_count(const struct DcsegSession *session, size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DCSEG_H */
