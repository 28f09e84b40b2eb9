#ifndef EVTTC_H
#define EVTTC_H

/* This file is generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible call.
 */
typedef enum EvttcStatus {
  EVTTC_STATUS_OK = 0,
  EVTTC_STATUS_NULL_POINTER = 1,
  EVTTC_STATUS_INVALID_ARGUMENT = 2,
  EVTTC_STATUS_PARSE_ERROR = 3,
  /**
   * The pipeline ran but produced zero estimates.
   */
  EVTTC_STATUS_NO_ESTIMATES = 4,
  EVTTC_STATUS_IO_ERROR = 5,
} EvttcStatus;

/**
 * Opaque estimator: intrinsics plus pipeline configuration.
 */
typedef struct EvttcEstimator EvttcEstimator;

/**
 * Opaque event container.
 */
typedef struct EvttcSlice EvttcSlice;

/**
 * One input event.
 */
typedef struct EvttcEvent {
  /**
   * Timestamp in microseconds.
   */
  int64_t t_us;
  uint16_t x;
  uint16_t y;
  /**
   * +1 or -1; other non-zero values are mapped to their sign.
   */
  int8_t polarity;
} EvttcEvent;

/**
 * Pinhole intrinsics of the (rectified) event camera.
 */
typedef struct EvttcIntrinsics {
  double fx;
  double fy;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
} EvttcIntrinsics;

/**
 * One detection box on the leading object.
 */
typedef struct EvttcBbox {
  double t_s;
  double x_min;
  double y_min;
  double x_max;
  double y_max;
  int64_t track_id;
} EvttcBbox;

/**
 * One TTC estimate. `ttc_s` is positive when approaching, negative when
 * receding and infinite when no approach is measurable; `stage` is 0 for the
 * linear initialization and 1 for registration-only updates.
 */
typedef struct EvttcEstimate {
  double t_ref_s;
  double ttc_s;
  double a_x;
  double a_y;
  double a_z;
  double rms_s;
  uint64_t n_events;
  uint64_t n_inliers;
  int32_t stage;
} EvttcEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread. The pointer stays valid
 * until the next failing call on the same thread.
 */
const char *evttc_last_error(void);

/**
 * Builds an event slice from an array sorted by non-decreasing timestamp.
 *
 * # Safety
 * `events` must point to `len` readable elements and `out` must be a valid
 * destination for one pointer.
 */
enum EvttcStatus evttc_slice_from_events(const struct EvttcEvent *events,
                                         uintptr_t len,
                                         uint32_t width,
                                         uint32_t height,
                                         struct EvttcSlice **out);

/**
 * Loads the text event format (`t_us x y p` per line).
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid destination.
 */
enum EvttcStatus evttc_slice_load(const char *path,
                                  uint32_t width,
                                  uint32_t height,
                                  struct EvttcSlice **out);

/**
 * Number of events in the slice; 0 for a null handle.
 *
 * # Safety
 * `slice` must be null or a live handle from this library.
 */
uintptr_t evttc_slice_len(const struct EvttcSlice *slice);

/**
 * Releases a slice handle. Null is a no-op.
 *
 * # Safety
 * `slice` must be null or an unreleased handle from this library.
 */
void evttc_slice_free(struct EvttcSlice *slice);

/**
 * Creates an estimator. `config_json` may be null for defaults, or hold a
 * JSON object overriding any subset of the pipeline configuration.
 *
 * # Safety
 * `intr` and `out` must be valid; `config_json` must be null or
 * NUL-terminated.
 */
enum EvttcStatus evttc_estimator_new(const struct EvttcIntrinsics *intr,
                                     const char *config_json,
                                     struct EvttcEstimator **out);

/**
 * Releases an estimator handle. Null is a no-op.
 *
 * # Safety
 * `estimator` must be null or an unreleased handle from this library.
 */
void evttc_estimator_free(struct EvttcEstimator *estimator);

/**
 * Runs the pipeline over a slice and a detection track. Up to `cap`
 * estimates are written to `out_buf`; `out_len` receives the number written.
 * Returns `NoEstimates` when the run completes without any output.
 *
 * # Safety
 * All handles must be live; `track` must hold `track_len` elements sorted by
 * time; `out_buf` must hold `cap` writable elements; `out_len` must be valid.
 */
enum EvttcStatus evttc_estimate_run(const struct EvttcEstimator *estimator,
                                    const struct EvttcSlice *slice,
                                    const struct EvttcBbox *track,
                                    uintptr_t track_len,
                                    struct EvttcEstimate *out_buf,
                                    uintptr_t cap,
                                    uintptr_t *out_len);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* EVTTC_H */
