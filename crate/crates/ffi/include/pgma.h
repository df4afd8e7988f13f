#ifndef PGMA_H
#define PGMA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes.
 */
typedef enum PgmaStatus {
  PGMA_STATUS_OK = 0,
  /*
   Invalid configuration or option string.
   */
  PGMA_STATUS_CONFIG = 1,
  /*
   Unreadable, malformed or mis-shaped input data.
   */
  PGMA_STATUS_DATA = 2,
  /*
   Non-finite gradients or diverged training.
   */
  PGMA_STATUS_NUMERIC = 3,
  /*
   Checkpoint could not be parsed or does not match.
   */
  PGMA_STATUS_CHECKPOINT = 4,
  /*
   Null pointer, bad UTF-8 or out-of-range argument.
   */
  PGMA_STATUS_INVALID_ARGUMENT = 5,
  /*
   The requested value does not exist (e.g. metrics without labels).
   */
  PGMA_STATUS_UNAVAILABLE = 6,
  /*
   Internal panic caught at the boundary.
   */
  PGMA_STATUS_INTERNAL = 7,
} PgmaStatus;

/*
 A trained detector.
 */
typedef struct PgmaDetector PgmaDetector;

/*
 Output of `pgma_detector_score`.
 */
typedef struct PgmaScores PgmaScores;

/*
 A multivariate series with optional labels.
 */
typedef struct PgmaSeries PgmaSeries;

/*
 Precision, recall and F1 at the chosen threshold.
 */
typedef struct PgmaMetrics {
  double precision;
  double recall;
  double f1;
  double threshold;
  size_t true_positives;
  size_t false_positives;
  size_t true_negatives;
  size_t false_negatives;
} PgmaMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Last error message of this thread, or null. Valid until the next
 failing call on the same thread.
 */
const char *pgma_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *pgma_version(void);

/*
 Reads a CSV file. `label_column` may be null (a column named `label` is
 still picked up).

 # Safety
 String arguments must be NUL-terminated; `out` must be writable.
 */
enum PgmaStatus pgma_series_from_csv(const char *path,
                                     const char *label_column,
                                     struct PgmaSeries **out);

/*
 Builds a series from sensor-major values (`n_sensors * len` doubles,
 sensor 0 first). `labels` may be null, else it holds `len` bytes of 0/1.

 # Safety
 `values` must point to `n_sensors * len` doubles and `labels`, when not
 null, to `len` bytes.
 */
enum PgmaStatus pgma_series_from_values(const double *values,
                                        size_t n_sensors,
                                        size_t len,
                                        const uint8_t *labels,
                                        struct PgmaSeries **out);

/*
 Synthetic labeled benchmark split into a clean training part and a
 test part with injected anomalies.

 # Safety
 Both output pointers must be writable.
 */
enum PgmaStatus pgma_series_synthetic(size_t n_sensors,
                                      size_t length,
                                      size_t period,
                                      double anomaly_rate,
                                      uint64_t seed,
                                      double train_fraction,
                                      struct PgmaSeries **out_train,
                                      struct PgmaSeries **out_test);

/*
 Writes the series (with its label column, if any) as CSV.

 # Safety
 `series` must be a live handle and `path` NUL-terminated.
 */
enum PgmaStatus pgma_series_save_csv(const struct PgmaSeries *series, const char *path);

/*
 # Safety
 `series` must be null or a live handle.
 */
size_t pgma_series_n_sensors(const struct PgmaSeries *series);

/*
 # Safety
 `series` must be null or a live handle.
 */
size_t pgma_series_len(const struct PgmaSeries *series);

/*
 # Safety
 `series` must be null or a handle not yet freed.
 */
void pgma_series_free(struct PgmaSeries *series);

/*
 Dominant period of the min-max normalized series.

 # Safety
 `series` must be a live handle; `out_period` writable.
 */
enum PgmaStatus pgma_detect_period(const struct PgmaSeries *series, size_t *out_period);

/*
 Trains a detector. `config_json` may be null for defaults; otherwise
 it uses the same schema as the command-line config file.

 # Safety
 `train` must be a live handle, `config_json` null or NUL-terminated,
 `out` writable.
 */
enum PgmaStatus pgma_detector_train(const struct PgmaSeries *train,
                                    const char *config_json,
                                    struct PgmaDetector **out);

/*
 # Safety
 `path` must be NUL-terminated and `out` writable.
 */
enum PgmaStatus pgma_detector_load(const char *path, struct PgmaDetector **out);

/*
 # Safety
 `detector` must be a live handle and `path` NUL-terminated.
 */
enum PgmaStatus pgma_detector_save(const struct PgmaDetector *detector, const char *path);

/*
 Period the detector was fitted with, or 0 for a null handle.

 # Safety
 `detector` must be null or a live handle.
 */
size_t pgma_detector_period(const struct PgmaDetector *detector);

/*
 # Safety
 `detector` must be null or a handle not yet freed.
 */
void pgma_detector_free(struct PgmaDetector *detector);

/*
 Scores a series. `threshold` is `max-validation`, `best-f1` or
 `fixed:<value>`; null means `max-validation`. `ma_window` 0 means the
 default of 3.

 # Safety
 Handles must be live, `threshold` null or NUL-terminated, `out` writable.
 */
enum PgmaStatus pgma_detector_score(const struct PgmaDetector *detector,
                                    const struct PgmaSeries *series,
                                    size_t ma_window,
                                    const char *threshold,
                                    struct PgmaScores **out);

/*
 Number of scored timestamps.

 # Safety
 `scores` must be null or a live handle.
 */
size_t pgma_scores_len(const struct PgmaScores *scores);

/*
 # Safety
 `scores` must be null or a live handle.
 */
double pgma_scores_threshold(const struct PgmaScores *scores);

/*
 Copies the smoothed anomaly scores into `buf` (capacity `cap`).

 # Safety
 `buf` must have room for `cap` doubles.
 */
enum PgmaStatus pgma_scores_smoothed(const struct PgmaScores *scores, double *buf, size_t cap);

/*
 Copies the predicted 0/1 labels into `buf` (capacity `cap`).

 # Safety
 `buf` must have room for `cap` bytes.
 */
enum PgmaStatus pgma_scores_labels(const struct PgmaScores *scores, uint8_t *buf, size_t cap);

/*
 Copies the timestamps of the scored positions into `buf`.

 # Safety
 `buf` must have room for `cap` values.
 */
enum PgmaStatus pgma_scores_timestamps(const struct PgmaScores *scores, size_t *buf, size_t cap);

/*
 Point-wise (`point_adjust = false`) or point-adjusted metrics. Returns
 `Unavailable` when the scored series had no labels.

 # Safety
 `scores` must be a live handle and `out` writable.
 */
enum PgmaStatus pgma_scores_metrics(const struct PgmaScores *scores,
                                    bool point_adjust,
                                    struct PgmaMetrics *out);

/*
 Writes the score trace CSV (`t,ano,smoothed,label_pred,label_true,top_sensor`).

 # Safety
 `scores` must be a live handle and `path` NUL-terminated.
 */
enum PgmaStatus pgma_scores_save_csv(const struct PgmaScores *scores, const char *path);

/*
 # Safety
 `scores` must be null or a handle not yet freed.
 */
void pgma_scores_free(struct PgmaScores *scores);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PGMA_H */
