#ifndef RANKADAPT_H
#define RANKADAPT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RkStatus {
  RK_STATUS_OK = 0,
  RK_STATUS_NULL_ARGUMENT = 1,
  RK_STATUS_INVALID_ARGUMENT = 2,
  RK_STATUS_IO = 3,
  RK_STATUS_FORMAT = 4,
  RK_STATUS_CHECKPOINT = 5,
  RK_STATUS_DIM_MISMATCH = 6,
  RK_STATUS_UNKNOWN_QUERY = 7,
  /**
   * A metric is undefined for the input (fewer than two items or zero
   * variance).
   */
  RK_STATUS_UNDEFINED = 8,
  /**
   * The output buffer is too small; the required length was written.
   */
  RK_STATUS_BUFFER_TOO_SMALL = 9,
  RK_STATUS_PANIC = 10,
  RK_STATUS_INTERNAL = 11,
} RkStatus;

/**
 * An open embedding file.
 */
typedef struct RkDataset RkDataset;

/**
 * A loaded adapter checkpoint.
 */
typedef struct RkModel RkModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failed call on this thread, or an empty
 * string. The pointer stays valid until the next call on this thread.
 */
const char *rk_last_error(void);

/**
 * Opens and validates an embedding file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum RkStatus rk_dataset_open(const char *path, struct RkDataset **out);

/**
 * Releases a dataset. Null is ignored.
 *
 * # Safety
 * `dataset` must come from [`rk_dataset_open`] and not be used afterwards.
 */
void rk_dataset_free(struct RkDataset *dataset);

/**
 * Header dimensions and record counts.
 *
 * # Safety
 * `dataset` must be a live handle; every output pointer must be writable.
 */
enum RkStatus rk_dataset_info(const struct RkDataset *dataset,
                              uint32_t *p,
                              uint32_t *d,
                              uint32_t *t,
                              uint64_t *items,
                              uint32_t *queries);

/**
 * Loads an adapter checkpoint of either precision.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum RkStatus rk_model_load(const char *path, struct RkModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`rk_model_load`] and not be used afterwards.
 */
void rk_model_free(struct RkModel *model);

/**
 * Regression scores for every item, in file order. `len` must equal the
 * item count.
 *
 * # Safety
 * `model` and `dataset` must be live handles; `scores` must have room for
 * `len` values.
 */
enum RkStatus rk_model_score(const struct RkModel *model,
                             const struct RkDataset *dataset,
                             double *scores,
                             size_t len);

/**
 * Items of `query_id` by descending score, ties by ascending item id.
 *
 * `*written` receives the number of ranked items. If `capacity` is smaller
 * the call returns `RK_STATUS_BUFFER_TOO_SMALL` without touching the
 * buffers, so callers can size them and retry.
 *
 * # Safety
 * `model` and `dataset` must be live handles; `item_ids` and `scores` must
 * have room for `capacity` values; `written` must be writable.
 */
enum RkStatus rk_model_rank(const struct RkModel *model,
                            const struct RkDataset *dataset,
                            uint32_t query_id,
                            uint64_t *item_ids,
                            double *scores,
                            size_t capacity,
                            size_t *written);

/**
 * Spearman rank correlation with average ranks for ties.
 *
 * # Safety
 * `x` and `y` must point to `n` readable values; `out` must be writable.
 */
enum RkStatus rk_srcc(const double *x, const double *y, size_t n, double *out);

/**
 * Pearson linear correlation.
 *
 * # Safety
 * As [`rk_srcc`].
 */
enum RkStatus rk_plcc(const double *x, const double *y, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RANKADAPT_H */
