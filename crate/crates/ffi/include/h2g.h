#ifndef H2G_H
#define H2G_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum H2gStatus {
  H2G_STATUS_OK = 0,
  H2G_STATUS_INVALID_INPUT = 1,
  H2G_STATUS_FORMAT = 2,
  H2G_STATUS_IO = 3,
  H2G_STATUS_EMPTY_POPULATION = 4,
  H2G_STATUS_TRAINING_DIVERGED = 5,
  H2G_STATUS_INFERENCE = 6,
  H2G_STATUS_EXECUTOR = 7,
  H2G_STATUS_SERIALIZATION = 8,
  H2G_STATUS_NULL_POINTER = 9,
  H2G_STATUS_BUFFER_TOO_SMALL = 10,
  H2G_STATUS_PANIC = 11,
} H2gStatus;

/**
 * A trained patch classifier loaded from a checkpoint.
 */
typedef struct H2gClassifier H2gClassifier;

/**
 * A frozen standardize, project and nearest-centroid model.
 */
typedef struct H2gClusterModel H2gClusterModel;

/**
 * A loaded HPYR slide pyramid.
 */
typedef struct H2gPyramid H2gPyramid;

/**
 * Pixel counts and scores of one predicted mask against its truth.
 */
typedef struct H2gMetrics {
  uint64_t tp;
  uint64_t fp;
  uint64_t fn_count;
  double recall;
  double precision;
  double dsc;
} H2gMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or an empty string.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *h2g_last_error_message(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum H2gStatus h2g_pyramid_open(const char *path, struct H2gPyramid **out);

/**
 * # Safety
 * `p` must come from `h2g_pyramid_open` and not be used afterwards. Null is ignored.
 */
void h2g_pyramid_free(struct H2gPyramid *p);

/**
 * Channel count (1 or 3), level count and tile edge of the pyramid.
 *
 * # Safety
 * `p` must be a live handle; the out pointers must be valid.
 */
enum H2gStatus h2g_pyramid_info(const struct H2gPyramid *p,
                                uint32_t *channels,
                                uint32_t *levels,
                                uint32_t *tile_size);

/**
 * # Safety
 * `p` must be a live handle; the out pointers must be valid.
 */
enum H2gStatus h2g_pyramid_level_dims(const struct H2gPyramid *p,
                                      size_t level,
                                      uint64_t *width,
                                      uint64_t *height);

/**
 * Copies a `w`×`h` region at `level` into `buf`, row-major and channel
 * interleaved. Pixels outside the image read as white. `buf_len` must be at
 * least `w * h * channels`.
 *
 * # Safety
 * `p` must be a live handle and `buf` must hold `buf_len` writable bytes.
 */
enum H2gStatus h2g_pyramid_read_region(const struct H2gPyramid *p,
                                       size_t level,
                                       int64_t x,
                                       int64_t y,
                                       size_t w,
                                       size_t h,
                                       uint8_t *buf,
                                       size_t buf_len);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum H2gStatus h2g_cluster_model_open(const char *path, struct H2gClusterModel **out);

/**
 * # Safety
 * `m` must come from `h2g_cluster_model_open` and not be used afterwards. Null is ignored.
 */
void h2g_cluster_model_free(struct H2gClusterModel *m);

/**
 * Feature dimension and cluster count.
 *
 * # Safety
 * `m` must be a live handle; the out pointers must be valid.
 */
enum H2gStatus h2g_cluster_model_dims(const struct H2gClusterModel *m, size_t *dim, size_t *k);

/**
 * Assigns `n` feature rows of `dim` values each to their nearest centroid.
 *
 * # Safety
 * `features` must hold `n * dim` doubles and `labels` room for `n` values.
 */
enum H2gStatus h2g_cluster_model_assign(const struct H2gClusterModel *m,
                                        const double *features,
                                        size_t n,
                                        size_t dim,
                                        uint32_t *labels);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum H2gStatus h2g_classifier_open(const char *path, struct H2gClassifier **out);

/**
 * # Safety
 * `c` must come from `h2g_classifier_open` and not be used afterwards. Null is ignored.
 */
void h2g_classifier_free(struct H2gClassifier *c);

/**
 * # Safety
 * `c` must be a live handle; the out pointers must be valid.
 */
enum H2gStatus h2g_classifier_dims(const struct H2gClassifier *c,
                                   size_t *input_dim,
                                   size_t *classes);

/**
 * Softmax class probabilities for `rows` input vectors. `probs` receives
 * `rows * classes` values, row-major.
 *
 * # Safety
 * `inputs` must hold `rows * input_dim` doubles and `probs` `probs_len` doubles.
 */
enum H2gStatus h2g_classifier_forward(const struct H2gClassifier *c,
                                      const double *inputs,
                                      size_t rows,
                                      double *probs,
                                      size_t probs_len);

/**
 * Otsu threshold of a 256-bin histogram; foreground is `value > threshold`.
 *
 * # Safety
 * `hist` must point to 256 counts.
 */
enum H2gStatus h2g_otsu_threshold(const uint64_t *hist, uint8_t *threshold);

/**
 * Mean categorical cross-entropy of row-major probabilities against one-hot targets.
 *
 * # Safety
 * `probs` and `targets` must each hold `rows * classes` doubles.
 */
enum H2gStatus h2g_ce_loss(const double *probs,
                           const double *targets,
                           size_t rows,
                           size_t classes,
                           double *loss);

/**
 * Cluster-weighted cross-entropy: the mean over clusters present in the
 * batch of each cluster's mean cross-entropy. `clusters` holds one id per row.
 *
 * # Safety
 * `probs` and `targets` must each hold `rows * classes` doubles and `clusters` `rows` ids.
 */
enum H2gStatus h2g_cwce_loss(const double *probs,
                             const double *targets,
                             const int64_t *clusters,
                             size_t rows,
                             size_t classes,
                             double *loss);

/**
 * Scores two single-channel `width`×`height` masks; nonzero bytes are foreground.
 *
 * # Safety
 * `pred` and `truth` must each hold `width * height` bytes.
 */
enum H2gStatus h2g_score_slide(const uint8_t *pred,
                               const uint8_t *truth,
                               size_t width,
                               size_t height,
                               struct H2gMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* H2G_H */
