/* C interface to the advrej defended-classifier runtime. */

#ifndef ADVREJ_H
#define ADVREJ_H

/* Generated by cbindgen from advrej-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every API call.
 */
typedef enum AdvrejStatus {
  ADVREJ_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  ADVREJ_STATUS_NULL_ARGUMENT = 1,
  /**
   * The bundle or a referenced file could not be read.
   */
  ADVREJ_STATUS_IO = 2,
  /**
   * The bundle or a referenced file is malformed.
   */
  ADVREJ_STATUS_PARSE = 3,
  /**
   * Input dimension does not match the classifier.
   */
  ADVREJ_STATUS_DIMENSION = 4,
  /**
   * Invalid argument value (e.g. non-UTF-8 path).
   */
  ADVREJ_STATUS_INVALID_ARGUMENT = 5,
  /**
   * Unexpected internal failure.
   */
  ADVREJ_STATUS_INTERNAL = 6,
} AdvrejStatus;

/**
 * Opaque classifier handle.
 */
typedef struct AdvrejClassifier AdvrejClassifier;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Load a defended-classifier bundle (`bundle.txt` plus the model files it
 * references by relative path) and return an owned handle through `out`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` must be a valid
 * pointer. On success the handle must be released with
 * [`advrej_classifier_free`].
 */
enum AdvrejStatus advrej_classifier_load(const char *path, struct AdvrejClassifier **out);

/**
 * Release a handle returned by [`advrej_classifier_load`].
 *
 * # Safety
 * `clf` must be a handle from [`advrej_classifier_load`] that has not been
 * freed yet; null is tolerated.
 */
void advrej_classifier_free(struct AdvrejClassifier *clf);

/**
 * Expected input dimension of the classifier; 0 when `clf` is null.
 *
 * # Safety
 * `clf` must be a live handle or null.
 */
size_t advrej_classifier_input_dim(const struct AdvrejClassifier *clf);

/**
 * Number of classes (excluding the reject class); 0 when `clf` is null.
 *
 * # Safety
 * `clf` must be a live handle or null.
 */
size_t advrej_classifier_class_count(const struct AdvrejClassifier *clf);

/**
 * Classify one sample. Writes the predicted class to `out_label` (`-1`
 * when the sample is rejected as adversarial/off-manifold) and, when
 * `out_scores` is non-null, the `class_count + 1` extended scores with the
 * reject score at index 0.
 *
 * # Safety
 * `clf` must be a live handle. `x` must point to `dim` readable doubles.
 * `out_label` must be valid; `out_scores`, when non-null, must have room
 * for `class_count + 1` doubles.
 */
enum AdvrejStatus advrej_classifier_decide(const struct AdvrejClassifier *clf,
                                           const double *x,
                                           size_t dim,
                                           int *out_label,
                                           double *out_scores);

/**
 * Total reference prototypes across the classifier's detector components,
 * the quantity that dominates per-query inference cost.
 *
 * # Safety
 * `clf` must be a live handle or null.
 */
size_t advrej_classifier_prototype_total(const struct AdvrejClassifier *clf);

/**
 * Static toolkit version string.
 */
const char *advrej_version(void);

/**
 * Static description of a status code.
 */
const char *advrej_status_message(enum AdvrejStatus status);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADVREJ_H */
