/* C interface of the mogp multi-output GP classifier.
 *
 * Link against libmogp_ffi (cdylib or staticlib). All functions are
 * thread-safe; error messages are per-thread.
 */

#ifndef MOGP_H
#define MOGP_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes mirror the mogp CLI exit codes. */
typedef enum MogpStatus {
  MOGP_OK = 0,
  MOGP_INVALID_ARGUMENT = 1,
  MOGP_DATA_ERROR = 2,
  MOGP_NUMERICAL_ERROR = 3,
} MogpStatus;

/* Opaque trained model. */
typedef struct MogpModel MogpModel;

/* Message of the most recent failure on the calling thread. The pointer
 * stays valid until the next failing call on the same thread. */
const char *mogp_last_error(void);

/* Load a model file written by `mogp train`. On success *out_model owns the
 * handle and must be released with mogp_model_free. */
MogpStatus mogp_model_load(const char *path, MogpModel **out_model);

/* Release a model handle. NULL is accepted. */
void mogp_model_free(MogpModel *model);

size_t mogp_model_num_classes(const MogpModel *model);
size_t mogp_model_input_dim(const MogpModel *model);
size_t mogp_model_output_dim(const MogpModel *model);

/* Copy the NUL-terminated name of class `index` into buf (at most buf_len
 * bytes including the terminator). */
MogpStatus mogp_model_class_name(const MogpModel *model, size_t index,
                                 char *buf, size_t buf_len);

/* Classify one instance.
 *
 * inputs:  n_points * input_dim doubles, point-major
 *          (point i starts at inputs[i * input_dim]).
 * outputs: n_points * output_dim doubles, point-major.
 * out_class: receives the winning class index.
 * out_scores: optional buffer of num_classes doubles for the per-class
 *             g-scores; pass NULL to skip.
 */
MogpStatus mogp_predict(const MogpModel *model, const double *inputs,
                        const double *outputs, size_t n_points,
                        size_t *out_class, double *out_scores);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* MOGP_H */
