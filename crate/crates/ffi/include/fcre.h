#ifndef FCRE_H
#define FCRE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FcreStatus {
  FCRE_STATUS_OK = 0,
  FCRE_STATUS_NULL_ARGUMENT = 1,
  FCRE_STATUS_INVALID_UTF8 = 2,
  FCRE_STATUS_CONFIG = 3,
  FCRE_STATUS_PARSE = 4,
  FCRE_STATUS_SHAPE = 5,
  FCRE_STATUS_DEGENERATE = 6,
  FCRE_STATUS_NUMERIC = 7,
  FCRE_STATUS_INDEX = 8,
  FCRE_STATUS_PROTOCOL = 9,
  FCRE_STATUS_IO = 10,
  // Output buffer too small; the required length was still written.
  FCRE_STATUS_BUFFER_TOO_SMALL = 11,
  FCRE_STATUS_PANIC = 12,
} FcreStatus;

// Data, configuration and (once pretrained or loaded) encoder weights.
typedef struct FcreExperiment FcreExperiment;

// One method trained task by task on an experiment's stream.
typedef struct FcreLearner FcreLearner;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *fcre_version(void);

// Message of the last failed call on this thread, or NULL. Release with
// `fcre_string_free`.
char *fcre_last_error(void);

// # Safety
// `s` must be NULL or a string returned by this library, not yet freed.
void fcre_string_free(char *s);

// Parse an experiment config (JSON text) and build its data. Relative
// paths resolve against the working directory.
//
// # Safety
// `config_json` must be a NUL-terminated string; `out` must be writable.
enum FcreStatus fcre_experiment_new(const char *config_json, struct FcreExperiment **out);

// # Safety
// `exp` must be NULL or a live handle from `fcre_experiment_new`.
void fcre_experiment_free(struct FcreExperiment *exp);

// # Safety
// `exp` must be a live handle and `out` writable.
enum FcreStatus fcre_experiment_task_count(const struct FcreExperiment *exp, size_t *out);

// # Safety
// `exp` must be a live handle and `out` writable.
enum FcreStatus fcre_experiment_method_count(const struct FcreExperiment *exp, size_t *out);

// Pretrain encoder weights as configured, replacing any loaded ones.
//
// # Safety
// `exp` must be a live handle.
enum FcreStatus fcre_experiment_pretrain(struct FcreExperiment *exp);

// # Safety
// `exp` must be a live handle; `path` a NUL-terminated string.
enum FcreStatus fcre_experiment_load_checkpoint(struct FcreExperiment *exp, const char *path);

// # Safety
// `exp` must be a live handle; `path` a NUL-terminated string.
enum FcreStatus fcre_experiment_save_checkpoint(const struct FcreExperiment *exp, const char *path);

// Run method `method_index` over the whole stream with `seed`; writes the
// run result as JSON to `out_json`.
//
// # Safety
// `exp` must be a live handle and `out_json` writable.
enum FcreStatus fcre_run(const struct FcreExperiment *exp,
                         size_t method_index,
                         uint64_t seed,
                         char **out_json);

// Start a learner for method `method_index` from the experiment's weights.
//
// # Safety
// `exp` must be a live handle and `out` writable.
enum FcreStatus fcre_learner_new(const struct FcreExperiment *exp,
                                 size_t method_index,
                                 uint64_t seed,
                                 struct FcreLearner **out);

// # Safety
// `learner` must be NULL or a live handle from `fcre_learner_new`.
void fcre_learner_free(struct FcreLearner *learner);

// Number of tasks trained so far.
//
// # Safety
// `learner` must be a live handle and `out` writable.
enum FcreStatus fcre_learner_tasks_done(const struct FcreLearner *learner, size_t *out);

// Train the next task of the stream.
//
// # Safety
// `learner` must be a live handle.
enum FcreStatus fcre_learner_train_next(struct FcreLearner *learner);

// Accuracy on each seen task's test set, over all seen relations. Writes
// `tasks_done` values to `out` when `capacity` allows; `out_len` always
// receives the required length.
//
// # Safety
// `learner` must be a live handle, `out` valid for `capacity` doubles
// (may be NULL when `capacity` is 0), and `out_len` writable.
enum FcreStatus fcre_learner_evaluate(const struct FcreLearner *learner,
                                      double *out,
                                      size_t capacity,
                                      size_t *out_len);

// InfoNCE bound for a batch of paired row-major features: `gphi` is
// `batch x dim_g`, `glm` is `batch x dim_l`, `w` is `dim_g x dim_l`.
//
// # Safety
// Each pointer must be valid for the stated number of doubles and
// `out_value` writable.
enum FcreStatus fcre_info_nce(const double *gphi,
                              const double *glm,
                              const double *w,
                              size_t batch,
                              size_t dim_g,
                              size_t dim_l,
                              double tau,
                              double *out_value);

// Accuracy drop between the first and last task.
double fcre_accuracy_drop(double first, double last);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FCRE_H */
