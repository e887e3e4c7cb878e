#ifndef PRISM_H
#define PRISM_H

/* Generated by cbindgen from crates/ffi/src; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call. Category codes match the CLI exit codes.
typedef enum PrismStatus {
  PRISM_STATUS_OK = 0,
  // Error outside the categories below.
  PRISM_STATUS_OTHER = 1,
  // A required pointer argument was NULL.
  PRISM_STATUS_NULL_POINTER = 2,
  PRISM_STATUS_IO = 3,
  PRISM_STATUS_FORMAT = 4,
  PRISM_STATUS_CONFIG = 5,
  PRISM_STATUS_INPUT = 6,
  PRISM_STATUS_NUMERIC = 7,
  PRISM_STATUS_CHECKPOINT = 8,
  // A string argument was not valid UTF-8.
  PRISM_STATUS_INVALID_UTF8 = 9,
  PRISM_STATUS_BUFFER_TOO_SMALL = 10,
  PRISM_STATUS_PANIC = 11,
} PrismStatus;

// A backbone with a classification head.
typedef struct PrismClassifier PrismClassifier;

// A pretrained (or adapted) backbone.
typedef struct PrismModel PrismModel;

// A multichannel recording.
typedef struct PrismRecording PrismRecording;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static NUL-terminated string.
const char *prism_version(void);

// Message of the last failed call on this thread, or NULL after a
// success. Valid until the next call on the same thread.
const char *prism_last_error(void);

// Build a recording from a row-major `n_channels × n_samples` signal.
// A negative `label` means unlabeled.
//
// # Safety
// `channels` points to `n_channels` NUL-terminated strings and `signal` to
// `n_channels * n_samples` doubles.
enum PrismStatus prism_recording_new(const char *subject_id,
                                     const char *const *channels,
                                     size_t n_channels,
                                     double sample_rate_hz,
                                     const double *signal,
                                     size_t n_samples,
                                     int64_t label,
                                     struct PrismRecording **out);

// Load a recording directory, canonicalizing channel names.
//
// # Safety
// `dir` is a NUL-terminated path; `out` is writable.
enum PrismStatus prism_recording_load(const char *dir, struct PrismRecording **out);

// # Safety
// `rec` is a live handle; `dir` is a NUL-terminated path.
enum PrismStatus prism_recording_save(const struct PrismRecording *rec, const char *dir);

// # Safety
// `rec` is NULL or a live handle.
size_t prism_recording_n_channels(const struct PrismRecording *rec);

// # Safety
// `rec` is NULL or a live handle.
size_t prism_recording_n_samples(const struct PrismRecording *rec);

// # Safety
// `rec` is NULL or a live handle.
double prism_recording_sample_rate(const struct PrismRecording *rec);

// Copy the signal, row-major, into `buf` of `len` doubles.
//
// # Safety
// `rec` is a live handle; `buf` holds `len` doubles.
enum PrismStatus prism_recording_copy_signal(const struct PrismRecording *rec,
                                             double *buf,
                                             size_t len);

// # Safety
// `rec` is NULL or a handle not yet freed.
void prism_recording_free(struct PrismRecording *rec);

// Resample, filter, normalize and clip. `pipeline_toml` holds pipeline
// settings; NULL selects the defaults.
//
// # Safety
// `rec` is a live handle; `pipeline_toml` is NULL or NUL-terminated.
enum PrismStatus prism_preprocess(const struct PrismRecording *rec,
                                  const char *pipeline_toml,
                                  struct PrismRecording **out);

// Freshly initialized backbone. `model_toml` holds model settings; NULL
// selects the desk-scale defaults.
//
// # Safety
// `model_toml` is NULL or NUL-terminated; `out` is writable.
enum PrismStatus prism_model_init(const char *model_toml, uint64_t seed, struct PrismModel **out);

// Backbone of any checkpoint (pretraining or adapted).
//
// # Safety
// `path` is NUL-terminated; `out` is writable.
enum PrismStatus prism_model_load(const char *path, struct PrismModel **out);

// # Safety
// `model` is NULL or a live handle.
size_t prism_model_dim(const struct PrismModel *model);

// Number of tokens `rec` yields under the model's tokenizer.
//
// # Safety
// `model` and `rec` are live handles; `out` is writable.
enum PrismStatus prism_model_n_tokens(const struct PrismModel *model,
                                      const struct PrismRecording *rec,
                                      size_t *out);

// Encoder representations of every token, row-major `n_tokens × dim`.
//
// # Safety
// `model` and `rec` are live handles; `buf` holds `len` doubles.
enum PrismStatus prism_model_encode(const struct PrismModel *model,
                                    const struct PrismRecording *rec,
                                    double *buf,
                                    size_t len);

// # Safety
// `model` is NULL or a handle not yet freed.
void prism_model_free(struct PrismModel *model);

// Load an adapted checkpoint as a classifier.
//
// # Safety
// `path` is NUL-terminated; `out` is writable.
enum PrismStatus prism_classifier_load(const char *path, struct PrismClassifier **out);

// # Safety
// `clf` is NULL or a live handle.
size_t prism_classifier_classes(const struct PrismClassifier *clf);

// Class logits of one segment into `buf` of `len` doubles.
//
// # Safety
// `clf` and `rec` are live handles; `buf` holds `len` doubles.
enum PrismStatus prism_classifier_logits(const struct PrismClassifier *clf,
                                         const struct PrismRecording *rec,
                                         double *buf,
                                         size_t len);

// Predicted class of one segment.
//
// # Safety
// `clf` and `rec` are live handles; `out` is writable.
enum PrismStatus prism_classifier_predict(const struct PrismClassifier *clf,
                                          const struct PrismRecording *rec,
                                          size_t *out);

// # Safety
// `clf` is NULL or a handle not yet freed.
void prism_classifier_free(struct PrismClassifier *clf);

// Mean per-class recall over the classes present in `labels`.
//
// # Safety
// `predictions` and `labels` hold `n` values; `out` is writable.
enum PrismStatus prism_balanced_accuracy(const size_t *predictions,
                                         const size_t *labels,
                                         size_t n,
                                         double *out);

// Run a CLI subcommand (`synth`, `preprocess`, `pretrain`, `adapt`,
// `eval`, `sweep`, `report`) with `config_path` (NULL for defaults).
// Progress lines go to standard output.
//
// # Safety
// `config_path` is NULL or NUL-terminated; `command` is NUL-terminated.
enum PrismStatus prism_run(const char *config_path, const char *command);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRISM_H */
