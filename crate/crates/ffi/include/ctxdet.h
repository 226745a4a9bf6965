#ifndef CTXDET_H
#define CTXDET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum CtxdetStatus {
  CTXDET_STATUS_OK = 0,
  /**
   * A required pointer argument was NULL.
   */
  CTXDET_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  CTXDET_STATUS_INVALID_UTF8 = 2,
  /**
   * Rejected input: bad configuration value, caption without `[MASK]`,
   * or a word outside the vocabulary.
   */
  CTXDET_STATUS_INVALID_INPUT = 3,
  CTXDET_STATUS_IO = 4,
  /**
   * Malformed file contents (checkpoint, CODE JSON, PNG, TOML).
   */
  CTXDET_STATUS_FORMAT = 5,
  /**
   * Any other failure inside the library, including divergence.
   */
  CTXDET_STATUS_RUNTIME = 6,
  /**
   * A panic was caught at the boundary.
   */
  CTXDET_STATUS_PANIC = 7,
} CtxdetStatus;

/**
 * CODE split with its rasters loaded.
 */
typedef struct CtxdetCorpus CtxdetCorpus;

/**
 * Planar RGB raster with values in `[0, 1]`.
 */
typedef struct CtxdetImage CtxdetImage;

/**
 * Trained model for inference.
 */
typedef struct CtxdetModel CtxdetModel;

/**
 * Model plus optimizer and sampling state.
 */
typedef struct CtxdetTrainer CtxdetTrainer;

/**
 * Loss summary of one optimization step.
 */
typedef struct CtxdetStepReport {
  uint64_t step;
  double lr;
  double grad_norm;
  double total;
  double cls;
  double box_l1;
  double box_giou;
  double lm;
  double noun;
  size_t assigned;
  size_t lm_positions;
} CtxdetStepReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL after a success.
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *ctxdet_last_error(void);

/**
 * Library version as a static string.
 */
const char *ctxdet_version(void);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void ctxdet_string_free(char *s);

/**
 * Reads an 8-bit RGB or RGBA PNG.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CtxdetStatus ctxdet_image_load_png(const char *path, struct CtxdetImage **out);

/**
 * Builds an image from `3 * height * width` planar values (all of channel
 * 0, then 1, then 2, each row-major).
 *
 * # Safety
 * `data` must point to `3 * height * width` readable doubles.
 */
enum CtxdetStatus ctxdet_image_from_planar(const double *data,
                                           size_t height,
                                           size_t width,
                                           struct CtxdetImage **out);

/**
 * # Safety
 * `image` must come from this library and not have been freed already.
 */
void ctxdet_image_free(struct CtxdetImage *image);

/**
 * Loads the model stored in a checkpoint.
 *
 * # Safety
 * `checkpoint` must be a NUL-terminated string; `out` must be writable.
 */
enum CtxdetStatus ctxdet_model_load(const char *checkpoint, struct CtxdetModel **out);

/**
 * # Safety
 * `model` must come from this library and not have been freed already.
 */
void ctxdet_model_free(struct CtxdetModel *model);

/**
 * Fills every `[MASK]` of `caption` with its top-`k` nouns and locates each.
 * Writes a JSON array with one object per mask.
 *
 * # Safety
 * Handles must be live; strings NUL-terminated; `out_json` writable.
 */
enum CtxdetStatus ctxdet_model_cloze(const struct CtxdetModel *model,
                                     const struct CtxdetImage *image,
                                     const char *caption,
                                     size_t k,
                                     char **out_json);

/**
 * Generates a caption and locates the tokens whose noun score reaches
 * `threshold`.
 *
 * # Safety
 * Handles must be live; `out_json` writable.
 */
enum CtxdetStatus ctxdet_model_caption(const struct CtxdetModel *model,
                                       const struct CtxdetImage *image,
                                       size_t max_len,
                                       double threshold,
                                       char **out_json);

/**
 * Answers `question` and locates the answered objects.
 *
 * # Safety
 * Handles must be live; strings NUL-terminated; `out_json` writable.
 */
enum CtxdetStatus ctxdet_model_qa(const struct CtxdetModel *model,
                                  const struct CtxdetImage *image,
                                  const char *question,
                                  size_t max_len,
                                  double threshold,
                                  char **out_json);

/**
 * Asks whether each comma-separated class appears and locates the present
 * ones.
 *
 * # Safety
 * Handles must be live; strings NUL-terminated; `out_json` writable.
 */
enum CtxdetStatus ctxdet_model_ov(const struct CtxdetModel *model,
                                  const struct CtxdetImage *image,
                                  const char *classes,
                                  char **out_json);

/**
 * Loads `code.json` from a split directory together with its rasters.
 *
 * # Safety
 * `split_dir` must be a NUL-terminated string; `out` must be writable.
 */
enum CtxdetStatus ctxdet_corpus_load(const char *split_dir, struct CtxdetCorpus **out);

/**
 * Number of samples, or 0 for NULL.
 *
 * # Safety
 * `corpus` must be NULL or a live handle.
 */
size_t ctxdet_corpus_len(const struct CtxdetCorpus *corpus);

/**
 * # Safety
 * `corpus` must come from this library and not have been freed already.
 */
void ctxdet_corpus_free(struct CtxdetCorpus *corpus);

/**
 * Fresh trainer from a TOML run configuration (NULL for defaults) and the
 * vocabulary written by `ctxdet synth`.
 *
 * # Safety
 * `config` must be NULL or NUL-terminated; `vocab` NUL-terminated; `out`
 * writable.
 */
enum CtxdetStatus ctxdet_trainer_new(const char *config,
                                     const char *vocab,
                                     struct CtxdetTrainer **out);

/**
 * Restores a trainer, optimizer state included, from a checkpoint.
 *
 * # Safety
 * `checkpoint` must be NUL-terminated; `out` writable.
 */
enum CtxdetStatus ctxdet_trainer_load(const char *checkpoint, struct CtxdetTrainer **out);

/**
 * Runs one optimization step on the next batch of `corpus`.
 *
 * # Safety
 * Handles must be live; `report` must be NULL or writable.
 */
enum CtxdetStatus ctxdet_trainer_step(struct CtxdetTrainer *trainer,
                                      const struct CtxdetCorpus *corpus,
                                      struct CtxdetStepReport *report);

/**
 * Completed steps, or 0 for NULL.
 *
 * # Safety
 * `trainer` must be NULL or a live handle.
 */
uint64_t ctxdet_trainer_steps_done(const struct CtxdetTrainer *trainer);

/**
 * # Safety
 * `trainer` must be live; `path` NUL-terminated.
 */
enum CtxdetStatus ctxdet_trainer_save(const struct CtxdetTrainer *trainer, const char *path);

/**
 * Evaluates the trainer's model on `corpus` with default settings and
 * writes the report as JSON.
 *
 * # Safety
 * Handles must be live; `out_json` writable.
 */
enum CtxdetStatus ctxdet_trainer_evaluate(const struct CtxdetTrainer *trainer,
                                          const struct CtxdetCorpus *corpus,
                                          char **out_json);

/**
 * # Safety
 * `trainer` must come from this library and not have been freed already.
 */
void ctxdet_trainer_free(struct CtxdetTrainer *trainer);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CTXDET_H */
