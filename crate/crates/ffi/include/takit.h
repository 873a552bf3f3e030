#ifndef TAKIT_H
#define TAKIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TakitStatus {
  TAKIT_STATUS_OK = 0,
  TAKIT_STATUS_NULL_POINTER = 1,
  TAKIT_STATUS_INVALID_UTF8 = 2,
  TAKIT_STATUS_INVALID_ARGUMENT = 3,
  TAKIT_STATUS_PARSE_ERROR = 4,
  TAKIT_STATUS_BUFFER_TOO_SMALL = 5,
  TAKIT_STATUS_PANIC = 99,
} TakitStatus;

typedef enum TakitCoordConvention {
  TAKIT_COORD_CONVENTION_XYXY_ABS = 0,
  TAKIT_COORD_CONVENTION_YXYX_ABS = 1,
  TAKIT_COORD_CONVENTION_XYXY_NORM01 = 2,
  TAKIT_COORD_CONVENTION_XYXY_REL1000 = 3,
} TakitCoordConvention;

typedef enum TakitDirection {
  TAKIT_DIRECTION_R2T = 0,
  TAKIT_DIRECTION_T2R = 1,
} TakitDirection;

/**
 * Mask decoder parameters.
 */
typedef struct TakitCqmd TakitCqmd;

/**
 * Accumulates per-query outcomes and pools them into scores.
 */
typedef struct TakitEvaluator TakitEvaluator;

typedef struct TakitScores {
  double acc_r2t;
  double precision_t2r;
  double recall_t2r;
  double f1_t2r;
  double overall;
  uint64_t r2t_queries;
  uint64_t t2r_queries;
} TakitScores;

typedef struct TakitNoiseProfile {
  double recall;
  double precision;
  double cer;
  double e_del_hat;
  double e_ins_hat;
} TakitNoiseProfile;

typedef struct TakitModeProbs {
  double p_del;
  double p_jit;
  double p_txt;
} TakitModeProbs;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *takit_version(void);

/**
 * Message for the last failed call on this thread, or NULL. The pointer is
 * valid until the next call into the library from the same thread.
 */
const char *takit_last_error(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library, not yet freed.
 */
void takit_string_free(char *s);

/**
 * # Safety
 * `a` and `b` point to four doubles each; `out` is writable.
 */
enum TakitStatus takit_iou(const double *a, const double *b, double *out);

/**
 * Converts model-interface coordinates to an absolute `x_min, y_min, x_max,
 * y_max` box.
 *
 * # Safety
 * `coords` points to four doubles; `out` to four writable doubles.
 */
enum TakitStatus takit_to_canonical(const double *coords,
                                    enum TakitCoordConvention convention,
                                    uint32_t width,
                                    uint32_t height,
                                    double *out);

/**
 * Region-to-text normalization. Free the result with `takit_string_free`.
 *
 * # Safety
 * `s` is a NUL-terminated string; `out` is writable.
 */
enum TakitStatus takit_normalize_r2t(const char *s, char **out);

/**
 * Text-to-region merge key. Free the result with `takit_string_free`.
 *
 * # Safety
 * `s` is a NUL-terminated string; `out` is writable.
 */
enum TakitStatus takit_canonicalize_t2r(const char *s, char **out);

/**
 * Parses a raw model response with a built-in interface profile and writes
 * the parsed prediction as JSON. A response that cannot be parsed is not an
 * error: the JSON then has `parse_ok: false` and a `failure` reason.
 *
 * # Safety
 * String arguments are NUL-terminated; `out_json` is writable.
 */
enum TakitStatus takit_parse_prediction(const char *profile,
                                        const char *raw,
                                        enum TakitDirection direction,
                                        uint32_t width,
                                        uint32_t height,
                                        char **out_json);

/**
 * # Safety
 * `out` is writable. Free the handle with `takit_evaluator_free`.
 */
enum TakitStatus takit_evaluator_new(double iou_threshold, struct TakitEvaluator **out);

/**
 * # Safety
 * `ev` is NULL or a handle from `takit_evaluator_new`, not yet freed.
 */
void takit_evaluator_free(struct TakitEvaluator *ev);

/**
 * Adds a region-to-text query. A NULL `predicted` counts as a failed parse.
 *
 * # Safety
 * `ev` is a live handle; strings are NUL-terminated.
 */
enum TakitStatus takit_evaluator_add_r2t(struct TakitEvaluator *ev,
                                         const char *category,
                                         const char *predicted,
                                         const char *ground_truth);

/**
 * Adds a text-to-region query. `predicted` and `ground_truth` hold `n * 4`
 * doubles.
 *
 * # Safety
 * `ev` is a live handle; arrays hold the stated number of boxes.
 */
enum TakitStatus takit_evaluator_add_t2r(struct TakitEvaluator *ev,
                                         const char *category,
                                         const double *predicted,
                                         size_t n_predicted,
                                         const double *ground_truth,
                                         size_t n_ground_truth);

/**
 * Pooled scores over every query added so far, in percent.
 *
 * # Safety
 * `ev` is a live handle; `out` is writable.
 */
enum TakitStatus takit_evaluator_scores(const struct TakitEvaluator *ev, struct TakitScores *out);

/**
 * Full report with per-category scores as JSON.
 *
 * # Safety
 * `ev` is a live handle; `out_json` is writable.
 */
enum TakitStatus takit_evaluator_report_json(const struct TakitEvaluator *ev, char **out_json);

/**
 * Corruption-mode probabilities from OCR engine statistics.
 *
 * # Safety
 * `profile` is readable; `out` is writable.
 */
enum TakitStatus takit_spi_mode_probs(const struct TakitNoiseProfile *profile,
                                      struct TakitModeProbs *out);

/**
 * Jitters a box inside a `width x height` image. `degenerate` (optional) is
 * set when every attempt collapsed and the original box was returned.
 *
 * # Safety
 * `bbox` holds four doubles; `out` four writable doubles.
 */
enum TakitStatus takit_spi_jitter_box(const double *bbox,
                                      uint32_t width,
                                      uint32_t height,
                                      uint64_t seed,
                                      double *out,
                                      bool *degenerate);

/**
 * Loads decoder parameters from the JSON parameter-file format.
 *
 * # Safety
 * `json` is NUL-terminated; `out` is writable.
 */
enum TakitStatus takit_cqmd_from_json(const char *json, struct TakitCqmd **out);

/**
 * Random parameters with hidden size `d` (even) and feed-forward size `d_ff`.
 *
 * # Safety
 * `out` is writable.
 */
enum TakitStatus takit_cqmd_random(size_t d, size_t d_ff, uint64_t seed, struct TakitCqmd **out);

/**
 * # Safety
 * `h` is NULL or a live handle.
 */
void takit_cqmd_free(struct TakitCqmd *h);

/**
 * # Safety
 * `h` is a live handle; `d` and `d_ff` are writable.
 */
enum TakitStatus takit_cqmd_dims(const struct TakitCqmd *h, size_t *d, size_t *d_ff);

/**
 * Decodes a mask from final-layer hidden states.
 *
 * `hidden` is row-major `rows x d`. The three index arrays partition the rows
 * into image, query and answer tokens; image rows are the `grid_h x grid_w`
 * patch grid in row-major order. The mask (`4*grid_h x 4*grid_w`, row-major)
 * is written to `mask_out`, which must hold at least that many doubles.
 *
 * # Safety
 * Arrays hold the stated number of elements; `mask_out` is writable.
 */
enum TakitStatus takit_cqmd_forward(const struct TakitCqmd *h,
                                    const double *hidden,
                                    size_t rows,
                                    const size_t *idx_img,
                                    size_t n_img,
                                    const size_t *idx_q,
                                    size_t n_q,
                                    const size_t *idx_a,
                                    size_t n_a,
                                    size_t grid_h,
                                    size_t grid_w,
                                    double *mask_out,
                                    size_t mask_len);

/**
 * Renders the de-stylized mask of `text` inside `bbox` and returns it as
 * run lengths (starting with a background run) over the row-major
 * `width x height` image. Release with `takit_rle_free`.
 *
 * # Safety
 * `text` is NUL-terminated; `bbox` holds four doubles; outputs are writable.
 */
enum TakitStatus takit_render_mask_rle(const char *text,
                                       const double *bbox,
                                       uint32_t width,
                                       uint32_t height,
                                       uint32_t **out_rle,
                                       size_t *out_len);

/**
 * # Safety
 * `rle` and `len` come from one `takit_render_mask_rle` call.
 */
void takit_rle_free(uint32_t *rle, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TAKIT_H */
