/* C interface to the nucleus-aware unpaired pretraining toolkit. */

#ifndef NUP_H
#define NUP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code for every fallible call.
 */
typedef enum NupStatus {
  /**
   * Success; out parameters are valid.
   */
  NUP_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  NUP_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  NUP_STATUS_UTF8_ERROR = 2,
  /**
   * Arguments were structurally invalid (bad config, bad shapes).
   */
  NUP_STATUS_INVALID_ARGUMENT = 3,
  /**
   * Synthesis failed; see `nup_last_error_message`.
   */
  NUP_STATUS_SYNTH_FAILED = 4,
  /**
   * A metric could not be computed; see `nup_last_error_message`.
   */
  NUP_STATUS_METRICS_FAILED = 5,
  /**
   * An internal invariant failed and the call was aborted safely.
   */
  NUP_STATUS_INTERNAL = 6,
} NupStatus;

/**
 * An instance label map prepared for metric computation. Opaque.
 */
typedef struct NupLabeling NupLabeling;

/**
 * A synthesized nuclear mask image with its annotations. Opaque.
 */
typedef struct NupMaskImage NupMaskImage;

/**
 * Pools panoptic-quality statistics over many images. Opaque.
 */
typedef struct NupPqAccumulator NupPqAccumulator;

/**
 * Placement accounting for one synthesized image (or a sum of them).
 */
typedef struct NupImageStats {
  uint64_t placed;
  uint64_t epithelial;
  uint64_t other;
  uint64_t dropped_overlap;
  uint64_t dropped_degenerate;
  uint64_t dropped_out_of_bounds;
} NupImageStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static nul-terminated string.
 */
const char *nup_version(void);

/**
 * Description of the most recent failure on this thread, or an empty
 * string. The pointer stays valid until the next failing call on the
 * same thread; copy it if you need to keep it.
 */
const char *nup_last_error_message(void);

/**
 * Free a string returned through a `char**` out parameter. Null is a
 * no-op.
 *
 * # Safety
 * `s` must be a pointer previously returned by this library's
 * string-producing functions, not yet freed.
 */
void nup_string_free(char *s);

/**
 * Synthesize one mask image.
 *
 * `config_json` is a JSON object of synthesis settings, or null for
 * the defaults. `seed` and `index` select the deterministic stream:
 * the same triple of config, seed, and index always yields the same
 * image. On success `*out` owns the result; free it with
 * [`nup_mask_image_free`].
 *
 * # Safety
 * `config_json` and `image_id`, when non-null, must point to
 * nul-terminated strings. `out` must be a valid pointer.
 */
enum NupStatus nup_synthesize(const char *config_json,
                              uint64_t seed,
                              uint64_t index,
                              const char *image_id,
                              struct NupMaskImage **out);

/**
 * Report the image's height and width in pixels.
 *
 * # Safety
 * `img` must be a live handle from [`nup_synthesize`]; `height` and
 * `width` must be valid pointers.
 */
enum NupStatus nup_mask_image_size(const struct NupMaskImage *img,
                                   uintptr_t *height,
                                   uintptr_t *width);

/**
 * Borrow the raw pixels: row-major height x width x 3 (epithelial
 * fill, other fill, boundary), one byte per channel. The pointer
 * belongs to the handle and dies with it.
 *
 * # Safety
 * `img` must be a live handle; `data` and `len` must be valid
 * pointers. Do not use `*data` after freeing `img`.
 */
enum NupStatus nup_mask_image_pixels(const struct NupMaskImage *img,
                                     const uint8_t **data,
                                     uintptr_t *len);

/**
 * Report how many instances the image contains.
 *
 * # Safety
 * `img` must be a live handle; `count` must be a valid pointer.
 */
enum NupStatus nup_mask_image_instance_count(const struct NupMaskImage *img, uintptr_t *count);

/**
 * Copy the image's placement statistics into `stats`.
 *
 * # Safety
 * `img` must be a live handle; `stats` must be a valid pointer.
 */
enum NupStatus nup_mask_image_stats(const struct NupMaskImage *img, struct NupImageStats *stats);

/**
 * Render the per-instance annotations as a JSON document, the same
 * schema the CLI writes next to each mask image. Free the string with
 * [`nup_string_free`].
 *
 * # Safety
 * `img` must be a live handle; `out` must be a valid pointer.
 */
enum NupStatus nup_mask_image_annotations_json(const struct NupMaskImage *img, char **out);

/**
 * Destroy a mask image handle. Null is a no-op.
 *
 * # Safety
 * `img` must be a handle from [`nup_synthesize`] that has not been
 * freed already.
 */
void nup_mask_image_free(struct NupMaskImage *img);

/**
 * Build a labeling from a row-major `height x width` map of instance
 * ids (0 background, instances numbered contiguously from 1).
 *
 * `classes` may be null for a class-agnostic labeling; otherwise it
 * must hold one class id per instance (`classes_len` of them), and the
 * labeling becomes eligible for panoptic quality.
 *
 * # Safety
 * `labels` must point to `height * width` readable `uint32_t`s;
 * `classes`, when non-null, to `classes_len` readable bytes; `out`
 * must be a valid pointer.
 */
enum NupStatus nup_labeling_new(const uint32_t *labels,
                                uintptr_t height,
                                uintptr_t width,
                                const uint8_t *classes,
                                uintptr_t classes_len,
                                struct NupLabeling **out);

/**
 * Report how many instances a labeling contains.
 *
 * # Safety
 * `lab` must be a live handle; `count` must be a valid pointer.
 */
enum NupStatus nup_labeling_instance_count(const struct NupLabeling *lab, uintptr_t *count);

/**
 * Destroy a labeling handle. Null is a no-op.
 *
 * # Safety
 * `lab` must be a handle from [`nup_labeling_new`] that has not been
 * freed already.
 */
void nup_labeling_free(struct NupLabeling *lab);

/**
 * Aggregated Jaccard index of `pred` against `gt`.
 *
 * # Safety
 * `pred` and `gt` must be live labeling handles of equal shape;
 * `value` must be a valid pointer.
 */
enum NupStatus nup_aji(const struct NupLabeling *pred, const struct NupLabeling *gt, double *value);

/**
 * Detection F1 with greedy IoU matching at `iou_threshold`.
 *
 * # Safety
 * `pred` and `gt` must be live labeling handles of equal shape;
 * `value` must be a valid pointer.
 */
enum NupStatus nup_detection_f1(const struct NupLabeling *pred,
                                const struct NupLabeling *gt,
                                double iou_threshold,
                                double *value);

/**
 * Object-level Dice coefficient.
 *
 * # Safety
 * `pred` and `gt` must be live labeling handles of equal shape;
 * `value` must be a valid pointer.
 */
enum NupStatus nup_object_dice(const struct NupLabeling *pred,
                               const struct NupLabeling *gt,
                               double *value);

/**
 * Object-level Hausdorff distance in pixels.
 *
 * # Safety
 * `pred` and `gt` must be live labeling handles of equal shape;
 * `value` must be a valid pointer.
 */
enum NupStatus nup_object_hausdorff(const struct NupLabeling *pred,
                                    const struct NupLabeling *gt,
                                    double *value);

/**
 * Create an empty panoptic-quality accumulator; free it with
 * [`nup_pq_accumulator_free`].
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum NupStatus nup_pq_accumulator_new(struct NupPqAccumulator **out);

/**
 * Pool one image pair into the accumulator. Both labelings need
 * per-instance classes (see [`nup_labeling_new`]) unless they are
 * empty.
 *
 * # Safety
 * `acc`, `pred`, and `gt` must be live handles.
 */
enum NupStatus nup_pq_accumulator_add(struct NupPqAccumulator *acc,
                                      const struct NupLabeling *pred,
                                      const struct NupLabeling *gt);

/**
 * Mean panoptic quality over the classes seen so far. Fails when
 * nothing has been accumulated.
 *
 * # Safety
 * `acc` must be a live handle; `value` must be a valid pointer.
 */
enum NupStatus nup_pq_accumulator_mpq(const struct NupPqAccumulator *acc, double *value);

/**
 * Destroy an accumulator handle. Null is a no-op.
 *
 * # Safety
 * `acc` must be a handle from [`nup_pq_accumulator_new`] that has not
 * been freed already.
 */
void nup_pq_accumulator_free(struct NupPqAccumulator *acc);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NUP_H */
