#ifndef BEAMLOC_H
#define BEAMLOC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum BeamlocStatus {
  BEAMLOC_STATUS_OK = 0,
  BEAMLOC_STATUS_NULL_POINTER = 1,
  BEAMLOC_STATUS_INVALID_ARGUMENT = 2,
  BEAMLOC_STATUS_OUT_OF_BOUNDS = 3,
  BEAMLOC_STATUS_SHAPE_MISMATCH = 4,
  BEAMLOC_STATUS_FORMAT = 5,
  BEAMLOC_STATUS_IO = 6,
  BEAMLOC_STATUS_BRIDGE = 7,
  BEAMLOC_STATUS_PANIC = 8,
} BeamlocStatus;

typedef struct BeamlocFeatureMap BeamlocFeatureMap;

// Survivor levels and heat map for one class of one scene.
typedef struct BeamlocResult BeamlocResult;

typedef struct BeamlocScene BeamlocScene;

// Rectangle in pixels or grid cells, depending on the call.
typedef struct BeamlocRect {
  size_t x;
  size_t y;
  size_t w;
  size_t h;
} BeamlocRect;

typedef struct BeamlocSearchParams {
  size_t grid;
  double beta;
  size_t beam_width;
  size_t beam_depth;
  size_t target_class;
  bool use_rescoring;
  double alpha;
} BeamlocSearchParams;

typedef struct BeamlocNode {
  // Crop in image pixels.
  struct BeamlocRect rect;
  // Box in the parent's lattice.
  struct BeamlocRect grid_box;
  size_t level;
  double score;
  // Index into the previous level, or -1 for the root.
  ptrdiff_t parent;
} BeamlocNode;

typedef struct BeamlocPoint {
  size_t x;
  size_t y;
  double confidence;
  bool no_response;
} BeamlocPoint;

typedef struct BeamlocDetection {
  struct BeamlocRect rect;
  double score;
} BeamlocDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *beamloc_version(void);

// Message for the last failed call on this thread, or NULL. The pointer stays
// valid until the next failing call on the same thread.
const char *beamloc_last_error(void);

void beamloc_clear_error(void);

// Copies `len` values laid out `[row][col][channel]` into a new map.
//
// # Safety
// `values` must point to `len` readable doubles; `out` must be writable.
enum BeamlocStatus beamloc_fmap_new(size_t grid,
                                    size_t channels,
                                    const double *values,
                                    size_t len,
                                    struct BeamlocFeatureMap **out);

// # Safety
// `map` must be NULL or a handle from this library not yet freed.
void beamloc_fmap_free(struct BeamlocFeatureMap *map);

// Grid side length, or 0 for NULL.
//
// # Safety
// `map` must be NULL or a live handle.
size_t beamloc_fmap_grid_size(const struct BeamlocFeatureMap *map);

// # Safety
// `map` must be NULL or a live handle.
size_t beamloc_fmap_channels(const struct BeamlocFeatureMap *map);

// Borrowed view of the values; valid while `map` lives.
//
// # Safety
// `map` must be NULL or a live handle; `len` must be NULL or writable.
const double *beamloc_fmap_values(const struct BeamlocFeatureMap *map, size_t *len);

// Crops `gbox` out of `map` and resizes it back to the full lattice.
//
// # Safety
// `map` must be a live handle; `out` must be writable.
enum BeamlocStatus beamloc_fmap_truncate(const struct BeamlocFeatureMap *map,
                                         struct BeamlocRect gbox,
                                         struct BeamlocFeatureMap **out);

// Maps a grid box onto an image of `width × height` pixels.
//
// # Safety
// `out` must be writable.
enum BeamlocStatus beamloc_backproject(struct BeamlocRect gbox,
                                       size_t grid,
                                       size_t width,
                                       size_t height,
                                       struct BeamlocRect *out);

// Intersection over union of two pixel rectangles.
double beamloc_iou(struct BeamlocRect a, struct BeamlocRect b);

// Parses a scene from its JSON form (the files under `scenes/`).
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum BeamlocStatus beamloc_scene_from_json(const char *json, struct BeamlocScene **out);

// # Safety
// `scene` must be NULL or a live handle.
void beamloc_scene_free(struct BeamlocScene *scene);

struct BeamlocSearchParams beamloc_search_params_default(void);

// Beam search for one class over a synthetic scene. Rescoring, when
// requested, uses the identity co-occurrence matrix.
//
// # Safety
// `scene` and `params` must be live; `out` must be writable.
enum BeamlocStatus beamloc_localize_scene(const struct BeamlocScene *scene,
                                          const struct BeamlocSearchParams *params,
                                          struct BeamlocResult **out);

// # Safety
// `result` must be NULL or a live handle.
void beamloc_result_free(struct BeamlocResult *result);

// Levels reached, root included; 0 for NULL.
//
// # Safety
// `result` must be NULL or a live handle.
size_t beamloc_result_num_levels(const struct BeamlocResult *result);

// Survivors at `level`; 0 when out of range.
//
// # Safety
// `result` must be NULL or a live handle.
size_t beamloc_result_level_len(const struct BeamlocResult *result, size_t level);

// # Safety
// `result` must be NULL or a live handle.
size_t beamloc_result_extractions(const struct BeamlocResult *result);

// # Safety
// `result` must be live; `out` must be writable.
enum BeamlocStatus beamloc_result_node(const struct BeamlocResult *result,
                                       size_t level,
                                       size_t index,
                                       struct BeamlocNode *out);

// Borrowed row-major heat values; valid while `result` lives.
//
// # Safety
// `result` must be NULL or live; `width`/`height` must be NULL or writable.
const double *beamloc_result_heat(const struct BeamlocResult *result,
                                  size_t *width,
                                  size_t *height);

// # Safety
// `result` must be live; `out` must be writable.
enum BeamlocStatus beamloc_result_point(const struct BeamlocResult *result,
                                        struct BeamlocPoint *out);

// Thresholds the heat map at `theta` and writes up to `capacity` boxes.
// `count` always receives the total, so a first call with `capacity = 0`
// sizes the buffer.
//
// # Safety
// `result` must be live; `dets` must hold `capacity` entries (or be NULL
// when `capacity` is 0); `count` must be writable.
enum BeamlocStatus beamloc_result_detections(const struct BeamlocResult *result,
                                             double theta,
                                             struct BeamlocDetection *dets,
                                             size_t capacity,
                                             size_t *count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BEAMLOC_H */
