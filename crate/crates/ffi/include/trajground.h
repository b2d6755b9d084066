#ifndef TRAJGROUND_H
#define TRAJGROUND_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum TgStatus {
  TG_STATUS_OK = 0,
  /**
   * A required pointer argument was NULL.
   */
  TG_STATUS_NULL_ARGUMENT = 1,
  /**
   * An argument was out of range or malformed.
   */
  TG_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The output buffer is too small; the required length was written.
   */
  TG_STATUS_BUFFER_TOO_SMALL = 3,
  /**
   * A file could not be read or parsed.
   */
  TG_STATUS_IO = 4,
  /**
   * The requested nodes are not connected.
   */
  TG_STATUS_NO_PATH = 5,
  /**
   * The model rejected its input.
   */
  TG_STATUS_MODEL = 6,
  /**
   * A panic was caught at the boundary.
   */
  TG_STATUS_INTERNAL = 7,
} TgStatus;

/**
 * Trained destination predictor.
 */
typedef struct TgModel TgModel;

/**
 * Navigation world: graph, scene and view features.
 */
typedef struct TgWorld TgWorld;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failing call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *tg_last_error(void);

/**
 * Generates a synthetic world with `node_count` nodes and default scene
 * parameters.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum TgStatus tg_world_generate(size_t node_count, uint64_t seed, struct TgWorld **out);

/**
 * Loads a world saved by the `gen-world` command.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer to
 * writable storage for one handle.
 */
enum TgStatus tg_world_load(const char *path, struct TgWorld **out);

/**
 * # Safety
 * `world` must be NULL or a handle returned by this library and not yet freed.
 */
void tg_world_free(struct TgWorld *world);

/**
 * Number of nodes, or 0 for a NULL handle.
 *
 * # Safety
 * `world` must be NULL or a live handle.
 */
size_t tg_world_node_count(const struct TgWorld *world);

/**
 * Shortest-path distance in meters between nodes `a` and `b`.
 *
 * # Safety
 * `world` must be a live handle and `out` a valid pointer.
 */
enum TgStatus tg_world_geodesic(const struct TgWorld *world, size_t a, size_t b, double *out);

/**
 * Applies the return correction to the trajectory `nodes[0..len]` stopped
 * at `step`: the walk continues back along the shortest path to the node
 * at `step`. Writes the corrected node sequence to `out_nodes` and its
 * length to `out_len`. When `out_cap` is too small nothing but `out_len`
 * is written and `TG_STATUS_BUFFER_TOO_SMALL` is returned.
 *
 * # Safety
 * `nodes` must point to `len` readable indices, `out_nodes` to `out_cap`
 * writable ones (it may be NULL when `out_cap` is 0), `out_len` must be valid.
 */
enum TgStatus tg_correct_return(const struct TgWorld *world,
                                const size_t *nodes,
                                size_t len,
                                size_t step,
                                size_t *out_nodes,
                                size_t out_cap,
                                size_t *out_len);

/**
 * Loads a checkpoint written by the `train` command.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TgStatus tg_model_load(const char *path, struct TgModel **out);

/**
 * # Safety
 * `model` must be NULL or a handle returned by this library and not yet freed.
 */
void tg_model_free(struct TgModel *model);

/**
 * Longest trajectory the model accepts, or 0 for a NULL handle.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t tg_model_max_steps(const struct TgModel *model);

/**
 * Scores every step of the trajectory `nodes[0..len]` as the destination
 * described by the landmark instruction for `target` (drawn with
 * `instruction_seed`). Writes `len` probabilities to `probs` and the
 * selected step to `step`.
 *
 * # Safety
 * Both handles must be live, `nodes` must point to `len` readable indices,
 * `probs` to `len` writable doubles and `step` must be valid.
 */
enum TgStatus tg_model_predict(const struct TgModel *model,
                               const struct TgWorld *world,
                               const size_t *nodes,
                               size_t len,
                               size_t target,
                               uint64_t instruction_seed,
                               double *probs,
                               size_t *step);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRAJGROUND_H */
