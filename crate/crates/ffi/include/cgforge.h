#ifndef CGFORGE_H
#define CGFORGE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status returned by every fallible call.
 */
typedef enum CgfStatus {
  CGF_STATUS_OK = 0,
  CGF_STATUS_NULL_POINTER = 1,
  CGF_STATUS_INVALID_UTF8 = 2,
  CGF_STATUS_INVALID_SPEC = 3,
  CGF_STATUS_INVALID_IRREPS = 4,
  CGF_STATUS_BUDGET_TOO_SMALL = 5,
  CGF_STATUS_SHAPE = 6,
  CGF_STATUS_INVALID_GRAPH = 7,
  CGF_STATUS_PANIC = 8,
} CgfStatus;

/**
 * Edge aggregation order for graph convolution.
 */
typedef enum CgfConvMode {
  CGF_CONV_MODE_DETERMINISTIC = 0,
  CGF_CONV_MODE_ATOMIC = 1,
} CgfConvMode;

/**
 * Compiled tensor product for fp64 and fp32.
 */
typedef struct CgfEngine CgfEngine;

/**
 * Graph in CSR edge order.
 */
typedef struct CgfGraph CgfGraph;

/**
 * Feature dimensions of a compiled problem.
 */
typedef struct CgfDims {
  size_t dim_x;
  size_t dim_y;
  size_t dim_z;
  size_t weights;
} CgfDims;

/**
 * Global-memory traffic and arithmetic for one call.
 */
typedef struct CgfCounters {
  uint64_t loads;
  uint64_t stores;
  uint64_t flops;
} CgfCounters;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *cgf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cgf_version(void);

/**
 * Compiles a problem given as JSON under a scratch budget in words.
 * `workers` of 0 means one worker.
 *
 * # Safety
 * `spec_json` must be a NUL-terminated string and `out` a writable pointer.
 */
enum CgfStatus cgf_engine_create(const char *spec_json,
                                 size_t budget_words,
                                 size_t workers,
                                 struct CgfEngine **out);

/**
 * Releases an engine. Null is ignored.
 *
 * # Safety
 * `e` must come from `cgf_engine_create` and not be used afterwards.
 */
void cgf_engine_free(struct CgfEngine *e);

/**
 * Writes the feature dimensions of the compiled problem.
 *
 * # Safety
 * `e` must be a live engine and `out` writable.
 */
enum CgfStatus cgf_engine_dims(const struct CgfEngine *e, struct CgfDims *out);

/**
 * Sets the worker count used by later calls. 0 means one worker.
 *
 * # Safety
 * `e` must be a live engine not used concurrently.
 */
enum CgfStatus cgf_engine_set_workers(struct CgfEngine *e, size_t workers);

/**
 * Serialized schedule JSON. Free with `cgf_string_free`.
 *
 * # Safety
 * `e` must be a live engine.
 */
char *cgf_engine_schedule_json(const struct CgfEngine *e);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void cgf_string_free(char *s);

/**
 * z (rows x dim_z) from x (rows x dim_x), y (rows x dim_y), w (rows x weights).
 * `counters` may be null.
 *
 * # Safety
 * Buffers must hold the documented number of elements.
 */
enum CgfStatus cgf_forward_f64(const struct CgfEngine *e,
                               size_t rows,
                               const double *x,
                               const double *y,
                               const double *w,
                               double *z,
                               struct CgfCounters *counters);

/**
 * Single-precision forward.
 *
 * # Safety
 * Buffers must hold the documented number of elements.
 */
enum CgfStatus cgf_forward_f32(const struct CgfEngine *e,
                               size_t rows,
                               const float *x,
                               const float *y,
                               const float *w,
                               float *z,
                               struct CgfCounters *counters);

/**
 * Gradients gx, gy, gw of <gz, z> with the shapes of x, y, w.
 *
 * # Safety
 * Buffers must hold the documented number of elements.
 */
enum CgfStatus cgf_backward_f64(const struct CgfEngine *e,
                                size_t rows,
                                const double *x,
                                const double *y,
                                const double *w,
                                const double *gz,
                                double *gx,
                                double *gy,
                                double *gw,
                                struct CgfCounters *counters);

/**
 * Single-precision backward.
 *
 * # Safety
 * Buffers must hold the documented number of elements.
 */
enum CgfStatus cgf_backward_f32(const struct CgfEngine *e,
                                size_t rows,
                                const float *x,
                                const float *y,
                                const float *w,
                                const float *gz,
                                float *gx,
                                float *gy,
                                float *gw,
                                struct CgfCounters *counters);

/**
 * Double backward. Inputs da, db, dc are upstream gradients of the
 * backward outputs gx, gy, gw. Outputs dx, dy, dw, dgz have the shapes
 * of x, y, w, gz.
 *
 * # Safety
 * Buffers must hold the documented number of elements.
 */
enum CgfStatus cgf_double_backward_f64(const struct CgfEngine *e,
                                       size_t rows,
                                       const double *x,
                                       const double *y,
                                       const double *w,
                                       const double *gz,
                                       const double *da,
                                       const double *db,
                                       const double *dc,
                                       double *dx,
                                       double *dy,
                                       double *dw,
                                       double *dgz,
                                       struct CgfCounters *counters);

/**
 * Builds a graph from `edge_count` (receiver, sender) pairs stored as
 * `2 * edge_count` consecutive indices. Edge order is kept.
 *
 * # Safety
 * `edges` must hold `2 * edge_count` elements and `out` be writable.
 */
enum CgfStatus cgf_graph_create(size_t nodes,
                                const size_t *edges,
                                size_t edge_count,
                                struct CgfGraph **out);

/**
 * Releases a graph. Null is ignored.
 *
 * # Safety
 * `g` must come from `cgf_graph_create` and not be used afterwards.
 */
void cgf_graph_free(struct CgfGraph *g);

/**
 * Number of edges in the graph.
 *
 * # Safety
 * `g` must be a live graph or null.
 */
size_t cgf_graph_edge_count(const struct CgfGraph *g);

/**
 * Writes the permutation that sorts edges by (sender, receiver) into
 * `perm` (edge_count elements).
 *
 * # Safety
 * `perm` must hold `edge_count` elements.
 */
enum CgfStatus cgf_graph_transpose_permutation(const struct CgfGraph *g, size_t *perm);

/**
 * Graph convolution: node_z[i] += TP(node_x[j], edge_y[e], edge_w[e]) for
 * every edge e = (i, j). node_x is nodes x dim_x, edge_y is edges x dim_y,
 * edge_w is edges x weights, node_z is nodes x dim_z.
 *
 * # Safety
 * Buffers must hold the documented number of elements.
 */
enum CgfStatus cgf_conv_forward_f64(const struct CgfEngine *e,
                                    const struct CgfGraph *g,
                                    const double *node_x,
                                    const double *edge_y,
                                    const double *edge_w,
                                    double *node_z,
                                    enum CgfConvMode conv_mode);

/**
 * Gradients of <g_node_z, node_z> for the graph convolution. `perm` is
 * the transpose permutation of the graph.
 *
 * # Safety
 * Buffers must hold the documented number of elements.
 */
enum CgfStatus cgf_conv_backward_f64(const struct CgfEngine *e,
                                     const struct CgfGraph *g,
                                     const size_t *perm,
                                     const double *node_x,
                                     const double *edge_y,
                                     const double *edge_w,
                                     const double *g_node_z,
                                     double *g_node_x,
                                     double *g_edge_y,
                                     double *g_edge_w,
                                     enum CgfConvMode conv_mode);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CGFORGE_H */
