/* Generated by cbindgen. Do not edit. */

#ifndef HFMCA_H
#define HFMCA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Values accepted as `selection` by [`hfmca_build_graph`] and
// [`hfmca_encoder_embed`].
typedef enum HfmcaSelection {
  HFMCA_SELECTION_RAW = 0,
  HFMCA_SELECTION_ABSOLUTE = 1,
} HfmcaSelection;

// Result code of every fallible call.
typedef enum HfmcaStatus {
  HFMCA_STATUS_OK = 0,
  HFMCA_STATUS_NULL_POINTER = 1,
  HFMCA_STATUS_INVALID_INPUT = 2,
  HFMCA_STATUS_SHAPE_MISMATCH = 3,
  HFMCA_STATUS_NON_FINITE = 4,
  HFMCA_STATUS_SINGULAR = 5,
  HFMCA_STATUS_IO = 6,
  HFMCA_STATUS_FORMAT = 7,
  HFMCA_STATUS_BUFFER_TOO_SMALL = 8,
  HFMCA_STATUS_INTERNAL = 9,
} HfmcaStatus;

// Trained graph encoder loaded from a checkpoint. Opaque to C.
typedef struct HfmcaEncoder HfmcaEncoder;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `len - 1` bytes) and returns the full message
// length in bytes. Pass a null `buf` to query the length.
//
// # Safety
//
// `buf` must be null or valid for `len` bytes.
size_t hfmca_last_error_message(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *hfmca_version(void);

// `floor(n^2 / 400)`.
size_t hfmca_default_edge_budget(size_t n_regions);

// Pearson correlation of `n_regions x n_timepoints` series into an
// `n_regions x n_regions` buffer.
//
// # Safety
//
// Every pointer must be null or valid for the element counts given by
// the size arguments.
enum HfmcaStatus hfmca_pearson_connectivity(const double *series,
                                            size_t n_regions,
                                            size_t n_timepoints,
                                            double *out);

// Keeps the `edge_budget` strongest pairs of an `n x n` connectivity
// matrix. Writes `2 * n_edges` node indices (`i < j` per pair) to
// `out_edges`, `n_edges` weights to `out_weights` and the edge count to
// `out_n_edges`. Both buffers must hold at least `capacity` edges.
//
// # Safety
//
// Every pointer must be null or valid for the element counts given by
// the size arguments.
enum HfmcaStatus hfmca_build_graph(const double *conn,
                                   size_t n_regions,
                                   size_t edge_budget,
                                   uint32_t selection,
                                   uint32_t *out_edges,
                                   double *out_weights,
                                   size_t capacity,
                                   size_t *out_n_edges);

// Hierarchical loss of an `n x d_low` low-level batch against an
// `n x d_high` high-level batch. `trace_scaled` selects a ridge of
// `ridge_epsilon * tr(R) / d` instead of `ridge_epsilon`.
//
// # Safety
//
// Every pointer must be null or valid for the element counts given by
// the size arguments.
enum HfmcaStatus hfmca_hfmca_loss(const double *z_low,
                                  const double *z_high,
                                  size_t n,
                                  size_t d_low,
                                  size_t d_high,
                                  double ridge_epsilon,
                                  bool trace_scaled,
                                  double *out_loss);

// Two-view loss between `n x k` batches `f` and `g`.
//
// # Safety
//
// Every pointer must be null or valid for the element counts given by
// the size arguments.
enum HfmcaStatus hfmca_fmca_loss(const double *f,
                                 const double *g,
                                 size_t n,
                                 size_t k,
                                 double ridge_epsilon,
                                 bool trace_scaled,
                                 double *out_loss);

// Loads the encoder of a checkpoint file. Projection heads, if present,
// are dropped. Release the handle with [`hfmca_encoder_free`].
//
// # Safety
//
// `path` must be null or a NUL-terminated string; `out` must be null or
// writable.
enum HfmcaStatus hfmca_encoder_load(const char *path, struct HfmcaEncoder **out);

// Releases an encoder. Null is ignored.
//
// # Safety
//
// `encoder` must be null or a handle from [`hfmca_encoder_load`] that
// has not been freed.
void hfmca_encoder_free(struct HfmcaEncoder *encoder);

// Node feature width the encoder expects (the atlas size), or 0 for null.
//
// # Safety
//
// `encoder` must be null or a live handle.
size_t hfmca_encoder_input_dim(const struct HfmcaEncoder *encoder);

// Length of a graph embedding, or 0 for null.
//
// # Safety
//
// `encoder` must be null or a live handle.
size_t hfmca_encoder_embedding_dim(const struct HfmcaEncoder *encoder);

// Builds the graph of an `n x n` connectivity matrix with the given edge
// budget and writes its embedding to `out` (`out_len` must be at least the
// embedding width).
//
// # Safety
//
// Every pointer must be null or valid for the element counts given by
// the size arguments.
enum HfmcaStatus hfmca_encoder_embed(const struct HfmcaEncoder *encoder,
                                     const double *conn,
                                     size_t n_regions,
                                     size_t edge_budget,
                                     uint32_t selection,
                                     double *out,
                                     size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HFMCA_H */
