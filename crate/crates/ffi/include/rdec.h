#ifndef RDEC_H
#define RDEC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

typedef enum RdecStatus {
  RDEC_STATUS_OK = 0,
  RDEC_STATUS_NULL_POINTER = 1,
  RDEC_STATUS_INVALID_ARGUMENT = 2,
  RDEC_STATUS_DIMENSION_MISMATCH = 3,
  RDEC_STATUS_CONFIG = 4,
  RDEC_STATUS_IO = 5,
  RDEC_STATUS_PARSE = 6,
  RDEC_STATUS_MODEL = 7,
  RDEC_STATUS_NUMERIC = 8,
  RDEC_STATUS_BUFFER_TOO_SMALL = 9,
  RDEC_STATUS_PANIC = 10,
} RdecStatus;

// Opaque training configuration, initialized to the library defaults.
typedef struct RdecConfig RdecConfig;

// Opaque k-means result.
typedef struct RdecKMeans RdecKMeans;

// Opaque result of a full clustering run.
typedef struct RdecRun RdecRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failure on this thread, or NULL. The pointer
// stays valid until the next `rdec_*` call on the same thread.
const char *rdec_last_error_message(void);

// Frees a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must be NULL or a string returned by this library and not yet freed.
void rdec_string_free(char *s);

// Best-mapping clustering accuracy in [0, 1].
//
// # Safety
// `labels` and `assignments` must point to `n` readable elements; `out_acc` must be writable.
enum RdecStatus rdec_accuracy(const size_t *labels,
                              const size_t *assignments,
                              size_t n,
                              double *out_acc);

// Adjusted Rand index; `n` must be at least 2.
//
// # Safety
// As for [`rdec_accuracy`].
enum RdecStatus rdec_adjusted_rand_index(const size_t *labels,
                                         const size_t *assignments,
                                         size_t n,
                                         double *out_ari);

// Lloyd's k-means with `restarts` seeded random initializations.
//
// # Safety
// `points` must point to `n * dim` readable doubles; `out` must be writable.
enum RdecStatus rdec_kmeans(const double *points,
                            size_t n,
                            size_t dim,
                            size_t k,
                            size_t restarts,
                            size_t max_iter,
                            uint64_t seed,
                            struct RdecKMeans **out);

// # Safety
// `km` must be NULL or a live handle from [`rdec_kmeans`].
double rdec_kmeans_inertia(const struct RdecKMeans *km);

// # Safety
// `km` must be a live handle; `out` must have room for `cap` elements (n needed).
enum RdecStatus rdec_kmeans_assignments(const struct RdecKMeans *km, size_t *out, size_t cap);

// Centroids, row-major `k × dim`.
//
// # Safety
// `km` must be a live handle; `out` must have room for `cap` doubles.
enum RdecStatus rdec_kmeans_centroids(const struct RdecKMeans *km, double *out, size_t cap);

// # Safety
// `km` must be NULL or a handle from [`rdec_kmeans`] not yet freed.
void rdec_kmeans_free(struct RdecKMeans *km);

struct RdecConfig *rdec_config_new(void);

// Sets one option using the key names of the CLI config format
// (for example `"gamma"`, `"tau"`, `"method"`, `"pretrain.optimizer"`).
//
// # Safety
// `cfg` must be a live handle; `key` and `value` must be NUL-terminated strings.
enum RdecStatus rdec_config_set(struct RdecConfig *cfg, const char *key, const char *value);

// # Safety
// `cfg` must be NULL or a handle from [`rdec_config_new`] not yet freed.
void rdec_config_free(struct RdecConfig *cfg);

// Runs the configured method end to end (pretraining included when the
// method needs an autoencoder). `labels` may be NULL; when given, ACC and
// ARI are tracked at every checkpoint.
//
// # Safety
// `data` must point to `n * dim` doubles, `labels` must be NULL or point to
// `n` elements, `cfg` must be a live handle (or NULL for defaults) and `out` writable.
enum RdecStatus rdec_train(const double *data,
                           size_t n,
                           size_t dim,
                           const size_t *labels,
                           size_t k,
                           const struct RdecConfig *cfg,
                           struct RdecRun **out);

// Number of fine-tuning iterations performed (k-means iterations for the k-means methods).
//
// # Safety
// `run` must be NULL or a live handle from [`rdec_train`].
size_t rdec_run_iterations(const struct RdecRun *run);

// True when the run stopped on the assignment-change threshold.
//
// # Safety
// As for [`rdec_run_iterations`].
bool rdec_run_converged(const struct RdecRun *run);

// Hard assignments, one per input row.
//
// # Safety
// `run` must be a live handle; `out` must have room for `cap` elements.
enum RdecStatus rdec_run_assignments(const struct RdecRun *run, size_t *out, size_t cap);

// Final embedding, row-major `n × latent_dim`; writes the column count to `out_cols`.
// Fails with `RDEC_STATUS_INVALID_ARGUMENT` for raw k-means, which has no embedding.
//
// # Safety
// `run` must be a live handle; `out` must have room for `cap` doubles; `out_cols` writable.
enum RdecStatus rdec_run_embedding(const struct RdecRun *run,
                                   double *out,
                                   size_t cap,
                                   size_t *out_cols);

// The run report as a JSON string; free it with [`rdec_string_free`]. NULL on failure.
//
// # Safety
// `run` must be NULL or a live handle.
char *rdec_run_report_json(const struct RdecRun *run);

// # Safety
// `run` must be NULL or a handle from [`rdec_train`] not yet freed.
void rdec_run_free(struct RdecRun *run);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RDEC_H */
