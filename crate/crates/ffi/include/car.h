#ifndef CAR_H
#define CAR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define CAR_MODE_BASELINE 0

#define CAR_MODE_CAR 1

#define CAR_MODE_NEIGHBOR_VOTE 2

#define CAR_MECHANISM_GAT 0

#define CAR_MECHANISM_GATV2 1

#define CAR_MECHANISM_TRANSFORMER 2

typedef enum CarStatus {
  CAR_STATUS_OK = 0,
  CAR_STATUS_NULL_POINTER = 1,
  CAR_STATUS_INVALID_ARGUMENT = 2,
  CAR_STATUS_DATA_ERROR = 3,
  CAR_STATUS_NUMERIC_ERROR = 4,
  CAR_STATUS_BUFFER_TOO_SMALL = 5,
  CAR_STATUS_PANIC = 6,
} CarStatus;

/**
 * Opaque graph handle.
 */
typedef struct CarGraph CarGraph;

/**
 * Opaque model handle.
 */
typedef struct CarModel CarModel;

/**
 * Training settings; `mode` and `mechanism` take the `CAR_MODE_*` and
 * `CAR_MECHANISM_*` values.
 */
typedef struct CarTrainConfig {
  uint32_t mode;
  uint32_t mechanism;
  size_t layers;
  size_t heads;
  size_t hidden;
  double lambda;
  size_t rounds;
  double temperature;
  double lr;
  size_t batch_size;
  size_t max_epochs;
  size_t patience;
  uint64_t seed;
} CarTrainConfig;

/**
 * Test-split results of a training run; `mean_kl` is NaN when undefined.
 */
typedef struct CarMetrics {
  double test_accuracy;
  double test_loss;
  double mean_kl;
  size_t epochs_run;
  double wall_clock_seconds;
} CarMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t car_last_error_message(char *buf, size_t len);

/**
 * Fill `out` with the default training settings.
 *
 * # Safety
 * `out` must be null or valid for writes.
 */
enum CarStatus car_train_config_default(struct CarTrainConfig *out);

/**
 * Load a dataset directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum CarStatus car_graph_load(const char *dir, struct CarGraph **out);

/**
 * Generate a synthetic node classification graph.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum CarStatus car_graph_synthetic(size_t num_nodes,
                                   size_t num_classes,
                                   double homophily,
                                   double mean_degree,
                                   size_t feature_dim,
                                   uint64_t seed,
                                   struct CarGraph **out);

/**
 * # Safety
 * `g` must be null or a handle from this library not yet freed.
 */
void car_graph_free(struct CarGraph *g);

/**
 * Number of nodes, or 0 for a null handle.
 *
 * # Safety
 * `g` must be null or a live graph handle.
 */
size_t car_graph_num_nodes(const struct CarGraph *g);

/**
 * Number of directed edges, or 0 for a null handle.
 *
 * # Safety
 * `g` must be null or a live graph handle.
 */
size_t car_graph_num_edges(const struct CarGraph *g);

/**
 * Number of classes, or 0 for a null handle.
 *
 * # Safety
 * `g` must be null or a live graph handle.
 */
size_t car_graph_num_classes(const struct CarGraph *g);

/**
 * Fraction of edges joining same-label nodes.
 *
 * # Safety
 * `g` must be a live graph handle and `out` valid for writes.
 */
enum CarStatus car_graph_homophily(const struct CarGraph *g, double *out);

/**
 * Initialise and train a node classifier on `g`, returning the
 * best-validation model and, if `metrics` is non-null, its test metrics.
 *
 * # Safety
 * `g` must be a live graph handle, `config` readable, `out` writable and
 * `metrics` null or writable.
 */
enum CarStatus car_train(const struct CarGraph *g,
                         const struct CarTrainConfig *config,
                         struct CarModel **out,
                         struct CarMetrics *metrics);

/**
 * Write row-major class probabilities for every node of `g` into `probs`,
 * which must hold `num_nodes * num_classes` values.
 *
 * # Safety
 * Handles must be live and `probs` must point to `len` writable doubles.
 */
enum CarStatus car_model_predict(const struct CarModel *m,
                                 const struct CarGraph *g,
                                 double *probs,
                                 size_t len);

/**
 * # Safety
 * `m` must be a live model handle and `path` a NUL-terminated string.
 */
enum CarStatus car_model_save(const struct CarModel *m, const char *path);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for writes.
 */
enum CarStatus car_model_load(const char *path, struct CarModel **out);

/**
 * # Safety
 * `m` must be null or a handle from this library not yet freed.
 */
void car_model_free(struct CarModel *m);

/**
 * Causal effect of an edge removal from the entity's loss with and without
 * the edge, its in-degree and the temperature.
 */
double car_causal_effect(double base_loss, double post_loss, size_t degree, double temperature);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAR_H */
