#ifndef SPUR_H
#define SPUR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Deviance variants accepted by the `variant` parameters.
 */
typedef enum SpurDevianceVariant {
  SPUR_DEVIANCE_VARIANT_SPUR = 0,
  SPUR_DEVIANCE_VARIANT_L1S = 1,
  SPUR_DEVIANCE_VARIANT_L1 = 2,
  SPUR_DEVIANCE_VARIANT_L2 = 3,
} SpurDevianceVariant;

/**
 * Result of every fallible call.
 */
typedef enum SpurStatus {
  SPUR_STATUS_OK = 0,
  SPUR_STATUS_NULL_POINTER = 1,
  SPUR_STATUS_INVALID_ARGUMENT = 2,
  SPUR_STATUS_SHAPE = 3,
  SPUR_STATUS_CONFIG = 4,
  SPUR_STATUS_CONTRACT = 5,
  SPUR_STATUS_INTEGRITY = 6,
  SPUR_STATUS_ABORTED = 7,
  SPUR_STATUS_IO = 8,
  SPUR_STATUS_PANIC = 9,
} SpurStatus;

/**
 * Binary pruning mask.
 */
typedef struct SpurMask SpurMask;

/**
 * Dense row-major matrix of doubles.
 */
typedef struct SpurMatrix SpurMatrix;

typedef struct SpurPruningSchedule {
  double v_initial;
  double v_final;
  size_t t_i;
  size_t ramp_steps;
  size_t cadence;
  size_t total_steps;
} SpurPruningSchedule;

typedef struct SpurLambdaSchedule {
  double lambda_final;
  size_t t_i;
  size_t ramp_steps;
} SpurLambdaSchedule;

typedef struct SpurSurvivorStats {
  double avg;
  double std;
  /**
   * Percent.
   */
  double cv;
} SpurSurvivorStats;

typedef struct SpurGridScore {
  double row_score;
  double col_score;
  double grid;
} SpurGridScore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread, or NULL after a
 * successful call. The pointer stays valid until the next call on the same
 * thread.
 */
const char *spur_last_error(void);

/**
 * Creates a `rows x cols` matrix from `rows * cols` row-major values.
 *
 * # Safety
 * `data` must point to `rows * cols` readable doubles and `out` must be writable.
 */
enum SpurStatus spur_matrix_new(size_t rows,
                                size_t cols,
                                const double *data,
                                struct SpurMatrix **out);

/**
 * Releases a matrix. NULL is ignored.
 *
 * # Safety
 * `m` must come from this library and not have been freed.
 */
void spur_matrix_free(struct SpurMatrix *m);

/**
 * Row count, or 0 for NULL.
 *
 * # Safety
 * `m` must be NULL or a live matrix handle.
 */
size_t spur_matrix_rows(const struct SpurMatrix *m);

/**
 * Column count, or 0 for NULL.
 *
 * # Safety
 * `m` must be NULL or a live matrix handle.
 */
size_t spur_matrix_cols(const struct SpurMatrix *m);

/**
 * Copies the row-major values into `out`, which holds `len` doubles.
 *
 * # Safety
 * `m` must be a live handle and `out` must point to `len` writable doubles.
 */
enum SpurStatus spur_matrix_copy_data(const struct SpurMatrix *m, double *out, size_t len);

/**
 * Expected magnitude of `w` under row/column independence.
 *
 * # Safety
 * `w` must be a live handle and `out` writable.
 */
enum SpurStatus spur_expected_magnitude(const struct SpurMatrix *w, struct SpurMatrix **out);

/**
 * Mean deviance of `w` for the given [`SpurDevianceVariant`] value.
 *
 * # Safety
 * `w` must be a live handle and `out` writable.
 */
enum SpurStatus spur_deviance(const struct SpurMatrix *w, uint32_t variant, double *out);

/**
 * Mean deviance over `n` target matrices.
 *
 * # Safety
 * `targets` must point to `n` live matrix handles and `out` must be writable.
 */
enum SpurStatus spur_regularization_loss(const struct SpurMatrix *const *targets,
                                         size_t n,
                                         uint32_t variant,
                                         double *out);

/**
 * Scheduled density at step `t`.
 *
 * # Safety
 * `schedule` must be readable and `out` writable.
 */
enum SpurStatus spur_density_at(size_t t, const struct SpurPruningSchedule *schedule, double *out);

/**
 * Regularization weight at step `t`.
 *
 * # Safety
 * `schedule` must be readable and `out` writable.
 */
enum SpurStatus spur_lambda_at(size_t t, const struct SpurLambdaSchedule *schedule, double *out);

/**
 * Mask keeping the `round(v * rows * cols)` largest magnitudes of `w`.
 *
 * # Safety
 * `w` must be a live handle and `out` writable.
 */
enum SpurStatus spur_compute_mask(const struct SpurMatrix *w, double v, struct SpurMask **out);

/**
 * Releases a mask. NULL is ignored.
 *
 * # Safety
 * `m` must come from this library and not have been freed.
 */
void spur_mask_free(struct SpurMask *m);

/**
 * Row count, or 0 for NULL.
 *
 * # Safety
 * `m` must be NULL or a live mask handle.
 */
size_t spur_mask_rows(const struct SpurMask *m);

/**
 * Column count, or 0 for NULL.
 *
 * # Safety
 * `m` must be NULL or a live mask handle.
 */
size_t spur_mask_cols(const struct SpurMask *m);

/**
 * Number of surviving entries, or 0 for NULL.
 *
 * # Safety
 * `m` must be NULL or a live mask handle.
 */
size_t spur_mask_popcount(const struct SpurMask *m);

/**
 * Copies the row-major mask into `out` as 0/1 bytes.
 *
 * # Safety
 * `m` must be a live handle and `out` must point to `len` writable bytes.
 */
enum SpurStatus spur_mask_copy_bits(const struct SpurMask *m, uint8_t *out, size_t len);

/**
 * Mean, standard deviation and cv of the magnitudes `m` keeps.
 *
 * # Safety
 * `w` and `m` must be live handles and `out` writable.
 */
enum SpurStatus spur_survivor_stats(const struct SpurMatrix *w,
                                    const struct SpurMask *m,
                                    struct SpurSurvivorStats *out);

/**
 * Row, column and combined concentration of the survivors of `m`.
 *
 * # Safety
 * `m` must be a live handle and `out` writable.
 */
enum SpurStatus spur_grid_concentration(const struct SpurMask *m, struct SpurGridScore *out);

/**
 * Writes `m` as a plain PBM file.
 *
 * # Safety
 * `m` must be a live handle and `path` a NUL-terminated UTF-8 string.
 */
enum SpurStatus spur_write_mask_pbm(const struct SpurMask *m, const char *path);

/**
 * Writes `|w|` as a plain PGM heatmap.
 *
 * # Safety
 * `w` must be a live handle and `path` a NUL-terminated UTF-8 string.
 */
enum SpurStatus spur_write_magnitude_pgm(const struct SpurMatrix *w, const char *path);

/**
 * Trains one model from a config file and writes its run directory.
 *
 * # Safety
 * Both arguments must be NUL-terminated UTF-8 strings.
 */
enum SpurStatus spur_train(const char *config_path, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPUR_H */
