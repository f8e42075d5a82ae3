/* C interface to the latent point collapse lab. Regenerate with: cargo build -p lpc-ffi --features generate-header */

#ifndef LPC_H
#define LPC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible call.
 */
typedef enum LpcStatus {
  LPC_STATUS_OK = 0,
  LPC_STATUS_NULL_ARGUMENT = 1,
  LPC_STATUS_INVALID_UTF8 = 2,
  LPC_STATUS_INVALID_INPUT = 3,
  LPC_STATUS_CONFIG = 4,
  LPC_STATUS_FORMAT = 5,
  LPC_STATUS_NUMERIC = 6,
  LPC_STATUS_IO = 7,
  LPC_STATUS_INTERNAL = 8,
} LpcStatus;

/**
 * Latent vectors with labels, loaded from an LPCZ file.
 */
typedef struct LpcLatents LpcLatents;

/**
 * A trained model, loaded from a checkpoint.
 */
typedef struct LpcModel LpcModel;

/**
 * Shape of a latent set.
 */
typedef struct LpcLatentsInfo {
  uint64_t samples;
  uint64_t dim;
  uint64_t classes;
} LpcLatentsInfo;

/**
 * Collapse geometry of one latent set.
 */
typedef struct LpcCollapseReport {
  /**
   * Trace of the within-class covariance.
   */
  double sigma_w_trace;
  /**
   * Within-over-between variability (trace of Sigma_W pinv(Sigma_B) / K).
   */
  double nc1;
  /**
   * Mean per-sample ratio of nearest-other-centroid distance to
   * own-centroid distance.
   */
  double separation_ratio;
  /**
   * Coefficient of variation of the latent norms.
   */
  double norm_cov;
  /**
   * Nearest-neighbour differential entropy estimate per dimension.
   */
  double entropy_per_dim;
  double nc2_equinorm_cov;
  double nc2_equiangularity_dev;
  double nc2_cos_std;
} LpcCollapseReport;

/**
 * Per-coordinate two-component mixture summary of one latent set.
 */
typedef struct LpcBinarityScores {
  double mean_loglik;
  double mean_sigma;
  double mean_peak_distance;
} LpcBinarityScores;

/**
 * Shape of a model.
 */
typedef struct LpcModelInfo {
  uint64_t input_dim;
  uint64_t latent_dim;
  uint64_t classes;
} LpcModelInfo;

/**
 * Result of a minimal-perturbation attack on one input.
 */
typedef struct LpcAttackOutcome {
  /**
   * Perturbation norm over input norm.
   */
  double rel_norm;
  uint64_t iterations;
  /**
   * 1 when the prediction flipped within the iteration budget.
   */
  uint8_t converged;
  uint64_t source_label;
  uint64_t final_label;
} LpcAttackOutcome;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version of the library as a static NUL-terminated string.
 */
const char *lpc_version(void);

/**
 * Copies the message for the most recent failure on this thread into `buf`
 * (truncated to `cap` bytes, always NUL-terminated when `cap > 0`) and
 * returns the message length in bytes, excluding the terminator. Call with
 * a null `buf` or zero `cap` to query the length alone.
 */
size_t lpc_last_error(char *buf, size_t cap);

/**
 * Runs a whole experiment from a config file; artifacts land in the
 * config's output directory.
 */
enum LpcStatus lpc_train(const char *config_path);

/**
 * Loads an LPCZ latent file into a handle. On success `*out` owns the set.
 */
enum LpcStatus lpc_latents_open(const char *path, struct LpcLatents **out);

void lpc_latents_free(struct LpcLatents *h);

enum LpcStatus lpc_latents_info(const struct LpcLatents *h, struct LpcLatentsInfo *out);

/**
 * Computes the collapse battery over a latent set. `knn_k` is the
 * neighbour count for the entropy estimate.
 */
enum LpcStatus lpc_collapse_report(const struct LpcLatents *h,
                                   uint64_t knn_k,
                                   struct LpcCollapseReport *out);

enum LpcStatus lpc_binarity_scores(const struct LpcLatents *h, struct LpcBinarityScores *out);

/**
 * Loads a model checkpoint into a handle.
 */
enum LpcStatus lpc_model_open(const char *path, struct LpcModel **out);

void lpc_model_free(struct LpcModel *h);

enum LpcStatus lpc_model_info(const struct LpcModel *h, struct LpcModelInfo *out);

/**
 * Forward pass on one input. `x_len` must equal the model's input width and
 * `out_len` its class count; logits are written to `out`.
 */
enum LpcStatus lpc_model_logits(const struct LpcModel *h,
                                const double *x,
                                uint64_t x_len,
                                double *out,
                                uint64_t out_len);

/**
 * Minimal-perturbation attack on one input. `max_iter` zero selects the
 * default budget of 50.
 */
enum LpcStatus lpc_deepfool(const struct LpcModel *h,
                            const double *x,
                            uint64_t x_len,
                            uint64_t max_iter,
                            double overshoot,
                            struct LpcAttackOutcome *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LPC_H */
