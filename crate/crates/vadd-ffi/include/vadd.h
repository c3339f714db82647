/* C ABI for the vadd-core library: load trained checkpoints, inspect them,
 * draw samples, score sequences, and generate the reference datasets.
 *
 * Conventions:
 *   - Every function returns a VaddStatus; VADD_OK is zero.
 *   - On failure, vadd_last_error() returns a thread-local message that
 *     stays valid until the next failing call on the same thread.
 *   - VaddModel is an opaque handle owned by the caller; release it with
 *     vadd_model_free(). Handles are immutable after load and may be
 *     shared across threads.
 *   - Token buffers are row-major uint32_t with n_positions entries per
 *     sequence; the caller allocates them.
 *   - Equal seeds give bitwise-equal results.
 *
 * This header is maintained by hand alongside src/lib.rs; the two must be
 * updated together.
 */

#ifndef VADD_H
#define VADD_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum VaddStatus {
  VADD_OK = 0,
  /* A documented precondition was violated (null pointer, bad dataset
   * name, malformed checkpoint, wrong model flavor). */
  VADD_ERR_USAGE = 1,
  /* A numerical invariant broke while computing. */
  VADD_ERR_NUMERICAL = 2,
  /* The operating system refused a file operation. */
  VADD_ERR_IO = 3,
  /* A panic was caught at the boundary; state may be incomplete. */
  VADD_ERR_PANIC = 4,
} VaddStatus;

/* Opaque handle for a loaded checkpoint. */
typedef struct VaddModel VaddModel;

/* Message from the most recent failure on this thread. Never null; empty
 * before any failure. */
const char *vadd_last_error(void);

/* Load a checkpoint file into *out_model. The caller owns the handle. */
VaddStatus vadd_model_load(const char *path, VaddModel **out_model);

/* Release a handle. Null is a no-op. */
void vadd_model_free(VaddModel *model);

/* Describe a loaded model. Any output pointer may be null to skip that
 * field. has_latent is 1 for the latent-variable model, 0 for the plain
 * baseline. */
VaddStatus vadd_model_info(const VaddModel *model, uint32_t *vocab,
                           uint32_t *n_positions, uint32_t *d_latent,
                           int32_t *has_latent);

/* Draw `count` sequences by ancestral sampling over `t_steps` reverse
 * steps into out_tokens (count * n_positions entries). A nonzero shared_z
 * reuses one latent draw per trajectory across steps (ignored by the
 * baseline). */
VaddStatus vadd_sample(const VaddModel *model, uint32_t t_steps,
                       size_t count, uint64_t seed, int32_t shared_z,
                       uint32_t *out_tokens);

/* Estimate the negative log-likelihood bound, in nats per sequence, of
 * `count` sequences supplied row-major in `tokens` (count * n_positions
 * entries). `k` importance samples and `n_time_pairs` time draws per
 * sequence; the result lands in *out_nll. */
VaddStatus vadd_nll(const VaddModel *model, const uint32_t *tokens,
                    size_t count, size_t k, size_t n_time_pairs,
                    uint64_t seed, double *out_nll);

/* Generate `count` sequences of the named reference dataset
 * ("checkerboard", "swissroll", or "circles") into out_tokens
 * (count * 2 entries). `board` is the checkerboard side length (even,
 * at least 2); other datasets ignore it. */
VaddStatus vadd_generate_dataset(const char *name, size_t count,
                                 uint64_t seed, uint32_t board,
                                 uint32_t *out_tokens);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* VADD_H */
