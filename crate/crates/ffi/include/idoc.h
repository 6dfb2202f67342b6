#ifndef IDOC_H
#define IDOC_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Which block of the KKT system a setter addresses. Dynamics residuals
// are `r_t = x_{t+1} − f_t(ξ_t)`, so `ASub` holds `[I 0]` in its
// dynamics rows and `ADiag` holds `−D f_t`.
typedef enum IdocBlock {
  // `H_t`, `|ξ_t| × |ξ_t|`, `t ∈ [0, T]`.
  IDOC_BLOCK_HESSIAN = 0,
  // `D_{ξ_t} r_t`, `t ∈ [0, T]`.
  IDOC_BLOCK_A_DIAG = 1,
  // `D_{ξ_{t+1}} r_t`, `t ∈ [0, T)`.
  IDOC_BLOCK_A_SUB = 2,
  // `D_{ξ_0}` of the initial-state residual, `n × |ξ_0|`; index ignored.
  IDOC_BLOCK_A_INIT = 3,
  // `B_t`, `|ξ_t| × d`.
  IDOC_BLOCK_B = 4,
  // `C_k` for residual block `k ∈ [0, T + 1]`, with block `0` the
  // initial-state residual.
  IDOC_BLOCK_C = 5,
} IdocBlock;

typedef enum IdocStatus {
  IDOC_STATUS_OK = 0,
  IDOC_STATUS_NULL_POINTER = 1,
  IDOC_STATUS_INVALID_ARGUMENT = 2,
  IDOC_STATUS_DIMENSION_MISMATCH = 3,
  // Singular or rank-deficient systems, non-finite values.
  IDOC_STATUS_NUMERICAL = 4,
  // The forward solver did not converge.
  IDOC_STATUS_NOT_CONVERGED = 5,
  IDOC_STATUS_PANIC = 6,
} IdocStatus;

// Dense backward-pass inputs.
typedef struct IdocKkt IdocKkt;

// A bundled optimal control problem.
typedef struct IdocProblem IdocProblem;

// A forward solution together with the parameters it was solved at.
typedef struct IdocSolution IdocSolution;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Length of the last error message on this thread, excluding the
// terminator; zero when there is none.
size_t idoc_last_error_length(void);

// Copies the last error message into `buf` (truncated, always
// NUL-terminated when `len > 0`) and returns the full message length.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t idoc_last_error_message(char *buf, size_t len);

void idoc_clear_last_error(void);

// Static, NUL-terminated library version.
const char *idoc_version(void);

// Zero-initialised KKT inputs. `active` (may be null for none) holds
// `T + 1` counts of extra equality rows per stage, ordered ahead of the
// dynamics rows; the initial-state block is set to `[I 0]`.
//
// # Safety
// `active` must be null or point to `horizon + 1` values; `out` must be
// a valid pointer.
enum IdocStatus idoc_kkt_new(size_t n,
                             size_t m,
                             size_t horizon,
                             size_t d,
                             const size_t *active,
                             struct IdocKkt **out);

// # Safety
// `kkt` must be null or a handle from this library not yet freed.
void idoc_kkt_free(struct IdocKkt *kkt);

// Decision and residual lengths `n_ξ` and `n_r`; either pointer may be null.
//
// # Safety
// Non-null pointers must be valid.
enum IdocStatus idoc_kkt_dims(const struct IdocKkt *kkt, size_t *n_xi, size_t *n_r);

// Shape of one block; either pointer may be null.
//
// # Safety
// `kkt` must be a live handle; non-null pointers must be valid.
enum IdocStatus idoc_kkt_block_shape(const struct IdocKkt *kkt,
                                     enum IdocBlock kind,
                                     size_t index,
                                     size_t *rows,
                                     size_t *cols);

// Overwrites one block from `rows × cols` row-major values; the shape
// must match [`idoc_kkt_block_shape`].
//
// # Safety
// `kkt` must be a live handle and `data` must point to `rows * cols` values.
enum IdocStatus idoc_kkt_set_block(struct IdocKkt *kkt,
                                   enum IdocBlock kind,
                                   size_t index,
                                   const double *data,
                                   size_t rows,
                                   size_t cols);

// `Dξ` (`n_ξ × d`, row-major) with proximal shift `prox_delta` (0 disables).
//
// # Safety
// `kkt` must be a live handle and `out` must point to `out_len` values.
enum IdocStatus idoc_trajectory_derivative(const struct IdocKkt *kkt,
                                           double prox_delta,
                                           double *out,
                                           size_t out_len);

// `vᵀDξ` (length `d`) without forming `Dξ`; `v` has length `n_ξ`.
//
// # Safety
// `kkt` must be a live handle; `v` and `out` must point to `v_len` and
// `out_len` values.
enum IdocStatus idoc_vjp(const struct IdocKkt *kkt,
                         double prox_delta,
                         const double *v,
                         size_t v_len,
                         double *out,
                         size_t out_len);

// `Dξ` through the auxiliary LQR recursion; equality-only inputs.
//
// # Safety
// `kkt` must be a live handle and `out` must point to `out_len` values.
enum IdocStatus idoc_riccati_trajectory_derivative(const struct IdocKkt *kkt,
                                                   double *out,
                                                   size_t out_len);

// Cartpole swing-up with `horizon` steps of length `dt`; `constrained`
// adds the track and force bounds (and their two parameters).
//
// # Safety
// `out` must be a valid pointer.
enum IdocStatus idoc_cartpole_new(size_t horizon,
                                  double dt,
                                  bool constrained,
                                  struct IdocProblem **out);

// The demonstration parameters `θ★` of the cartpole task, 9 values
// without constraints and 11 with them.
//
// # Safety
// `out` must point to `out_len` values.
enum IdocStatus idoc_cartpole_default_theta(bool constrained, double *out, size_t out_len);

// Seeded random LQR problem with `θ = [diag Q shift, diag R shift, A
// perturbation]`; `zero_terminal` drops the terminal cost.
//
// # Safety
// `out` must be a valid pointer.
enum IdocStatus idoc_lqr_new(size_t n,
                             size_t m,
                             size_t horizon,
                             uint64_t seed,
                             bool zero_terminal,
                             struct IdocProblem **out);

// # Safety
// `problem` must be null or a handle from this library not yet freed.
void idoc_problem_free(struct IdocProblem *problem);

// `n`, `m`, `d` and `T`; any pointer may be null.
//
// # Safety
// `problem` must be a live handle; non-null pointers must be valid.
enum IdocStatus idoc_problem_dims(const struct IdocProblem *problem,
                                  size_t *n,
                                  size_t *m,
                                  size_t *d,
                                  size_t *horizon);

// Solves the forward problem at `θ` (length `d`) with default solver
// options. An unconverged solve returns `NotConverged` and no handle.
//
// # Safety
// `problem` must be a live handle, `theta` must point to `theta_len`
// values and `out` must be a valid pointer.
enum IdocStatus idoc_problem_solve(const struct IdocProblem *problem,
                                   const double *theta,
                                   size_t theta_len,
                                   struct IdocSolution **out);

// # Safety
// `solution` must be null or a handle from this library not yet freed.
void idoc_solution_free(struct IdocSolution *solution);

// Length of the solved trajectory `ξ` (`n_ξ`), or 0 for a null handle.
//
// # Safety
// `solution` must be null or a live handle.
size_t idoc_solution_length(const struct IdocSolution *solution);

// Copies `ξ = (x₀, u₀, …, x_T)` into `out`.
//
// # Safety
// `solution` must be a live handle and `out` must point to `out_len` values.
enum IdocStatus idoc_solution_trajectory(const struct IdocSolution *solution,
                                         double *out,
                                         size_t out_len);

// Number of inequality rows treated as active in the backward pass.
//
// # Safety
// `solution` must be null or a live handle.
size_t idoc_solution_active_count(const struct IdocSolution *solution);

// KKT inputs at a solution, ready for the backward-pass calls.
//
// # Safety
// `problem` and `solution` must be live handles (the solution obtained
// from this problem) and `out` must be a valid pointer.
enum IdocStatus idoc_solution_kkt(const struct IdocProblem *problem,
                                  const struct IdocSolution *solution,
                                  struct IdocKkt **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IDOC_H */
