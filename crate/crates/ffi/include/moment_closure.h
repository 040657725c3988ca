#ifndef MOMENT_CLOSURE_H
#define MOMENT_CLOSURE_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum mc_closure_kind {
  MC_CLOSURE_KIND_PN = 0,
  MC_CLOSURE_KIND_LM = 1,
  MC_CLOSURE_KIND_LG = 2,
  MC_CLOSURE_KIND_LG_HYPER = 3,
} mc_closure_kind;

typedef enum mc_status {
  MC_STATUS_OK = 0,
  MC_STATUS_INVALID_ARGUMENT = 1,
  MC_STATUS_CONFIG = 2,
  MC_STATUS_BLOW_UP = 3,
  MC_STATUS_IO = 4,
  MC_STATUS_NUMERICAL = 5,
  MC_STATUS_NULL_POINTER = 6,
  MC_STATUS_PANIC = 7,
} mc_status;

/*
 A trained (or P_N) closure.
 */
typedef struct mc_model mc_model;

/*
 A deterministic moment system and its current state.
 */
typedef struct mc_solver mc_solver;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty if none. Valid until
 the next failing call on the same thread.
 */
const char *mc_last_error(void);

/*
 Library version, a static string.
 */
const char *mc_version(void);

/*
 `n`-point Gauss-Hermite rule for the weight `e^{-v^2}`.

 # Safety
 `nodes` and `weights` must point to `n` writable doubles.
 */
enum mc_status mc_gauss_hermite(size_t n, double *nodes, double *weights);

/*
 Hyperbolicity-constrained head outputs for order `n`.

 # Safety
 `raw` and `out` must point to `len` doubles.
 */
enum mc_status mc_constrain_outputs(const double *raw,
                                    size_t len,
                                    size_t n,
                                    double eps,
                                    double *out);

/*
 The P_N closure of order `n` (deterministic).

 # Safety
 `out` must be a valid pointer to a handle slot.
 */
enum mc_status mc_model_pn(size_t n, struct mc_model **out);

/*
 Loads a checkpoint written by the `train` command.

 # Safety
 `path` must be a NUL-terminated string, `out` a valid handle slot.
 */
enum mc_status mc_model_load(const char *path, struct mc_model **out);

/*
 # Safety
 `model` must come from this library and not be used afterwards.
 */
void mc_model_free(struct mc_model *model);

/*
 # Safety
 All pointers must be valid; output pointers may be null to skip them.
 */
enum mc_status mc_model_info(const struct mc_model *model,
                             enum mc_closure_kind *kind,
                             size_t *n,
                             size_t *k);

/*
 Predicted `d_x m_{N+1}` for `rows` points. `m` and `dxm` hold
 `rows * (N+1)(K+1)` values row by row, `out` receives `rows * (K+1)`.

 # Safety
 Buffers must have the sizes above.
 */
enum mc_status mc_model_predict_gradient(const struct mc_model *model,
                                         const double *m,
                                         const double *dxm,
                                         size_t rows,
                                         double *out);

/*
 Deterministic moment system with collision frequency `sigma`, started from
 `initial` (`nx * (N+1)` values, point-major) on a periodic grid of spacing
 `dx`. `alpha_lf` and `cfl` take their defaults (5 and 0.1) when `<= 0`.

 # Safety
 `model` must be valid, `initial` must hold `nx * (N+1)` values.
 */
enum mc_status mc_solver_new(const struct mc_model *model,
                             double sigma,
                             double alpha_lf,
                             double cfl,
                             const double *initial,
                             size_t nx,
                             double dx,
                             struct mc_solver **out);

/*
 # Safety
 `solver` must come from this library and not be used afterwards.
 */
void mc_solver_free(struct mc_solver *solver);

/*
 Advances by `duration`. Returns `BlowUp` (state unchanged) if the run
 leaves the finite range.

 # Safety
 `solver` must be valid; `t_now` may be null.
 */
enum mc_status mc_solver_advance(struct mc_solver *solver, double duration, double *t_now);

/*
 Copies the state (`nx * (N+1)` values) into `out`.

 # Safety
 `out` must hold `len` doubles.
 */
enum mc_status mc_solver_state(const struct mc_solver *solver, double *out, size_t len);

/*
 `sum_j m_0(x_j) dx` of the current state.

 # Safety
 `solver` and `out` must be valid.
 */
enum mc_status mc_solver_mass(const struct mc_solver *solver, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOMENT_CLOSURE_H */
