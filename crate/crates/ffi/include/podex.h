#ifndef PODEX_H
#define PODEX_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PodexStatus {
  PODEX_STATUS_OK = 0,
  PODEX_STATUS_NULL_POINTER = 1,
  PODEX_STATUS_INVALID_ARGUMENT = 2,
  PODEX_STATUS_PARSE_ERROR = 3,
  PODEX_STATUS_DOMAIN_ERROR = 4,
  PODEX_STATUS_NUMERICAL_FAILURE = 5,
  PODEX_STATUS_PANIC = 6,
} PodexStatus;

/**
 * Opaque Hamiltonian handle.
 */
typedef struct PodexHamiltonian PodexHamiltonian;

/**
 * Opaque orbit handle with dense output.
 */
typedef struct PodexOrbit PodexOrbit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the next call.
 */
const char *podex_last_error(void);

/**
 * Parses `src` over the variables `q1..qn, p1..pn`.
 *
 * # Safety
 * `src` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PodexStatus podex_hamiltonian_parse(const char *src, size_t n, struct PodexHamiltonian **out);

/**
 * One of the built-in models (`flat`, `pendulum`, `magnetic`, `randers`, `heart`, ...).
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PodexStatus podex_hamiltonian_builtin(const char *name,
                                           size_t n,
                                           struct PodexHamiltonian **out);

/**
 * # Safety
 * `h` must come from a podex constructor and not be used afterwards. NULL is ignored.
 */
void podex_hamiltonian_free(struct PodexHamiltonian *h);

/**
 * Base dimension `n`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum PodexStatus podex_hamiltonian_dim(const struct PodexHamiltonian *h, size_t *out_n);

/**
 * `H(z)` at a phase point `z = (q1..qn, p1..pn)` of length `2n`.
 *
 * # Safety
 * `z` must point to `len` doubles; other pointers must be valid.
 */
enum PodexStatus podex_hamiltonian_value(const struct PodexHamiltonian *h,
                                         const double *z,
                                         size_t len,
                                         double *out);

/**
 * Hamiltonian vector field at `z`, written to `out` (capacity `cap`, length `2n`).
 *
 * # Safety
 * `z` must point to `len` doubles and `out` to `cap` doubles.
 */
enum PodexStatus podex_hamiltonian_field(const struct PodexHamiltonian *h,
                                         const double *z,
                                         size_t len,
                                         double *out,
                                         size_t cap,
                                         size_t *out_len);

/**
 * Projects `z0` onto the level and integrates over `[t0, t1]` (backward when `t1 < t0`).
 *
 * # Safety
 * `z0` must point to `len` doubles and `out` be a valid pointer.
 */
enum PodexStatus podex_flow(const struct PodexHamiltonian *h,
                            const double *z0,
                            size_t len,
                            double t0,
                            double t1,
                            struct PodexOrbit **out);

/**
 * # Safety
 * `o` must come from [`podex_flow`] and not be used afterwards. NULL is ignored.
 */
void podex_orbit_free(struct PodexOrbit *o);

/**
 * Time window of the orbit as integrated.
 *
 * # Safety
 * Pointers must be valid.
 */
enum PodexStatus podex_orbit_window(const struct PodexOrbit *o, double *t0, double *t1);

/**
 * Phase point at time `t` from the dense output.
 *
 * # Safety
 * `out` must point to `cap` doubles; other pointers must be valid.
 */
enum PodexStatus podex_orbit_eval(const struct PodexOrbit *o,
                                  double t,
                                  double *out,
                                  size_t cap,
                                  size_t *out_len);

/**
 * k-jet of the projected orbit through `z` as a graph over `*out_axis` (0-based).
 *
 * `coeffs` receives `y^(0)..y^(k)` row by row, `(k + 1)(n - 1)` doubles.
 *
 * # Safety
 * `z` must point to `len` doubles, `coeffs` to `cap` doubles; other pointers must be valid.
 */
enum PodexStatus podex_project_jet(const struct PodexHamiltonian *h,
                                   const double *z,
                                   size_t len,
                                   size_t k,
                                   size_t *out_axis,
                                   double *out_base,
                                   double *coeffs,
                                   size_t cap,
                                   size_t *out_len);

/**
 * Tangency order of the projected orbits through `z1` (of `h1`) and `z2` (of `h2`) up to
 * `k_max`: `-1` when the base points differ, `r` for the first disagreeing order, and
 * `-2` when the jets agree through `k_max`.
 *
 * # Safety
 * `z1`, `z2` must point to `len` doubles; other pointers must be valid.
 */
enum PodexStatus podex_tangency_order(const struct PodexHamiltonian *h1,
                                      const double *z1,
                                      const struct PodexHamiltonian *h2,
                                      const double *z2,
                                      size_t len,
                                      size_t k_max,
                                      int64_t *out);

/**
 * Seeded homopodal scan of order `k`: number of distinct pairs found and the expected
 * dimension `(3-k)(n-1)+1`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum PodexStatus podex_scan_homopodal(const struct PodexHamiltonian *h,
                                      size_t k,
                                      uint64_t budget,
                                      uint64_t seed,
                                      size_t *out_pairs,
                                      int64_t *out_formula_dim);

/**
 * Runs a TOML scenario and writes its reports into `out_dir`.
 *
 * # Safety
 * Both arguments must be NUL-terminated strings.
 */
enum PodexStatus podex_run_scenario(const char *toml, const char *out_dir);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* PODEX_H */
