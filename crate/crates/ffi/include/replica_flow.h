#ifndef REPLICA_FLOW_H
#define REPLICA_FLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum RfStatus {
  RF_STATUS_OK = 0,
  RF_STATUS_INVALID_INPUT = 1,
  RF_STATUS_SHAPE_MISMATCH = 2,
  RF_STATUS_NUMERICAL = 3,
  RF_STATUS_SAMPLER_CAP = 4,
  RF_STATUS_INCOMPATIBLE = 5,
  RF_STATUS_FORMAT = 6,
  RF_STATUS_CONFIG = 7,
  RF_STATUS_IO = 8,
  RF_STATUS_NULL_POINTER = 9,
  RF_STATUS_PANIC = 10,
} RfStatus;

/**
 * Opaque handle to a trained flow or SNF.
 */
typedef struct RfCheckpoint RfCheckpoint;

/**
 * Opaque lattice handle.
 */
typedef struct RfLattice RfLattice;

/**
 * Opaque handle to a configured sampler.
 */
typedef struct RfSampler RfSampler;

/**
 * Lattice geometry and couplings of one replica system. In D = 3 the
 * transverse extent equals `extent_l`.
 */
typedef struct RfSystem {
  uint32_t dim;
  size_t extent_t;
  size_t extent_l;
  size_t replicas;
  size_t cut;
  double kappa;
  double lambda;
} RfSystem;

/**
 * Summary of a batch of works `w` with `<exp(-w)>` estimating a ratio.
 */
typedef struct RfRatio {
  double ln_ratio;
  double sigma;
  double sigma_gamma;
  double ess;
  double ess_sigma;
  size_t n;
} RfRatio;

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next failing call on the same thread.
 */
const char *rf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *rf_version(void);

/**
 * # Safety
 * `system` must point to a valid `RfSystem`; `out` to writable storage.
 */
enum RfStatus rf_lattice_new(const struct RfSystem *system, struct RfLattice **out);

/**
 * # Safety
 * `lattice` must come from `rf_lattice_new` and not be used afterwards.
 */
void rf_lattice_free(struct RfLattice *lattice);

/**
 * Total number of sites over all replicas, or 0 for NULL.
 *
 * # Safety
 * `lattice` must be NULL or a live handle.
 */
size_t rf_lattice_sites(const struct RfLattice *lattice);

/**
 * Action of `phi` (length `len`) at the lattice's cut. A finite `level`
 * in [0, 1] interpolates towards cut + 1; pass NaN for the plain action.
 *
 * # Safety
 * `phi` must hold `len` doubles; `out` must be writable.
 */
enum RfStatus rf_action(const struct RfLattice *lattice,
                        const double *phi,
                        size_t len,
                        double level,
                        double *out);

/**
 * Exact free-field ln[Z(cut + 1)/Z(cut)] at `system.kappa`.
 *
 * # Safety
 * `system` must be valid; `out` writable.
 */
enum RfStatus rf_gaussian_log_ratio(const struct RfSystem *system, double *out);

/**
 * Effective sample size fraction of `works`.
 *
 * # Safety
 * `works` must hold `n` doubles; `out` writable.
 */
enum RfStatus rf_ess(const double *works, size_t n, double *out);

/**
 * Ratio estimate with jackknife and autocorrelation errors.
 *
 * # Safety
 * `works` must hold `n` doubles; `out` writable.
 */
enum RfStatus rf_log_ratio(const double *works, size_t n, struct RfRatio *out);

/**
 * # Safety
 * `path` must be a NUL-terminated UTF-8 path; `out` writable.
 */
enum RfStatus rf_checkpoint_load(const char *path, struct RfCheckpoint **out);

/**
 * # Safety
 * `ck` must come from `rf_checkpoint_load` and not be used afterwards.
 */
void rf_checkpoint_free(struct RfCheckpoint *ck);

/**
 * Geometry and couplings the checkpoint was trained at.
 *
 * # Safety
 * `ck` must be a live handle; `out` writable.
 */
enum RfStatus rf_checkpoint_system(const struct RfCheckpoint *ck, struct RfSystem *out);

/**
 * Non-equilibrium Monte Carlo with `n_step` stochastic steps (0: plain
 * reweighting); `reverse` evolves from cut + 1 back to cut.
 *
 * # Safety
 * `out` must be writable.
 */
enum RfStatus rf_sampler_nemc(size_t n_step, bool reverse, struct RfSampler **out);

/**
 * The checkpoint's flow or SNF moved onto `system` (volume, cut, κ);
 * fails with `RF_STATUS_INCOMPATIBLE` when the network cannot transfer.
 *
 * # Safety
 * `ck` and `system` must be valid; `out` writable.
 */
enum RfStatus rf_sampler_from_checkpoint(const struct RfCheckpoint *ck,
                                         const struct RfSystem *system,
                                         struct RfSampler **out);

/**
 * # Safety
 * `sampler` must come from an `rf_sampler_*` constructor and not be used afterwards.
 */
void rf_sampler_free(struct RfSampler *sampler);

/**
 * Runs `count` evolutions from a fresh heatbath chain (`thermalization`
 * sweeps, then one sample every `stride`) and writes their works to
 * `works_out`. Deterministic in `seed`.
 *
 * # Safety
 * `sampler` and `system` must be valid; `works_out` must hold `count` doubles.
 */
enum RfStatus rf_sample_works(const struct RfSampler *sampler,
                              const struct RfSystem *system,
                              uint64_t thermalization,
                              uint64_t stride,
                              size_t count,
                              uint64_t seed,
                              double *works_out);

#endif  /* REPLICA_FLOW_H */
