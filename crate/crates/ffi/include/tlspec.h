#ifndef TLSPEC_H
#define TLSPEC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TlspecStatus {
  TLSPEC_STATUS_OK = 0,
  TLSPEC_STATUS_NULL_POINTER = 1,
  TLSPEC_STATUS_INVALID_ARGUMENT = 2,
  TLSPEC_STATUS_CONFIG = 3,
  TLSPEC_STATUS_DIMENSION = 4,
  TLSPEC_STATUS_INSUFFICIENT_POINTS = 5,
  TLSPEC_STATUS_NON_CONVERGENCE = 6,
  TLSPEC_STATUS_DATA = 7,
  TLSPEC_STATUS_IO = 8,
  TLSPEC_STATUS_PANIC = 9,
} TlspecStatus;

typedef enum TlspecResonatorModel {
  TLSPEC_RESONATOR_MODEL_SIMPLE = 0,
  TLSPEC_RESONATOR_MODEL_BACKGROUND = 1,
} TlspecResonatorModel;

typedef enum TlspecFitFamily {
  TLSPEC_FIT_FAMILY_MODIFIED_GAUSSIAN = 0,
  TLSPEC_FIT_FAMILY_TRUNCATED_NORMAL = 1,
  TLSPEC_FIT_FAMILY_GAMMA = 2,
} TlspecFitFamily;

/**
 * Opaque experiment configuration.
 */
typedef struct TlspecConfig TlspecConfig;

/**
 * Opaque bias-sweep grid.
 */
typedef struct TlspecSpectrum TlspecSpectrum;

/**
 * Opaque list of extracted tracks.
 */
typedef struct TlspecTracks TlspecTracks;

/**
 * One extracted track in reporting units.
 */
typedef struct TlspecTrack {
  double delta0_ghz;
  double vertex_bias_kvpm;
  double pz_debye;
  /**
   * Mean squared frequency residual (kHz²).
   */
  double rss_khz2;
  size_t n_points;
} TlspecTrack;

typedef struct TlspecResonatorFit {
  double f0_hz;
  double q_total;
  double q_i;
  double q_e;
  double phi;
  double residual;
  bool converged;
  bool ill_conditioned;
} TlspecResonatorFit;

typedef struct TlspecDistributionFit {
  /**
   * (μ, σ) in D, or shape α and rate β (1/D).
   */
  double params[2];
  double stderr[2];
  double loglik;
  double mean;
  bool converged;
} TlspecDistributionFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL after a
 * successful call. Valid until the next call into the library.
 */
const char *tlspec_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tlspec_version(void);

enum TlspecStatus tlspec_config_default(struct TlspecConfig **out);

/**
 * Parses a TOML configuration from a NUL-terminated string.
 */
enum TlspecStatus tlspec_config_from_toml(const char *text, struct TlspecConfig **out);

enum TlspecStatus tlspec_config_load(const char *path, struct TlspecConfig **out);

enum TlspecStatus tlspec_config_set_seed(struct TlspecConfig *cfg, uint64_t seed);

void tlspec_config_free(struct TlspecConfig *cfg);

/**
 * Draws the configured ensemble and renders its sweep. `n_defects`, when
 * not NULL, receives the ensemble size.
 */
enum TlspecStatus tlspec_simulate(const struct TlspecConfig *cfg,
                                  struct TlspecSpectrum **out,
                                  size_t *n_defects);

/**
 * Builds a spectrum from axes and a frequency-major grid of
 * `n_freq * n_bias` real and imaginary parts.
 */
enum TlspecStatus tlspec_spectrum_from_arrays(const double *freqs_hz,
                                              size_t n_freq,
                                              const double *biases_vpm,
                                              size_t n_bias,
                                              const double *re,
                                              const double *im,
                                              struct TlspecSpectrum **out);

enum TlspecStatus tlspec_spectrum_read(const char *path, struct TlspecSpectrum **out);

/**
 * Writes a spectrum file atomically. `cfg` may be NULL; when given, its
 * seed and hash are recorded in the header.
 */
enum TlspecStatus tlspec_spectrum_write(const struct TlspecSpectrum *spec,
                                        const struct TlspecConfig *cfg,
                                        const char *path);

enum TlspecStatus tlspec_spectrum_shape(const struct TlspecSpectrum *spec,
                                        size_t *n_freq,
                                        size_t *n_bias);

/**
 * Copies the grid into caller buffers of `len` = n_freq·n_bias values,
 * frequency-major.
 */
enum TlspecStatus tlspec_spectrum_copy_data(const struct TlspecSpectrum *spec,
                                            double *re,
                                            double *im,
                                            size_t len);

void tlspec_spectrum_free(struct TlspecSpectrum *spec);

/**
 * Runs the extraction pipeline with the configuration's pipeline settings
 * and seed.
 */
enum TlspecStatus tlspec_extract(const struct TlspecSpectrum *spec,
                                 const struct TlspecConfig *cfg,
                                 struct TlspecTracks **out);

enum TlspecStatus tlspec_tracks_len(const struct TlspecTracks *tracks, size_t *len);

enum TlspecStatus tlspec_tracks_get(const struct TlspecTracks *tracks,
                                    size_t index,
                                    struct TlspecTrack *out);

void tlspec_tracks_free(struct TlspecTracks *tracks);

/**
 * Fits the ensemble-averaged trace of a spectrum over its full span.
 */
enum TlspecStatus tlspec_fit_resonator(const struct TlspecSpectrum *spec,
                                       enum TlspecResonatorModel model,
                                       struct TlspecResonatorFit *out);

/**
 * Material-weighted mean and standard deviation of measured dipoles (D).
 */
enum TlspecStatus tlspec_calculated_mean_std(const double *values,
                                             size_t n,
                                             double *mean,
                                             double *std);

/**
 * Material constant P₀ (1/(J·m³)) from measured dipoles (D) and the
 * configuration's geometry.
 */
enum TlspecStatus tlspec_material_constant(const double *values,
                                           size_t n,
                                           const struct TlspecConfig *cfg,
                                           double *out);

/**
 * Low-power loss tangent of measured dipoles (D) with the configuration's
 * geometry and permittivity.
 */
enum TlspecStatus tlspec_loss_from_dipoles(const double *values,
                                           size_t n,
                                           const struct TlspecConfig *cfg,
                                           double *out);

/**
 * Maximum-likelihood fit of a dipole family to measured dipoles (D).
 */
enum TlspecStatus tlspec_mle_fit(enum TlspecFitFamily family,
                                 const double *values,
                                 size_t n,
                                 struct TlspecDistributionFit *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TLSPEC_H */
