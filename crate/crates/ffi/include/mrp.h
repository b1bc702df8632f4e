#ifndef MRP_H
#define MRP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum MrpStatus {
  MRP_STATUS_OK = 0,
  MRP_STATUS_NULL_ARGUMENT = 1,
  MRP_STATUS_INVALID_UTF8 = 2,
  MRP_STATUS_IO = 3,
  MRP_STATUS_PARSE = 4,
  MRP_STATUS_INVALID_INPUT = 5,
  MRP_STATUS_QUERY = 6,
  MRP_STATUS_FIT_FAILED = 7,
  MRP_STATUS_NOT_CONVERGED = 8,
  MRP_STATUS_INTEGRITY = 9,
  MRP_STATUS_PANIC = 10,
} MrpStatus;

typedef enum MrpMethod {
  MRP_METHOD_MAP = 0,
  MRP_METHOD_MMLE = 1,
  MRP_METHOD_HMC = 2,
} MrpMethod;

typedef struct MrpCells MrpCells;

typedef struct MrpFit MrpFit;

typedef struct MrpSeries MrpSeries;

typedef struct MrpSurvey MrpSurvey;

typedef struct MrpSamplerSettings {
  uint32_t chains;
  uint32_t warmup;
  uint32_t samples;
  double target_accept;
  uint32_t max_tree_depth;
  uint64_t seed;
} MrpSamplerSettings;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Engine version, a static NUL-terminated string.
 */
const char *mrp_version(void);

/**
 * Message for the last failed call on this thread; empty after a success.
 * Valid until the next call into the library on this thread.
 */
const char *mrp_last_error(void);

struct MrpSamplerSettings mrp_sampler_defaults(void);

enum MrpStatus mrp_cells_load(const char *path, struct MrpCells **out);

/**
 * A synthetic census table with whole-number cell counts.
 */
enum MrpStatus mrp_cells_synthetic(uint64_t seed, struct MrpCells **out);

void mrp_cells_free(struct MrpCells *cells);

/**
 * `schema_path` may be null for the default column layout.
 */
enum MrpStatus mrp_survey_load(const char *path,
                               const char *schema_path,
                               const char *cells_path,
                               struct MrpSurvey **out);

/**
 * Simulates `n` respondents from a truth generated with `seed`.
 */
enum MrpStatus mrp_survey_simulate(const struct MrpCells *cells,
                                   uintptr_t n,
                                   uint64_t seed,
                                   double bias_scale,
                                   struct MrpSurvey **out);

/**
 * Respondent count, or 0 for a null handle.
 */
uintptr_t mrp_survey_len(const struct MrpSurvey *survey);

void mrp_survey_free(struct MrpSurvey *survey);

/**
 * Fits the default model. `settings` may be null for the defaults;
 * `tolerance <= 0` picks the method default. A fit that finishes without
 * converging is still returned through `out`, with status `NotConverged`.
 */
enum MrpStatus mrp_fit(const struct MrpSurvey *survey,
                       const struct MrpCells *cells,
                       enum MrpMethod method,
                       const struct MrpSamplerSettings *settings,
                       double tolerance,
                       struct MrpFit **out);

bool mrp_fit_converged(const struct MrpFit *fit);

/**
 * Writes fit.json, diagnostics.json and (full Bayes) draws.csv into `dir`.
 */
enum MrpStatus mrp_fit_save(const struct MrpFit *fit, const char *dir);

void mrp_fit_free(struct MrpFit *fit);

/**
 * The 510 state by income by slice estimates. `survey` may be null, which
 * leaves the raw columns empty.
 */
enum MrpStatus mrp_estimate(const struct MrpFit *fit,
                            const struct MrpCells *cells,
                            const struct MrpSurvey *survey,
                            struct MrpSeries **out);

uintptr_t mrp_series_len(const struct MrpSeries *series);

/**
 * Mean estimate for one state, income and slice (`white_only` selects the
 * white slice).
 */
enum MrpStatus mrp_series_get(const struct MrpSeries *series,
                              uint8_t state,
                              uint8_t income,
                              bool white_only,
                              double *out_mean);

enum MrpStatus mrp_series_write_csv(const struct MrpSeries *series, const char *path);

void mrp_series_free(struct MrpSeries *series);

/**
 * Poststratified estimate for an arbitrary subset. A level of 0 leaves that
 * factor free. For point fits all three outputs equal the point value;
 * otherwise `out_lo` and `out_hi` bound the central 95% interval. `out_lo`
 * and `out_hi` may be null.
 */
enum MrpStatus mrp_query(const struct MrpFit *fit,
                         const struct MrpCells *cells,
                         uint8_t income,
                         uint8_t age,
                         uint8_t ethnicity,
                         uint8_t state,
                         bool white_only,
                         double *out_mean,
                         double *out_lo,
                         double *out_hi);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MRP_H */
