#ifndef MSDA_H
#define MSDA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  MSDA_STATUS_OK = 0,
  MSDA_STATUS_NULL_POINTER = 1,
  MSDA_STATUS_INVALID_ARGUMENT = 2,
  MSDA_STATUS_INVALID_PARAMETER = 3,
  MSDA_STATUS_NOT_CONVERGED = 4,
  MSDA_STATUS_DIVERGENCE = 5,
  MSDA_STATUS_RANK_DEFICIENT = 6,
  MSDA_STATUS_NUMERICAL = 7,
  MSDA_STATUS_CONFIG = 8,
  MSDA_STATUS_IO = 9,
  // A short output buffer; the message was truncated.
  MSDA_STATUS_BUFFER_TOO_SMALL = 10,
  MSDA_STATUS_NOT_FOUND = 11,
  MSDA_STATUS_PANIC = 99,
} MsdaStatus;

// A validated experiment configuration.
typedef struct MsdaConfig MsdaConfig;

// Linear two-scale model parameters.
typedef struct MsdaLinearModel MsdaLinearModel;

// Results of one experiment run.
typedef struct MsdaReport MsdaReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *msda_version(void);

// Copies the last error message of this thread into `buf`. Returns the message length
// in bytes, excluding the terminator, whether or not it fit.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t msda_last_error(char *buf, size_t len);

// Creates a model from a preset name (`"figure1"` or `"appendix-b"`) at the given ε.
//
// # Safety
// `preset` must be a NUL-terminated string; `out` must be valid for a write.
MsdaStatus msda_linear_model_new(const char *preset, double eps, MsdaLinearModel **out);

// # Safety
// `model` must be null or a handle from [`msda_linear_model_new`] not yet freed.
void msda_linear_model_free(MsdaLinearModel *model);

// Optimal reduced OU parameters `(a, σ_X²)` of the model.
//
// # Safety
// `model` must be a live handle; the out pointers must be valid for writes.
MsdaStatus msda_linear_optimal_params(const MsdaLinearModel *model, double *a, double *sigma_x_sq);

// Steady posterior covariance `(s11, s12, s22)` of the full filter.
//
// # Safety
// `model` must be a live handle; `out` must be valid for three writes.
MsdaStatus msda_linear_steady_covariance(const MsdaLinearModel *model, double *out);

// Growth exponent of the reduced prior covariance for a scheme (`"RSF"`, `"RSFA"`,
// `"RSFC"`, `"RSPEKF"`) in regime 1 or 2. Positive means the covariance diverges.
//
// # Safety
// `scheme` must be a NUL-terminated string; `out` must be valid for a write.
MsdaStatus msda_spekf_stability_exponent(uint32_t regime, const char *scheme, double *out);

// Parses and validates TOML config text. On [`MsdaStatus::Config`] the full diagnostic
// list is the last error message.
//
// # Safety
// `text` must be a NUL-terminated string; `out` must be valid for a write.
MsdaStatus msda_config_parse(const char *text, MsdaConfig **out);

// # Safety
// `cfg` must be null or a handle from [`msda_config_parse`] not yet freed.
void msda_config_free(MsdaConfig *cfg);

// Hex content hash of the resolved configuration (64 characters plus terminator).
//
// # Safety
// `cfg` must be a live handle; `buf` must be valid for `len` bytes.
MsdaStatus msda_config_hash(const MsdaConfig *cfg, char *buf, size_t len);

// Validation warnings, newline separated; empty when there are none.
//
// # Safety
// `cfg` must be a live handle; `buf` must be valid for `len` bytes.
MsdaStatus msda_config_warnings(const MsdaConfig *cfg, char *buf, size_t len);

// Runs the experiment, writing its files under `out_dir`, or under the default location
// when `out_dir` is null.
//
// # Safety
// `cfg` must be a live handle; `out_dir` null or NUL-terminated; `out` valid for a write.
MsdaStatus msda_run(const MsdaConfig *cfg, const char *out_dir, MsdaReport **out);

// # Safety
// `report` must be null or a handle from [`msda_run`] not yet freed.
void msda_report_free(MsdaReport *report);

// Number of scalar metrics in the report.
//
// # Safety
// `report` must be a live handle.
size_t msda_report_metric_count(const MsdaReport *report);

// Name and value of the `index`-th metric.
//
// # Safety
// `report` must be a live handle; `name` valid for `len` bytes; `value` valid for a write.
MsdaStatus msda_report_metric_at(const MsdaReport *report,
                                 size_t index,
                                 char *name,
                                 size_t len,
                                 double *value);

// Value of the metric called `name`; [`MsdaStatus::NotFound`] if there is none.
//
// # Safety
// `report` must be a live handle; `name` NUL-terminated; `value` valid for a write.
MsdaStatus msda_report_metric(const MsdaReport *report, const char *name, double *value);

// Hex content hash recorded in the report.
//
// # Safety
// `report` must be a live handle; `buf` must be valid for `len` bytes.
MsdaStatus msda_report_hash(const MsdaReport *report, char *buf, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MSDA_H */
