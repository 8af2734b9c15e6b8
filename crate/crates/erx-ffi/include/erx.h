#ifndef ERX_H
#define ERX_H

/* Generated by cbindgen from the erx-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum ErxStatus {
  ERX_STATUS_OK = 0,
  /**
   * A run was attempted and failed (training, IO, evaluation).
   */
  ERX_STATUS_RUN_FAILURE = 1,
  /**
   * The configuration was rejected before any work started.
   */
  ERX_STATUS_CONFIG_ERROR = 2,
  ERX_STATUS_NULL_POINTER = 3,
  ERX_STATUS_INVALID_UTF8 = 4,
} ErxStatus;

/**
 * Opaque run configuration handle.
 */
typedef struct ErxConfig ErxConfig;

/**
 * Opaque evaluation report handle.
 */
typedef struct ErxReport ErxReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Crate version as a static string; do not free.
 */
const char *erx_version(void);

/**
 * Message for the most recent error on this thread, or NULL if none.
 * Caller frees via `erx_string_free`.
 */
char *erx_last_error_message(void);

/**
 * Parse and validate a run configuration from JSON.
 *
 * # Safety
 * `json` must be a valid NUL-terminated string; `out` must be a valid
 * pointer to receive the handle. On success the caller owns the handle and
 * must release it with `erx_config_free`.
 */
enum ErxStatus erx_config_parse(const char *json, struct ErxConfig **out);

/**
 * # Safety
 * `cfg` must be a handle from `erx_config_parse` that has not been freed.
 */
void erx_config_free(struct ErxConfig *cfg);

/**
 * Hash of the semantically meaningful configuration fields, as a hex
 * string. Caller frees via `erx_string_free`.
 *
 * # Safety
 * `cfg` must be a live handle from `erx_config_parse`.
 */
char *erx_config_hash(const struct ErxConfig *cfg);

/**
 * Train and evaluate per the config; writes report artifacts under the
 * config's output directory and returns the report as a handle.
 *
 * # Safety
 * `cfg` must be a live handle; `out` must be valid. The returned report
 * must be released with `erx_report_free`.
 */
enum ErxStatus erx_run_experiment(const struct ErxConfig *cfg, struct ErxReport **out);

/**
 * Generate a synthetic corpus into `out_dir`. `options_json` follows the
 * generator section of the run config; pass NULL for the defaults.
 *
 * # Safety
 * `out_dir` must be a valid NUL-terminated path string; `options_json`
 * may be NULL.
 */
enum ErxStatus erx_generate_corpus(const char *options_json, const char *out_dir);

/**
 * Serialize a report to JSON. Caller frees via `erx_string_free`.
 *
 * # Safety
 * `report` must be a live handle from `erx_run_experiment`.
 */
char *erx_report_to_json(const struct ErxReport *report);

/**
 * Render a report as the aligned text table. Caller frees via
 * `erx_string_free`.
 *
 * # Safety
 * `report` must be a live handle from `erx_run_experiment`.
 */
char *erx_report_render(const struct ErxReport *report);

/**
 * # Safety
 * `report` must be a handle from `erx_run_experiment`, not yet freed.
 */
void erx_report_free(struct ErxReport *report);

/**
 * Release a string returned by this library.
 *
 * # Safety
 * `s` must be a pointer previously returned by one of the string-returning
 * functions here, and not yet freed.
 */
void erx_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ERX_H */
