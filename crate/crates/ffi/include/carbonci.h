#ifndef CARBONCI_H
#define CARBONCI_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CciKind {
  CCI_KIND_ACTUAL = 0,
  CCI_KIND_FORECAST = 1,
} CciKind;

typedef enum CciStatus {
  CCI_STATUS_OK = 0,
  CCI_STATUS_NULL_POINTER = 1,
  CCI_STATUS_INVALID_UTF8 = 2,
  CCI_STATUS_IO = 3,
  CCI_STATUS_MALFORMED = 4,
  CCI_STATUS_OUT_OF_COVERAGE = 5,
  CCI_STATUS_INFEASIBLE = 6,
  CCI_STATUS_UNKNOWN_REGION = 7,
  CCI_STATUS_INVALID_ARGUMENT = 8,
  CCI_STATUS_UNKNOWN_JOB = 9,
  CCI_STATUS_PANIC = 10,
} CciStatus;

/**
 * An intensity dataset.
 */
typedef struct CciDataset CciDataset;

/**
 * A scheduling service bound to a dataset snapshot.
 */
typedef struct CciService CciService;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until
 * the next call on the same thread.
 */
const char *cci_last_error_message(void);

/**
 * Loads an intensity CSV; `forecast_path` may be NULL.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be writable.
 */
enum CciStatus cci_dataset_load_csv(const char *path,
                                    const char *forecast_path,
                                    struct CciDataset **out);

/**
 * Builds a synthetic dataset from TOML settings (NULL for defaults).
 *
 * # Safety
 * `config_toml` must be NULL or NUL-terminated; `out` must be writable.
 */
enum CciStatus cci_dataset_synthesize(const char *config_toml, struct CciDataset **out);

/**
 * # Safety
 * `ds` must be NULL or a handle from this library not yet freed.
 */
void cci_dataset_free(struct CciDataset *ds);

/**
 * # Safety
 * `ds` must be a live handle; `out` must be writable.
 */
enum CciStatus cci_dataset_region_count(const struct CciDataset *ds, size_t *out);

/**
 * Emissions in REU of a 1 kW job in `region` from `start_unix` for
 * `duration_s` seconds.
 *
 * # Safety
 * `ds` must be a live handle, `region` NUL-terminated, `out` writable.
 */
enum CciStatus cci_integrate_emissions(const struct CciDataset *ds,
                                       const char *region,
                                       int64_t start_unix,
                                       int64_t duration_s,
                                       enum CciKind kind,
                                       double *out);

/**
 * Creates a service over a copy of `ds`. `strategy` is `round_robin`,
 * `location` or `location_time`; `buffer_hours` applies to the last.
 *
 * # Safety
 * `ds` must be a live handle, `strategy` NUL-terminated, `out` writable.
 */
enum CciStatus cci_service_new(const struct CciDataset *ds,
                               const char *strategy,
                               double buffer_hours,
                               struct CciService **out);

/**
 * # Safety
 * `svc` must be NULL or a handle from this library not yet freed.
 */
void cci_service_free(struct CciService *svc);

/**
 * Schedules a job described by a JSON request; writes the JSON response.
 *
 * # Safety
 * `svc` must be a live handle, `request_json` NUL-terminated, `out` writable.
 */
enum CciStatus cci_schedule_json(const struct CciService *svc,
                                 const char *request_json,
                                 char **out);

/**
 * Reports a completed job; writes the JSON acknowledgement.
 *
 * # Safety
 * `svc` must be a live handle, `completion_json` NUL-terminated, `out` writable.
 */
enum CciStatus cci_complete_json(const struct CciService *svc,
                                 const char *completion_json,
                                 char **out);

/**
 * Parses the carbon annotations of a workflow document into JSON.
 *
 * # Safety
 * `yaml` must be NUL-terminated; `out` must be writable.
 */
enum CciStatus cci_parse_annotation(const char *yaml, char **out);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library not yet freed.
 */
void cci_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CARBONCI_H */
