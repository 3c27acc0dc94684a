/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef TRUSTSIM_H
#define TRUSTSIM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Length in bytes of a register value or measurement.
#define TS_DIGEST_LEN 20

// Number of registers in a bank.
#define TS_PCR_COUNT 24

typedef enum {
  TS_STATUS_OK = 0,
  // A required pointer argument was null.
  TS_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  TS_STATUS_INVALID_UTF8 = 2,
  // Unknown attack, bad variant or malformed variant JSON.
  TS_STATUS_CONFIG = 3,
  TS_STATUS_UNKNOWN_SCENARIO = 4,
  // The scenario failed while running.
  TS_STATUS_RUN = 5,
  // A transcript could not be parsed.
  TS_STATUS_PARSE = 6,
  // A register index was out of range.
  TS_STATUS_OUT_OF_RANGE = 7,
  // The library panicked; the call had no effect.
  TS_STATUS_PANIC = 8,
} TsStatus;

// A bank of SHA-1 platform configuration registers.
typedef struct TsPcrBank TsPcrBank;

// A finished scenario run.
typedef struct TsRun TsRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Run a catalog scenario.
//
// `attack` may be null for an attack-free run. `variants_json` may be null
// or a JSON object of string overrides, e.g. `{"encryption":"off"}`.
// On success `*out` receives a handle to free with [`ts_run_free`].
//
// # Safety
// String arguments must be null or NUL-terminated; `out` must be writable.
TsStatus ts_run_new(const char *scenario,
                    uint64_t seed,
                    const char *attack,
                    const char *variants_json,
                    TsRun **out);

// 1 if every check held, 0 if not, -1 for a null handle.
//
// # Safety
// `run` must be null or a live handle from [`ts_run_new`].
int ts_run_passed(const TsRun *run);

// JSON-lines transcript; valid until the handle is freed. Null for a null
// handle.
//
// # Safety
// `run` must be null or a live handle from [`ts_run_new`].
const char *ts_run_transcript(const TsRun *run);

// Report as JSON; valid until the handle is freed. Null for a null handle.
//
// # Safety
// `run` must be null or a live handle from [`ts_run_new`].
const char *ts_run_report_json(const TsRun *run);

// # Safety
// `run` must be null or a handle from [`ts_run_new`] not yet freed.
void ts_run_free(TsRun *run);

// Audit, replay and re-check a transcript.
//
// On `TsStatus::Ok`, `*out_report_json` receives the report (free with
// [`ts_string_free`]) and `*out_passed` is 1 if every check held. A header
// naming an unknown scenario, attack or variant yields `TsStatus::Config`
// or `TsStatus::UnknownScenario`.
//
// # Safety
// `transcript` must be NUL-terminated; out pointers must be writable.
TsStatus ts_verify_transcript(const char *transcript, char **out_report_json, int *out_passed);

// Catalog as a JSON array of `{name, kind, description, attacks,
// variants}`. Free with [`ts_string_free`].
//
// # Safety
// `out` must be writable.
TsStatus ts_catalog_json(char **out);

// Release a string returned through an out-parameter.
//
// # Safety
// `s` must be null or a string from this library not yet freed.
void ts_string_free(char *s);

// SHA-1 of `len` bytes at `data` into `out[20]`. `data` may be null when
// `len` is 0.
//
// # Safety
// `data` must be readable for `len` bytes; `out` writable for 20.
TsStatus ts_hash160(const uint8_t *data, size_t len, uint8_t *out);

// A bank with every register zero. Free with [`ts_pcr_bank_free`].
TsPcrBank *ts_pcr_bank_new(void);

// Extend register `index` with a 20-byte measurement.
//
// # Safety
// `bank` must be a live handle; `measurement` readable for 20 bytes.
TsStatus ts_pcr_bank_extend(TsPcrBank *bank, size_t index, const uint8_t *measurement);

// Copy register `index` into `out[20]`.
//
// # Safety
// `bank` must be a live handle; `out` writable for 20 bytes.
TsStatus ts_pcr_bank_read(const TsPcrBank *bank, size_t index, uint8_t *out);

// # Safety
// `bank` must be null or a handle from [`ts_pcr_bank_new`] not yet freed.
void ts_pcr_bank_free(TsPcrBank *bank);

// Message for the last failure on this thread, or an empty string. Valid
// until the next call into the library on this thread.
const char *ts_last_error_message(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRUSTSIM_H */
