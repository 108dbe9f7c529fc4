#ifndef MSKAM_H
#define MSKAM_H

/* Generated by cbindgen from the mskam-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes mirroring the batch interface's exit codes.
typedef enum MskamStatus {
  MskamOk = 0,
  // Configuration or input-document error.
  MskamErrConfig = 2,
  // Numerical failure.
  MskamErrNumeric = 3,
  // A nonresonance floor excluded the result.
  MskamErrFloor = 4,
  // A required pointer argument was null.
  MskamErrNullArg = 5,
  // A string argument was not valid UTF-8.
  MskamErrUtf8 = 6,
} MskamStatus;

// Opaque Taylor-Fourier series handle.
typedef struct MskamSeries MskamSeries;

// Message of the last error on this thread; the pointer stays valid until
// the next failing call on the same thread.
const char *mskam_last_error_message(void);

// Parse a series from its canonical JSON document.
//
// # Safety
// `json` must be a valid NUL-terminated string and `out` a valid pointer;
// the returned handle must be released with [`mskam_series_free`].
enum MskamStatus mskam_series_from_json(const char *json, struct MskamSeries **out);

// Serialize a series to its canonical JSON document (release the string
// with [`mskam_string_free`]).
//
// # Safety
// `series` must be a live handle from this library; `out_json` valid.
enum MskamStatus mskam_series_to_json(const struct MskamSeries *series, char **out_json);

// Poisson bracket of two series (standard symplectic structure).
//
// # Safety
// `a`, `b` must be live handles; `out` valid. Release the result with
// [`mskam_series_free`].
enum MskamStatus mskam_series_poisson_bracket(const struct MskamSeries *a,
                                              const struct MskamSeries *b,
                                              struct MskamSeries **out);

// Majorant norm of a series on the domain D(angle_strip, radius).
//
// # Safety
// `series` must be a live handle; `out` valid.
enum MskamStatus mskam_series_weighted_norm(const struct MskamSeries *series,
                                            double angle_strip,
                                            double radius,
                                            double *out);

// Release a series handle (null is a no-op).
//
// # Safety
// `series` must be null or a handle returned by this library, not yet
// freed.
void mskam_series_free(struct MskamSeries *series);

// Release a string returned by this library (null is a no-op).
//
// # Safety
// `s` must be null or a string returned by this library, not yet freed.
void mskam_string_free(char *s);

// Execute a batch configuration file, writing artifacts under `out_dir`
// exactly like the command-line interface.
//
// # Safety
// Both arguments must be valid NUL-terminated paths.
enum MskamStatus mskam_run_config_file(const char *config_path, const char *out_dir);

// Detect the resonance lattice of a frequency vector: writes the rank to
// `out_rank` and up to `dim` generator columns (each of length `dim`,
// column-major) into `out_generators`, whose capacity must be at least
// `dim * dim` entries.
//
// # Safety
// `omega` must point to `dim` doubles and `out_generators` to at least
// `dim * dim` writable i64 slots.
enum MskamStatus mskam_detect_resonance(const double *omega,
                                        uintptr_t dim,
                                        double tol,
                                        int64_t cap,
                                        uintptr_t *out_rank,
                                        int64_t *out_generators);

#endif  /* MSKAM_H */
