#ifndef ME_MAMBA_H
#define ME_MAMBA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum MmStatus {
  MM_STATUS_OK = 0,
  MM_STATUS_NULL_POINTER = 1,
  MM_STATUS_INVALID_UTF8 = 2,
  MM_STATUS_DIMENSION = 3,
  MM_STATUS_DOMAIN = 4,
  MM_STATUS_NON_FINITE = 5,
  MM_STATUS_USAGE = 6,
  MM_STATUS_MODE = 7,
  MM_STATUS_UNDEFINED_METRIC = 8,
  MM_STATUS_CONFIG = 9,
  MM_STATUS_FORMAT = 10,
  MM_STATUS_IO = 11,
  MM_STATUS_JSON = 12,
  MM_STATUS_PANIC = 13,
} MmStatus;

// Dense row-major matrix.
typedef struct MmMatrix MmMatrix;

// Trained model restored from a checkpoint.
typedef struct MmModel MmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *mm_last_error_message(void);

// Library version as a static nul-terminated string.
const char *mm_version(void);

// Copies `rows * cols` values from `data` into a new matrix.
//
// # Safety
// `data` must point to `rows * cols` readable doubles; `out` must be writable.
enum MmStatus mm_matrix_new(size_t rows, size_t cols, const double *data, struct MmMatrix **out);

// # Safety
// `m` must be null or a handle from this library that has not been freed.
void mm_matrix_free(struct MmMatrix *m);

// # Safety
// `m` must be a live matrix handle; `rows` and `cols` must be writable.
enum MmStatus mm_matrix_shape(const struct MmMatrix *m, size_t *rows, size_t *cols);

// Copies the row-major values into `out`, which holds `len` doubles.
//
// # Safety
// `m` must be a live matrix handle; `out` must have room for `len` doubles.
enum MmStatus mm_matrix_copy_data(const struct MmMatrix *m, double *out, size_t len);

// Reads an MEBG matrix file.
//
// # Safety
// `path` must be a nul-terminated string; `out` must be writable.
enum MmStatus mm_bag_load(const char *path, struct MmMatrix **out);

// Writes an MEBG matrix file (values stored as 32-bit floats).
//
// # Safety
// `path` must be a nul-terminated string; `m` must be a live matrix handle.
enum MmStatus mm_bag_save(const char *path, const struct MmMatrix *m);

// Harrell's C-index. `censored[i] != 0` marks a censored patient.
//
// # Safety
// The three arrays must each hold `n` elements; `out` must be writable.
enum MmStatus mm_c_index(const double *risks,
                         const double *times,
                         const uint8_t *censored,
                         size_t n,
                         double *out);

// Two-group log-rank test.
//
// # Safety
// Group arrays must hold `n_a` and `n_b` elements; `chi2` and `p` must be writable.
enum MmStatus mm_logrank(const double *times_a,
                         const uint8_t *censored_a,
                         size_t n_a,
                         const double *times_b,
                         const uint8_t *censored_b,
                         size_t n_b,
                         double *chi2,
                         double *p);

// Restores a model from a JSON checkpoint written by `train`.
//
// # Safety
// `path` must be a nul-terminated string; `out` must be writable.
enum MmStatus mm_model_load(const char *path, struct MmModel **out);

// # Safety
// `m` must be null or a handle from this library that has not been freed.
void mm_model_free(struct MmModel *m);

// Number of hazard intervals, or 0 for a null handle.
//
// # Safety
// `m` must be null or a live model handle.
size_t mm_model_n_bins(const struct MmModel *m);

// Feature width the model expects, or 0 for a null handle.
//
// # Safety
// `m` must be null or a live model handle.
size_t mm_model_d_model(const struct MmModel *m);

// Per-interval hazards and the scalar risk score for one patient.
//
// `hazards` receives `len` values and `len` must equal [`mm_model_n_bins`].
// `risk` may be null.
//
// # Safety
// Handles must be live; `hazards` must have room for `len` doubles.
enum MmStatus mm_model_predict(const struct MmModel *m,
                               const struct MmMatrix *bag,
                               const struct MmMatrix *genomics,
                               double *hazards,
                               size_t len,
                               double *risk);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ME_MAMBA_H */
