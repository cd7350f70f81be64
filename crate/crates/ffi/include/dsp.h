#ifndef DSP_H
#define DSP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DspStatus {
  DSP_STATUS_OK = 0,
  DSP_STATUS_NULL_ARGUMENT = 1,
  DSP_STATUS_MISSING_INPUT = 2,
  DSP_STATUS_INVALID_INPUT = 3,
  DSP_STATUS_NUMERICAL = 4,
  DSP_STATUS_IO = 5,
  DSP_STATUS_PANIC = 6,
} DspStatus;

/**
 * Pooled `d × p` subspace descriptor.
 */
typedef struct DspDescriptor DspDescriptor;

/**
 * Pooling parameters.
 */
typedef struct DspPoolParams DspPoolParams;

/**
 * Trained projection-kernel SVM.
 */
typedef struct DspSvm DspSvm;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *dsp_version(void);

/**
 * Message of the last failure on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *dsp_last_error(void);

/**
 * Default parameters with `p` hyperplanes.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum DspStatus dsp_params_new(size_t p, struct DspPoolParams **out);

/**
 * # Safety
 * `params` must be a handle from [`dsp_params_new`] or NULL.
 */
void dsp_params_free(struct DspPoolParams *params);

/**
 * # Safety
 * `params` must be a live handle.
 */
enum DspStatus dsp_params_set_ordering_weight(struct DspPoolParams *params, double weight);

/**
 * Nonzero `squared` selects the squared hinge.
 *
 * # Safety
 * `params` must be a live handle.
 */
enum DspStatus dsp_params_set_squared_hinge(struct DspPoolParams *params, int32_t squared);

/**
 * # Safety
 * `params` must be a live handle.
 */
enum DspStatus dsp_params_set_seed(struct DspPoolParams *params, uint64_t seed);

/**
 * Pools `n` frames of dimension `d` against the same frames shifted by
 * `epsilon` (length `d`; NULL means no shift).
 *
 * # Safety
 * `frames` must point to `n * d` doubles, `epsilon` to `d` doubles or be
 * NULL, and `out` to writable storage for one handle.
 */
enum DspStatus dsp_pool(const struct DspPoolParams *params,
                        const double *frames,
                        size_t n,
                        size_t d,
                        const double *epsilon,
                        struct DspDescriptor **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum DspStatus dsp_descriptor_read(const char *path, struct DspDescriptor **out);

/**
 * # Safety
 * `desc` must be a live handle and `path` a NUL-terminated string.
 */
enum DspStatus dsp_descriptor_write(const struct DspDescriptor *desc, const char *path);

/**
 * # Safety
 * `desc` must be a live handle; `d` and `p` writable or NULL.
 */
enum DspStatus dsp_descriptor_shape(const struct DspDescriptor *desc, size_t *d, size_t *p);

/**
 * Copies the descriptor column-major into `out`, which holds `len` doubles.
 *
 * # Safety
 * `desc` must be a live handle and `out` must point to `len` doubles.
 */
enum DspStatus dsp_descriptor_copy(const struct DspDescriptor *desc, double *out, size_t len);

/**
 * # Safety
 * `desc` must be a handle or NULL.
 */
void dsp_descriptor_free(struct DspDescriptor *desc);

/**
 * `exp(beta * ||AᵀB||²_F)`.
 *
 * # Safety
 * `a`, `b` must be live handles and `out` writable.
 */
enum DspStatus dsp_projection_kernel(const struct DspDescriptor *a,
                                     const struct DspDescriptor *b,
                                     double beta,
                                     double *out);

/**
 * Loads a model written by `dsp train-svm`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum DspStatus dsp_svm_read(const char *path, struct DspSvm **out);

/**
 * # Safety
 * `svm` and `desc` must be live handles and `label` writable.
 */
enum DspStatus dsp_svm_predict(const struct DspSvm *svm,
                               const struct DspDescriptor *desc,
                               size_t *label);

/**
 * # Safety
 * `svm` must be a handle or NULL.
 */
void dsp_svm_free(struct DspSvm *svm);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DSP_H */
