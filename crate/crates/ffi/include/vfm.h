#ifndef VFM_H
#define VFM_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define VFM_TASK_LINEAR 0

#define VFM_TASK_LOGISTIC 1

#define VFM_BACKEND_SECRET_SHARING 0

#define VFM_BACKEND_PLAINTEXT 1

typedef enum VfmStatus {
  VFM_STATUS_OK = 0,
  VFM_STATUS_NULL_POINTER = 1,
  VFM_STATUS_INVALID_ARGUMENT = 2,
  VFM_STATUS_PROTOCOL = 3,
  VFM_STATUS_SOLVER = 4,
  VFM_STATUS_IO = 5,
  VFM_STATUS_PANIC = 6,
} VfmStatus;

// Opaque dataset handle.
typedef struct VfmDataset VfmDataset;

// Opaque model handle.
typedef struct VfmModel VfmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` with a
// terminating NUL, truncating to `len`. Returns the full message length
// without the NUL; pass a null buffer to query it.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t vfm_last_error(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *vfm_version(void);

// Generates a synthetic dataset.
//
// # Safety
// `out` must point to writable storage for one handle.
enum VfmStatus vfm_dataset_generate(uint32_t task,
                                    size_t n,
                                    size_t d,
                                    double sparsity,
                                    uint64_t seed,
                                    struct VfmDataset **out);

// Loads a CSV file with min-max normalization.
//
// # Safety
// `path` and `label` must be NUL-terminated strings; `out` must point to
// writable storage for one handle.
enum VfmStatus vfm_dataset_load_csv(const char *path,
                                    const char *label,
                                    uint32_t task,
                                    struct VfmDataset **out);

// Number of records; 0 for a null handle.
//
// # Safety
// `ds` must be null or a live dataset handle.
size_t vfm_dataset_len(const struct VfmDataset *ds);

// Number of features; 0 for a null handle.
//
// # Safety
// `ds` must be null or a live dataset handle.
size_t vfm_dataset_dim(const struct VfmDataset *ds);

// # Safety
// `ds` must be null or a handle not freed before.
void vfm_dataset_free(struct VfmDataset *ds);

// Trains with the distributed functional mechanism over `parties` even
// vertical blocks. `epsilon` is the global privacy level; positive
// infinity turns noise off.
//
// # Safety
// `ds` must be a live dataset handle; `out` must point to writable storage
// for one handle.
enum VfmStatus vfm_train_fm(const struct VfmDataset *ds,
                            size_t parties,
                            double epsilon,
                            uint64_t seed,
                            uint32_t backend,
                            struct VfmModel **out);

// Number of weights; 0 for a null handle.
//
// # Safety
// `model` must be null or a live model handle.
size_t vfm_model_dim(const struct VfmModel *model);

// Copies the weights into `out`, which must hold exactly `len` values.
//
// # Safety
// `model` must be a live model handle; `out` must point to `len` doubles.
enum VfmStatus vfm_model_weights(const struct VfmModel *model, double *out, size_t len);

// Prediction for one record: the linear response, or the probability of
// label 1 for a logistic model.
//
// # Safety
// `model` must be a live model handle; `x` must point to `len` doubles and
// `out` to one.
enum VfmStatus vfm_model_predict(const struct VfmModel *model,
                                 const double *x,
                                 size_t len,
                                 double *out);

// Mean squared error (linear) or accuracy (logistic) on `ds`.
//
// # Safety
// Both handles must be live; `out` must point to one double.
enum VfmStatus vfm_model_evaluate(const struct VfmModel *model,
                                  const struct VfmDataset *ds,
                                  double *out);

// # Safety
// `model` must be null or a handle not freed before.
void vfm_model_free(struct VfmModel *model);

// Global sensitivity of the objective coefficients for `d` features.
//
// # Safety
// `out` must point to one double.
enum VfmStatus vfm_global_sensitivity(uint32_t task, size_t d, double *out);

// Sensitivity of the coefficients touching one party's `dk` features;
// `label_owner` is nonzero for the party holding the label.
//
// # Safety
// `out` must point to one double.
enum VfmStatus vfm_party_sensitivity(uint32_t task,
                                     size_t d,
                                     size_t dk,
                                     bool label_owner,
                                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VFM_H */
