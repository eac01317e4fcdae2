#ifndef AMCN_H
#define AMCN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible entry point.
#define AMCN_OK 0

// Runtime failure; see `amcn_last_error`.
#define AMCN_ERR_RUNTIME 1

// Null pointer or malformed argument.
#define AMCN_ERR_ARG 2

// Opaque trained-model handle: prompt bank, encoder, per-class
// statistics, and the hyperparameters they were fitted under.
typedef struct AmcnModel AmcnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Train a model from a JSON config and an AMCNEMB1 embedding file.
// On success `*out` owns a new handle.
//
// # Safety
// `config_path` and `data_path` must be NUL-terminated strings; `out`
// must be a valid pointer.
int32_t amcn_train_file(const char *config_path, const char *data_path, struct AmcnModel **out);

// Load a model from a bank checkpoint, a stats file, and the training
// config that produced them.
//
// # Safety
// All paths must be NUL-terminated strings; `out` must be valid.
int32_t amcn_model_load(const char *bank_path,
                        const char *stats_path,
                        const char *config_path,
                        struct AmcnModel **out);

// Persist the model's bank checkpoint and statistics.
//
// # Safety
// `model` must be a live handle; paths must be NUL-terminated strings.
int32_t amcn_model_save(const struct AmcnModel *model,
                        const char *bank_path,
                        const char *stats_path);

// Number of ID classes the model detects among.
//
// # Safety
// `model` must be a live handle.
int32_t amcn_num_classes(const struct AmcnModel *model);

// Embedding dimension the model expects.
//
// # Safety
// `model` must be a live handle.
int32_t amcn_dim(const struct AmcnModel *model);

// Score one embedding. The vector is renormalized onto the hypersphere.
// `is_ood` receives 0/1, `predicted_class` the class index or -1, and
// `score` the ranking scalar (larger = more ID).
//
// # Safety
// `model` must be a live handle; `embedding` must point to `len` doubles;
// the out pointers must be valid.
int32_t amcn_detect(const struct AmcnModel *model,
                    const double *embedding,
                    size_t len,
                    int32_t *is_ood,
                    int64_t *predicted_class,
                    double *score);

// Evaluate on ID and optional OOD embedding files. `auroc` and `fpr95`
// receive NaN when no OOD file is given.
//
// # Safety
// `model` must be a live handle; `id_path` a NUL-terminated string;
// `ood_path` NULL or a NUL-terminated string; out pointers valid.
int32_t amcn_evaluate_files(const struct AmcnModel *model,
                            const char *id_path,
                            const char *ood_path,
                            double *auroc,
                            double *fpr95,
                            double *id_accuracy);

// Release a handle. NULL is accepted.
//
// # Safety
// `model` must have come from this library and not been freed before.
void amcn_model_free(struct AmcnModel *model);

// Copy the last error message of this thread into `buf` (NUL-terminated,
// truncated to `cap`). Returns the full message length.
//
// # Safety
// `buf` must point to `cap` writable bytes, or `cap` must be 0.
size_t amcn_last_error(char *buf, size_t cap);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* AMCN_H */
