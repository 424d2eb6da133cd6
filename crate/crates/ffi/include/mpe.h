#ifndef MPE_H
#define MPE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MpeStatus {
  MPE_STATUS_OK = 0,
  MPE_STATUS_NULL_POINTER = 1,
  MPE_STATUS_INVALID_UTF8 = 2,
  MPE_STATUS_INVALID_INPUT = 3,
  MPE_STATUS_IO = 4,
  MPE_STATUS_MALFORMED = 5,
  MPE_STATUS_INVARIANT_VIOLATED = 6,
  MPE_STATUS_DUPLICATE_EDIT = 7,
  MPE_STATUS_EMPTY_MEMORY = 8,
  MPE_STATUS_UNKNOWN_OPERATOR = 9,
  MPE_STATUS_BACKEND = 10,
  MPE_STATUS_INTERNAL = 11,
} MpeStatus;

// Edit memory with the hashing embedder and the rule-based prompt editor.
typedef struct MpeMemory MpeMemory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call into the library from the same thread.
const char *mpe_last_error(void);

// Releases a string returned by the library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed already.
void mpe_string_free(char *s);

struct MpeMemory *mpe_memory_new(void);

// # Safety
// `memory` must come from [`mpe_memory_new`] and not have been freed already.
void mpe_memory_free(struct MpeMemory *memory);

// # Safety
// `memory` must be a live handle; strings must be NUL-terminated.
enum MpeStatus mpe_memory_insert(struct MpeMemory *memory,
                                 const char *id,
                                 const char *edit_prompt,
                                 const char *target_prompt);

// # Safety
// `memory` must be a live handle and `len` writable.
enum MpeStatus mpe_memory_len(const struct MpeMemory *memory, size_t *len);

// Rewrites `prompt` against the memory. On success `*rewritten` receives a
// string to be released with [`mpe_string_free`].
//
// # Safety
// `memory` must be a live handle, `prompt` NUL-terminated and `rewritten` writable.
enum MpeStatus mpe_memory_edit(const struct MpeMemory *memory,
                               const char *prompt,
                               char **rewritten);

// Sample mean and Bessel-corrected standard deviation of `len` scores.
//
// # Safety
// `scores` must point to `len` doubles; outputs must be writable.
enum MpeStatus mpe_estimate(const double *scores, size_t len, double *mu_hat, double *sigma_hat);

// `op_name` is one of `mu-1sigma` .. `mu-3sigma`.
//
// # Safety
// `op_name` must be NUL-terminated and `result` writable.
enum MpeStatus mpe_threshold(double mu_hat, double sigma_hat, const char *op_name, double *result);

bool mpe_decide(double score, double threshold);

// # Safety
// `rates` must point to `len` doubles and `result` be writable.
enum MpeStatus mpe_geometric_mean(const double *rates, size_t len, double *result);

// # Safety
// `percent` must be writable.
enum MpeStatus mpe_retention(double score_at_k, double score_at_1, uint32_t *percent);

// Loads and validates a dataset file. `entries` may be null.
//
// # Safety
// `path` must be NUL-terminated; `entries`, if not null, writable.
enum MpeStatus mpe_dataset_validate(const char *path, size_t *entries);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* MPE_H */
