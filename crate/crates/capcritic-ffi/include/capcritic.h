#ifndef CAPCRITIC_H
#define CAPCRITIC_H

/* Generated by cbindgen from the capcritic-ffi crate; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Outcome of an FFI call.
enum CapCriticStatus
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  CAP_CRITIC_STATUS_OK = 0,
  // A required pointer argument was null.
  CAP_CRITIC_STATUS_NULL_ARGUMENT = 1,
  // The arguments or configuration were invalid.
  CAP_CRITIC_STATUS_USAGE = 2,
  // The input data was malformed or inconsistent with the model.
  CAP_CRITIC_STATUS_DATA = 3,
  // Unexpected internal failure.
  CAP_CRITIC_STATUS_INTERNAL = 4,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum CapCriticStatus CapCriticStatus;
#else
typedef int32_t CapCriticStatus;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

// A trained critic bound to the vocabulary it was trained under.
typedef struct CapCriticModel CapCriticModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread. Valid until the
// next FFI call from the same thread; never null.
const char *capcritic_last_error(void);

// Library version as a static NUL-terminated string.
const char *capcritic_version(void);

// Loads a model file together with the vocabulary it was trained under.
// Returns null on failure; see [`capcritic_last_error`]. Free with
// [`capcritic_model_free`].
//
// # Safety
// `model_path` and `vocab_path` must be NUL-terminated strings.
struct CapCriticModel *capcritic_model_load(const char *model_path, const char *vocab_path);

// Releases a handle from [`capcritic_model_load`]. Null is a no-op.
//
// # Safety
// `h` must be a live handle or null; it must not be used afterwards.
void capcritic_model_free(struct CapCriticModel *h);

// Width of the image feature vector the model expects.
size_t capcritic_model_image_dim(const struct CapCriticModel *h);

// Whether scoring needs at least one reference caption (true whenever the
// model conditions on a reference).
bool capcritic_model_needs_reference(const struct CapCriticModel *h);

// Scores `candidate` as the probability of being human-written, given the
// image feature vector and optional reference captions.
//
// `image` must hold [`capcritic_model_image_dim`] doubles. `references`
// may be null (with `n_references` 0) for models that do not condition on
// a reference; models that do require at least one. With several
// references the score is averaged over each as context.
//
// # Safety
// Pointers must be valid for the lengths given; strings NUL-terminated.
CapCriticStatus capcritic_score(const struct CapCriticModel *h,
                                const double *image,
                                size_t image_len,
                                const char *const *references,
                                size_t n_references,
                                const char *candidate,
                                double *out_score);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAPCRITIC_H */
