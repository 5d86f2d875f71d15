#ifndef CADUNET_H
#define CADUNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CadunetPreset {
  CADUNET_PRESET_PAPER = 0,
  CADUNET_PRESET_TINY = 1,
} CadunetPreset;

typedef enum CadunetStatus {
  CADUNET_STATUS_OK = 0,
  CADUNET_STATUS_NULL_POINTER = 1,
  CADUNET_STATUS_INVALID_ARGUMENT = 2,
  CADUNET_STATUS_IO = 3,
  CADUNET_STATUS_FORMAT = 4,
  CADUNET_STATUS_SHAPE = 5,
  CADUNET_STATUS_NON_FINITE = 6,
  CADUNET_STATUS_PANIC = 7,
} CadunetStatus;

// A model with its codec.
typedef struct CadunetModel CadunetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *cadunet_last_error(void);

// Static name of a status code.
const char *cadunet_status_str(enum CadunetStatus status);

const char *cadunet_version(void);

// Loads a checkpoint written by training.
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
enum CadunetStatus cadunet_model_load(const char *path, struct CadunetModel **out);

// Creates an untrained single-precision model.
//
// # Safety
// `out` must be a valid pointer.
enum CadunetStatus cadunet_model_new(enum CadunetPreset preset,
                                     uint64_t seed,
                                     struct CadunetModel **out);

// Writes the model as a checkpoint.
//
// # Safety
// `model` must come from this library and `path` be nul-terminated.
enum CadunetStatus cadunet_model_save(const struct CadunetModel *model, const char *path);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void cadunet_model_free(struct CadunetModel *model);

// Microphone channels the model expects, or 0 for a null handle.
//
// # Safety
// `model` must be null or come from this library.
size_t cadunet_model_channels(const struct CadunetModel *model);

// Samples per processing segment, or 0 for a null handle.
//
// # Safety
// `model` must be null or come from this library.
size_t cadunet_model_segment_len(const struct CadunetModel *model);

// Bytes per stored parameter (4 or 8), or 0 for a null handle.
//
// # Safety
// `model` must be null or come from this library.
size_t cadunet_model_precision(const struct CadunetModel *model);

// Separates `input` into speech and noise estimates. The three buffers
// hold `frames × channels` interleaved samples; outputs are fully written
// on success and untouched on failure.
//
// # Safety
// `input`, `speech` and `noise` must each point to `frames × channels`
// floats; the outputs must not overlap the input.
enum CadunetStatus cadunet_enhance(const struct CadunetModel *model,
                                   const float *input,
                                   size_t frames,
                                   size_t channels,
                                   float *speech,
                                   float *noise);

// Scale-invariant SDR of `estimate` against `reference` in dB.
//
// # Safety
// Both arrays must hold `len` doubles and `out` must be valid.
enum CadunetStatus cadunet_si_sdr(const double *estimate,
                                  const double *reference,
                                  size_t len,
                                  double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CADUNET_H */
