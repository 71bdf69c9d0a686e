#ifndef FODE_H
#define FODE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FodeStatus {
  FODE_STATUS_OK = 0,
  FODE_STATUS_NULL_POINTER = 1,
  FODE_STATUS_INVALID_ARGUMENT = 2,
  FODE_STATUS_SHAPE_MISMATCH = 3,
  FODE_STATUS_IO = 4,
  FODE_STATUS_CHECKPOINT = 5,
  FODE_STATUS_NUMERICAL = 6,
  FODE_STATUS_PANIC = 7,
} FodeStatus;

typedef enum FodeFieldKind {
  FODE_FIELD_KIND_FOURIER = 0,
  FODE_FIELD_KIND_TIME_DOMAIN = 1,
} FodeFieldKind;

typedef enum FodeFilterInit {
  FODE_FILTER_INIT_ZEROS = 0,
  FODE_FILTER_INIT_ONES = 1,
  FODE_FILTER_INIT_UNIFORM = 2,
  FODE_FILTER_INIT_XAVIER = 3,
} FodeFilterInit;

// Opaque model handle.
typedef struct FodeModel FodeModel;

// Bound terms of the field's Lipschitz certificate.
typedef struct FodeLipschitz {
  double l_fft;
  double l_ifft;
  double l_pack;
  double l_unpack;
  double l_g;
  double l_f_bound;
} FodeLipschitz;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL
// terminated, truncated to `buf_len`). Returns the full message length
// including the terminator, so a call with `buf_len = 0` sizes the
// buffer.
size_t fode_last_error_message(char *buf, size_t buf_len);

// Library version as a static NUL-terminated string.
const char *fode_version(void);

// Creates a forecasting model with Xavier perceptron weights. `kind` is
// a `FodeFieldKind` and `k_init` a `FodeFilterInit` value.
enum FodeStatus fode_model_new(uint32_t kind,
                               size_t window_len,
                               size_t channels,
                               size_t hidden,
                               bool use_filter,
                               uint32_t k_init,
                               uint64_t seed,
                               struct FodeModel **out);

enum FodeStatus fode_model_load(const char *path, struct FodeModel **out);

enum FodeStatus fode_model_save(const struct FodeModel *model, const char *path);

// Releases a handle; null is ignored.
void fode_model_free(struct FodeModel *model);

enum FodeStatus fode_model_dims(const struct FodeModel *model,
                                size_t *window_len,
                                size_t *channels);

// Next-window forecast for one raw window, solved with the adaptive
// solver at default tolerances.
enum FodeStatus fode_model_predict(const struct FodeModel *model,
                                   const double *window,
                                   size_t len,
                                   double *out,
                                   size_t out_len);

// Field value `dx/dt` at state `x` (model units) and time `t`.
enum FodeStatus fode_model_vector_field(const struct FodeModel *model,
                                        const double *x,
                                        size_t len,
                                        double t,
                                        double *out,
                                        size_t out_len);

enum FodeStatus fode_model_lipschitz(const struct FodeModel *model, struct FodeLipschitz *out);

// Complex DFT of length `n` (unnormalised forward, `1/n` inverse).
// Input and output arrays may not alias.
enum FodeStatus fode_fft(const double *re_in,
                         const double *im_in,
                         size_t n,
                         bool inverse,
                         double *re_out,
                         double *im_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FODE_H */
