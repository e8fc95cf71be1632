#ifndef CTRLLOOP_H
#define CTRLLOOP_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define CTRLLOOP_API __declspec(dllexport)
#else
#define CTRLLOOP_API __attribute__((visibility("default")))
#endif

/* Status codes double as CLI exit codes. */
typedef enum {
  CTRLLOOP_OK = 0,
  CTRLLOOP_ERR_VALIDATION = 1,
  CTRLLOOP_ERR_RUNTIME = 2,
  CTRLLOOP_ERR_IO = 3
} ctrlloop_status;

typedef struct ctrlloop_config ctrlloop_config;
typedef struct ctrlloop_model ctrlloop_model;

/* Receives progress messages; `user` is passed through unchanged. */
typedef void (*ctrlloop_log_fn)(const char* message, void* user);

CTRLLOOP_API const char* ctrlloop_version(void);
/* Message of the last failed call on this thread, or "" if none. */
CTRLLOOP_API const char* ctrlloop_last_error(void);
CTRLLOOP_API void ctrlloop_set_log(ctrlloop_log_fn fn, void* user);
/* Single-worker mode: one thread, deterministic kernels. */
CTRLLOOP_API ctrlloop_status ctrlloop_set_deterministic(int on);

/* ---- configuration ---- */
CTRLLOOP_API ctrlloop_status ctrlloop_config_new(ctrlloop_config** out);
CTRLLOOP_API ctrlloop_status ctrlloop_config_load(const char* path, ctrlloop_config** out);
CTRLLOOP_API ctrlloop_status ctrlloop_config_parse(const char* json_text, ctrlloop_config** out);
/* Dotted-path override, e.g. "train.rounds=2". Key names and value types are checked
   here; ranges and cross-field rules when the config is used. */
CTRLLOOP_API ctrlloop_status ctrlloop_config_set(ctrlloop_config* cfg, const char* assignment);
/* Returns a heap string owned by the caller; release with ctrlloop_string_free. */
CTRLLOOP_API ctrlloop_status ctrlloop_config_to_json(const ctrlloop_config* cfg, char** out);
CTRLLOOP_API ctrlloop_status ctrlloop_config_save(const ctrlloop_config* cfg, const char* path);
CTRLLOOP_API void ctrlloop_config_free(ctrlloop_config* cfg);
CTRLLOOP_API void ctrlloop_string_free(char* s);

/* ---- commands ---- */
CTRLLOOP_API ctrlloop_status ctrlloop_gen_data(const ctrlloop_config* cfg, const char* out_dir);
CTRLLOOP_API ctrlloop_status ctrlloop_train(const ctrlloop_config* cfg, const char* data_dir, const char* out_dir);
/* Like ctrlloop_train but stops after the checkpoint of `round` is written. */
CTRLLOOP_API ctrlloop_status ctrlloop_train_until(const ctrlloop_config* cfg, const char* data_dir,
                                                  const char* out_dir, int round);
/* target: a checkpoint file or a run directory. cfg may be NULL, in which case
 * the checkpoint's own evaluation settings are used and no model check is
 * made. out_dir may be NULL (defaults to <run>/eval/<checkpoint stem>). */
CTRLLOOP_API ctrlloop_status ctrlloop_eval(const ctrlloop_config* cfg, const char* target, const char* data_dir,
                                           const char* out_dir);
CTRLLOOP_API ctrlloop_status ctrlloop_ablate(const ctrlloop_config* cfg, const char* data_dir, const char* out_dir);
CTRLLOOP_API ctrlloop_status ctrlloop_report(const char* const* run_dirs, size_t n_runs, const char* out_dir);

/* ---- inference ---- */
CTRLLOOP_API ctrlloop_status ctrlloop_model_open(const char* checkpoint, ctrlloop_model** out);
/* Image side length the model was trained at. */
CTRLLOOP_API int ctrlloop_model_resolution(const ctrlloop_model* model);
/* ref_rgb / out_rgb: res*res*3 floats in [0, 1], row-major HWC. Angles in
 * degrees; the relative pose is target minus reference. */
CTRLLOOP_API ctrlloop_status ctrlloop_model_generate(ctrlloop_model* model, const float* ref_rgb, double d_elevation,
                                                     double d_azimuth, double d_radius, uint64_t seed, int steps,
                                                     float* out_rgb);
CTRLLOOP_API void ctrlloop_model_free(ctrlloop_model* model);

#ifdef __cplusplus
}
#endif

#endif
