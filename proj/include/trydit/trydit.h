/* SPDX-License-Identifier: Apache-2.0
 *
 * C API for the trydit virtual try-on testbed. All functions return a
 * status code; trydit_last_error() carries a thread-local message for the
 * most recent failure on the calling thread. Handles are opaque and must
 * be released with their matching *_free function.
 */
#ifndef TRYDIT_H
#define TRYDIT_H

#include <stdint.h>

#if defined(_WIN32)
#define TRYDIT_API __declspec(dllexport)
#else
#define TRYDIT_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum trydit_status {
  TRYDIT_OK = 0,
  TRYDIT_ERR_INVALID_ARGUMENT = 1,
  TRYDIT_ERR_DIMENSION = 2, /* shape/extent mismatch */
  TRYDIT_ERR_CONTRACT = 3,  /* violated precondition */
  TRYDIT_ERR_IO = 4,
  TRYDIT_ERR_NONFINITE = 5,
  TRYDIT_ERR_INTERNAL = 6
} trydit_status;

TRYDIT_API const char* trydit_version(void);

/* Message for the last failure on this thread; empty string if none.
 * Valid until the next API call on the same thread. */
TRYDIT_API const char* trydit_last_error(void);

/* Caps any internal worker parallelism. 0 restores the default. */
TRYDIT_API void trydit_set_max_threads(int n);

/* ---------------------------------------------------------------------
 * Whole-command entry points. config_json is the run-config document
 * (NULL selects the built-in desk-scale defaults); paths are filesystem
 * paths. These mirror the CLI subcommands one to one.
 * ------------------------------------------------------------------- */

/* Writes out_dir/round_0 with `count` scored synthetic triplets. Refuses
 * a non-empty target unless force != 0. */
TRYDIT_API trydit_status trydit_gen_data(const char* config_json, uint64_t seed, int64_t count,
                                         const char* out_dir, int force);

/* Trains for `steps` on the newest round under data_dir and writes the
 * checkpoint directory plus loss_curve.csv and train_summary.json.
 * init_from (optional) seeds the weights from an existing checkpoint for
 * resolution transfer; policy (optional) overrides the config's
 * trainability policy: "full", "conditional_only" or "conditional_lora". */
TRYDIT_API trydit_status trydit_train(const char* config_json, const char* data_dir, int64_t steps,
                                      const char* out_ckpt, const char* init_from,
                                      const char* policy);

/* Euler-samples a try-on image for (person, garment) PPM inputs and
 * writes out_ppm plus an out_ppm.json sidecar. steps <= 0 uses the
 * checkpoint's configured sampler steps. */
TRYDIT_API trydit_status trydit_sample(const char* ckpt_dir, const char* person_ppm,
                                       const char* garment_ppm, int64_t steps, uint64_t seed,
                                       const char* out_ppm);

/* Samples every record of the dataset and writes an SSIM/PSNR/Frechet
 * report to report_json_path. */
TRYDIT_API trydit_status trydit_eval(const char* ckpt_dir, const char* data_dir,
                                     const char* report_json_path);

/* Paired runs differing only on `axis` ("mask", "pos_scheme" or
 * "policy"); trains each side for `steps` and writes a comparison
 * report. */
TRYDIT_API trydit_status trydit_ablate(const char* config_json, const char* data_dir,
                                       const char* axis, int64_t steps,
                                       const char* report_json_path);

/* ---------------------------------------------------------------------
 * Handle API for embedding.
 * ------------------------------------------------------------------- */

typedef struct trydit_model trydit_model;

TRYDIT_API trydit_status trydit_model_create(const char* config_json, uint64_t seed,
                                             trydit_model** out);
TRYDIT_API trydit_status trydit_model_load(const char* ckpt_dir, trydit_model** out);
TRYDIT_API trydit_status trydit_model_save(const trydit_model* model, const char* ckpt_dir);
TRYDIT_API trydit_status trydit_model_sample_file(const trydit_model* model, const char* person_ppm,
                                                  const char* garment_ppm, int64_t steps,
                                                  uint64_t seed, const char* out_ppm);
TRYDIT_API int64_t trydit_model_step(const trydit_model* model);
TRYDIT_API void trydit_model_free(trydit_model* model);

typedef struct trydit_pool trydit_pool;

TRYDIT_API trydit_status trydit_pool_generate(const char* config_json, uint64_t seed, int64_t count,
                                              trydit_pool** out);
TRYDIT_API trydit_status trydit_pool_load(const char* round_dir, trydit_pool** out);
TRYDIT_API trydit_status trydit_pool_save(const trydit_pool* pool, const char* round_dir);
TRYDIT_API int64_t trydit_pool_size(const trydit_pool* pool);
TRYDIT_API trydit_status trydit_pool_scores(const trydit_pool* pool, int64_t index,
                                            double* garment_consistency, double* person_consistency,
                                            double* realism);
TRYDIT_API void trydit_pool_free(trydit_pool* pool);

#ifdef __cplusplus
}
#endif

#endif /* TRYDIT_H */
