/* voxfuse: multimodal voxel-image fusion 3D detection on synthetic scenes.
 *
 * C API over the core library. All functions return VF_OK on success or a
 * status code on failure; vf_last_error() gives a thread-local message for
 * the most recent failure on the calling thread. Strings returned through
 * char** out-parameters are heap-allocated and must be released with
 * vf_string_free(). Handles are opaque and freed with their _close function.
 */
#ifndef VOXFUSE_H
#define VOXFUSE_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum vf_status {
  VF_OK = 0,
  VF_E_INVALID_ARGUMENT = 1,
  VF_E_SHAPE = 2,
  VF_E_NUMERIC = 3,
  VF_E_IO = 4,
  VF_E_PARSE = 5,
  VF_E_BEHIND_CAMERA = 6,
  VF_E_DEGENERATE_BOX = 7,
  VF_E_UNSUPPORTED_ROTATION = 8,
  VF_E_PLACEMENT = 9,
  VF_E_EMPTY_BATCH = 10,
  VF_E_STATE = 11,
  VF_E_UNSUPPORTED = 12,
  VF_E_UNKNOWN = 13
} vf_status;

const char* vf_version(void);
const char* vf_status_name(vf_status status);
const char* vf_last_error(void);
void vf_string_free(char* s);

typedef struct vf_dataset vf_dataset;
typedef struct vf_model vf_model;

/* Writes scene_count scene directories plus manifest.json under out_dir.
 * scene_config_json may be NULL for the default scene generator settings. */
vf_status vf_generate_dataset(const char* out_dir, int32_t scene_count, uint64_t seed,
                              const char* scene_config_json);

vf_status vf_dataset_open(const char* dir, vf_dataset** out);
void vf_dataset_close(vf_dataset* ds);
int32_t vf_dataset_scene_count(const vf_dataset* ds);
vf_status vf_dataset_scene_id(const vf_dataset* ds, int32_t index, char** id_out);

/* The default run configuration as JSON (the schema train/ablate accept). */
vf_status vf_default_run_config(char** json_out);

/* Trains per the JSON run configuration. out_dir may be NULL to skip writing
 * run.json / metrics.json / checkpoint; report_json_out may be NULL. */
vf_status vf_train(const char* run_config_json, const char* out_dir, char** report_json_out);

/* Runs one ablation axis (components | query | source | loss), n_seeds runs
 * per row on up to `jobs` worker threads. */
vf_status vf_ablate(const char* run_config_json, const char* axis, const char* out_dir,
                    int32_t n_seeds, int32_t jobs, char** table_json_out);

/* Per-module gradient verification; module NULL or "" runs every module.
 * The report is a JSON array of {"module", "max_rel_error"}. */
vf_status vf_gradcheck(const char* module, char** report_json_out);

vf_status vf_model_open(const char* checkpoint_dir, vf_model** out);
void vf_model_close(vf_model* model);

/* Evaluates on a dataset split ("eval", "train" or "all"). */
vf_status vf_model_evaluate(const vf_model* model, const char* data_dir, const char* split,
                            char** metrics_json_out);

/* Writes per-voxel alignment heatmaps (16-bit PGM) plus stats.json under
 * out_dir for one scene of the dataset. */
vf_status vf_model_dump_align_map(const vf_model* model, const char* data_dir,
                                  const char* scene_id, const char* out_dir, int32_t n_voxels,
                                  uint64_t selector_seed, char** stats_json_out);

#ifdef __cplusplus
}
#endif

#endif /* VOXFUSE_H */
