#include "voxfuse.h"

#include <cstring>
#include <string>

#include "vf/config.hpp"
#include "vf/scene.hpp"
#include "vf/train.hpp"

using nlohmann::json;

namespace {

thread_local std::string g_last_error;

vf_status map_code(vf::ErrorCode c) {
  switch (c) {
    case vf::ErrorCode::invalid_argument: return VF_E_INVALID_ARGUMENT;
    case vf::ErrorCode::shape: return VF_E_SHAPE;
    case vf::ErrorCode::numeric: return VF_E_NUMERIC;
    case vf::ErrorCode::io: return VF_E_IO;
    case vf::ErrorCode::parse: return VF_E_PARSE;
    case vf::ErrorCode::behind_camera: return VF_E_BEHIND_CAMERA;
    case vf::ErrorCode::degenerate_box: return VF_E_DEGENERATE_BOX;
    case vf::ErrorCode::unsupported_rotation: return VF_E_UNSUPPORTED_ROTATION;
    case vf::ErrorCode::placement: return VF_E_PLACEMENT;
    case vf::ErrorCode::empty_batch: return VF_E_EMPTY_BATCH;
    case vf::ErrorCode::state: return VF_E_STATE;
    case vf::ErrorCode::unsupported: return VF_E_UNSUPPORTED;
  }
  return VF_E_UNKNOWN;
}

template <typename Fn>
vf_status wrap(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return VF_OK;
  } catch (const vf::Error& e) {
    g_last_error = e.what();
    return map_code(e.code());
  } catch (const json::exception& e) {
    g_last_error = e.what();
    return VF_E_PARSE;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return VF_E_UNKNOWN;
  } catch (...) {
    g_last_error = "unknown error";
    return VF_E_UNKNOWN;
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void require(bool cond, const char* msg) {
  if (!cond) vf::fail(vf::ErrorCode::invalid_argument, msg);
}

vf::RunConfig parse_run_config(const char* text) {
  require(text != nullptr, "run config JSON is null");
  return vf::RunConfig::from_json(json::parse(text));
}

std::vector<std::string> split_ids(const vf::Dataset& ds, const std::string& split) {
  if (split == "eval") return ds.eval_ids;
  if (split == "train") return ds.train_ids;
  if (split == "all") return ds.scene_ids;
  vf::fail(vf::ErrorCode::invalid_argument, "split must be eval|train|all, got '" + split + "'");
}

}  // namespace

struct vf_dataset {
  vf::Dataset ds;
};

struct vf_model {
  vf::Model model;
};

extern "C" {

const char* vf_version(void) { return vf::kVersion; }

const char* vf_status_name(vf_status status) {
  switch (status) {
    case VF_OK: return "VF_OK";
    case VF_E_INVALID_ARGUMENT: return "VF_E_INVALID_ARGUMENT";
    case VF_E_SHAPE: return "VF_E_SHAPE";
    case VF_E_NUMERIC: return "VF_E_NUMERIC";
    case VF_E_IO: return "VF_E_IO";
    case VF_E_PARSE: return "VF_E_PARSE";
    case VF_E_BEHIND_CAMERA: return "VF_E_BEHIND_CAMERA";
    case VF_E_DEGENERATE_BOX: return "VF_E_DEGENERATE_BOX";
    case VF_E_UNSUPPORTED_ROTATION: return "VF_E_UNSUPPORTED_ROTATION";
    case VF_E_PLACEMENT: return "VF_E_PLACEMENT";
    case VF_E_EMPTY_BATCH: return "VF_E_EMPTY_BATCH";
    case VF_E_STATE: return "VF_E_STATE";
    case VF_E_UNSUPPORTED: return "VF_E_UNSUPPORTED";
    case VF_E_UNKNOWN: return "VF_E_UNKNOWN";
  }
  return "VF_E_UNKNOWN";
}

const char* vf_last_error(void) { return g_last_error.c_str(); }

void vf_string_free(char* s) { std::free(s); }

vf_status vf_generate_dataset(const char* out_dir, int32_t scene_count, uint64_t seed,
                              const char* scene_config_json) {
  return wrap([&]() {
    require(out_dir != nullptr, "out_dir is null");
    vf::SceneConfig cfg = scene_config_json == nullptr
                              ? vf::SceneConfig::defaults()
                              : vf::SceneConfig::from_json(json::parse(scene_config_json));
    vf::generate_dataset(out_dir, scene_count, seed, cfg);
  });
}

vf_status vf_dataset_open(const char* dir, vf_dataset** out) {
  return wrap([&]() {
    require(dir != nullptr && out != nullptr, "dir/out is null");
    auto* handle = new vf_dataset{vf::open_dataset(dir)};
    *out = handle;
  });
}

void vf_dataset_close(vf_dataset* ds) { delete ds; }

int32_t vf_dataset_scene_count(const vf_dataset* ds) {
  return ds == nullptr ? -1 : static_cast<int32_t>(ds->ds.scene_ids.size());
}

vf_status vf_dataset_scene_id(const vf_dataset* ds, int32_t index, char** id_out) {
  return wrap([&]() {
    require(ds != nullptr && id_out != nullptr, "dataset/id_out is null");
    require(index >= 0 && index < static_cast<int32_t>(ds->ds.scene_ids.size()),
            "scene index out of range");
    *id_out = dup_string(ds->ds.scene_ids[static_cast<size_t>(index)]);
  });
}

vf_status vf_default_run_config(char** json_out) {
  return wrap([&]() {
    require(json_out != nullptr, "json_out is null");
    *json_out = dup_string(vf::RunConfig::defaults().to_json().dump(2));
  });
}

vf_status vf_train(const char* run_config_json, const char* out_dir, char** report_json_out) {
  return wrap([&]() {
    vf::RunConfig cfg = parse_run_config(run_config_json);
    vf::RunReport report = vf::train(cfg, out_dir == nullptr ? "" : out_dir);
    if (report_json_out != nullptr) {
      *report_json_out = dup_string(report.to_json().dump(2));
    }
  });
}

vf_status vf_ablate(const char* run_config_json, const char* axis, const char* out_dir,
                    int32_t n_seeds, int32_t jobs, char** table_json_out) {
  return wrap([&]() {
    require(axis != nullptr, "axis is null");
    require(n_seeds >= 1, "n_seeds must be >= 1");
    require(jobs >= 1, "jobs must be >= 1");
    vf::RunConfig cfg = parse_run_config(run_config_json);
    auto rows = vf::ablate(cfg, axis, out_dir == nullptr ? "" : out_dir, n_seeds, jobs);
    if (table_json_out != nullptr) {
      json table;
      table["axis"] = axis;
      json rows_j = json::array();
      for (const auto& row : rows) {
        json runs = json::array();
        for (const auto& rep : row.runs) {
          runs.push_back(rep.to_json());
        }
        rows_j.push_back({{"label", row.label},
                          {"mean_map3d", row.mean_map3d},
                          {"std_map3d", row.std_map3d},
                          {"runs", runs}});
      }
      table["rows"] = rows_j;
      *table_json_out = dup_string(table.dump(2));
    }
  });
}

vf_status vf_gradcheck(const char* module, char** report_json_out) {
  return wrap([&]() {
    auto results = vf::gradcheck_modules(module == nullptr ? "" : module);
    if (report_json_out != nullptr) {
      json arr = json::array();
      for (const auto& r : results) {
        arr.push_back({{"module", r.module}, {"max_rel_error", r.max_rel_error}});
      }
      *report_json_out = dup_string(arr.dump(2));
    }
  });
}

vf_status vf_model_open(const char* checkpoint_dir, vf_model** out) {
  return wrap([&]() {
    require(checkpoint_dir != nullptr && out != nullptr, "checkpoint_dir/out is null");
    auto* handle = new vf_model{vf::Model::load_checkpoint(checkpoint_dir)};
    *out = handle;
  });
}

void vf_model_close(vf_model* model) { delete model; }

vf_status vf_model_evaluate(const vf_model* model, const char* data_dir, const char* split,
                            char** metrics_json_out) {
  return wrap([&]() {
    require(model != nullptr && data_dir != nullptr, "model/data_dir is null");
    vf::Dataset ds = vf::open_dataset(data_dir);
    auto ids = split_ids(ds, split == nullptr ? "eval" : split);
    require(!ids.empty(), "selected split is empty");
    std::vector<vf::SceneInputs> scenes;
    for (const auto& id : ids) {
      scenes.push_back(vf::SceneInputs::prepare(ds.load(id), model->model.cfg));
    }
    vf::EvalMetrics m = vf::evaluate(model->model, scenes);
    if (metrics_json_out != nullptr) {
      *metrics_json_out = dup_string(m.to_json().dump(2));
    }
  });
}

vf_status vf_model_dump_align_map(const vf_model* model, const char* data_dir,
                                  const char* scene_id, const char* out_dir, int32_t n_voxels,
                                  uint64_t selector_seed, char** stats_json_out) {
  return wrap([&]() {
    require(model != nullptr && data_dir != nullptr && scene_id != nullptr && out_dir != nullptr,
            "model/data_dir/scene_id/out_dir is null");
    require(n_voxels >= 1, "n_voxels must be >= 1");
    vf::Dataset ds = vf::open_dataset(data_dir);
    vf::Scene scene = ds.load(scene_id);
    json stats = vf::dump_align_map(model->model, scene, out_dir, n_voxels, selector_seed);
    if (stats_json_out != nullptr) {
      *stats_json_out = dup_string(stats.dump(2));
    }
  });
}

}  // extern "C"
