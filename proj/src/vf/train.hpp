#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vf/model.hpp"

namespace vf {

struct EvalMetrics {
  std::vector<double> ap3d;     // per class
  std::vector<double> ap_bev;   // per class
  double map3d = 0.0;
  double map_bev = 0.0;
  // mean attention mass inside the projected box, over in-box voxels of every
  // evaluated object; absent for strategies without an alignment map
  std::optional<double> attention_mass;

  nlohmann::json to_json() const;
};

struct StepLog {
  int step = 0;
  std::map<std::string, double> terms;  // only enabled components appear
  double total = 0.0;
};

struct RunReport {
  std::string config_hash;
  uint64_t seed = 0;
  std::vector<StepLog> loss_history;
  std::vector<std::pair<int, EvalMetrics>> evals;  // (step, metrics)
  EvalMetrics final_metrics;
  double wall_seconds = 0.0;

  nlohmann::json to_json() const;
};

// Full training run; when out_dir is non-empty writes run.json, metrics.json
// and a checkpoint/ directory beneath it.
RunReport train(const RunConfig& cfg, const std::string& out_dir);

EvalMetrics evaluate(const Model& model, const std::vector<SceneInputs>& scenes);

// Ablation runner: the row set of one published-table axis at toy scale,
// n_seeds runs per row, rows executed on a small thread pool. Writes
// table.json and table.txt when out_dir is non-empty. A row failure still
// writes the completed rows before rethrowing.
struct AblationRow {
  std::string label;
  RunConfig config;
  std::vector<RunReport> runs;  // one per seed
  double mean_map3d = 0.0;
  double std_map3d = 0.0;
};
std::vector<AblationRow> ablate(const RunConfig& base, const std::string& axis,
                                const std::string& out_dir, int n_seeds = 3, int jobs = 2);

// Renders per-voxel alignment rows of a trained model as 16-bit PGM heatmaps
// and reports the attention-mass statistic per selected voxel.
nlohmann::json dump_align_map(const Model& model, const Scene& scene, const std::string& out_dir,
                              int n_voxels, uint64_t selector_seed);

// Per-module gradient verification used by the CLI and the acceptance suite.
struct GradCheckResult {
  std::string module;
  double max_rel_error = 0.0;
};
std::vector<GradCheckResult> gradcheck_modules(const std::string& only = "");

}  // namespace vf
