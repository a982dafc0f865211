// voxfuse command-line interface. Everything goes through the C API in
// voxfuse.h; this translation unit never touches the core library directly.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "voxfuse.h"

using nlohmann::json;

namespace {

// One machine-readable line on stderr, nonzero exit.
int fail_with(vf_status status, const std::string& context) {
  json err;
  err["error"] = vf_status_name(status);
  err["message"] = std::string(vf_last_error());
  err["context"] = context;
  std::cerr << err.dump() << "\n";
  return 1;
}

std::string read_text_file(const std::string& path, bool* ok) {
  std::ifstream f(path);
  if (!f) {
    *ok = false;
    return {};
  }
  std::stringstream ss;
  ss << f.rdbuf();
  *ok = true;
  return ss.str();
}

struct OwnedString {
  char* ptr = nullptr;
  ~OwnedString() { vf_string_free(ptr); }
  std::string str() const { return ptr == nullptr ? std::string() : std::string(ptr); }
};

void write_run_stamp(const std::string& out_dir, const std::string& command, const json& args) {
  json stamp;
  stamp["version"] = vf_version();
  stamp["command"] = command;
  stamp["args"] = args;
  std::ofstream f(out_dir + "/run.json");
  f << stamp.dump(2) << "\n";
}

// Loads the config file (if given), applies CLI overrides, returns JSON text.
struct ConfigOverrides {
  std::string data_dir, fusion, scfi, scfi_image_source, scfi_point_source;
  int64_t seed = -1;
  int steps = -1;
  int joint_2d = -1;  // tri-state
  int scfi_pairs = -1;
  double lr3d = -1, lr2d = -1;

  void apply(json& cfg) const {
    if (!data_dir.empty()) cfg["dataset_dir"] = data_dir;
    if (seed >= 0) cfg["seed"] = static_cast<uint64_t>(seed);
    if (steps >= 0) cfg["steps"] = steps;
    if (!fusion.empty()) cfg["fusion"] = fusion;
    if (!scfi.empty()) cfg["scfi"] = scfi;
    if (!scfi_image_source.empty()) cfg["scfi_image_source"] = scfi_image_source;
    if (!scfi_point_source.empty()) cfg["scfi_point_source"] = scfi_point_source;
    if (joint_2d >= 0) cfg["joint_2d"] = joint_2d != 0;
    if (scfi_pairs >= 0) cfg["scfi_pairs"] = scfi_pairs;
    if (lr3d > 0) cfg["lr3d"] = lr3d;
    if (lr2d > 0) cfg["lr2d"] = lr2d;
  }

  void add_options(CLI::App* cmd) {
    cmd->add_option("--data", data_dir, "dataset directory (overrides config)");
    cmd->add_option("--seed", seed, "run seed (overrides config)");
    cmd->add_option("--steps", steps, "training steps (overrides config)");
    cmd->add_option("--fusion", fusion, "none|point_proj|nonlocal|cafa|cafa_multihead");
    cmd->add_option("--scfi", scfi, "off|ncs_pos|symmetric|nce|infonce|ce_pos");
    cmd->add_option("--scfi-image-source", scfi_image_source, "c5|p5");
    cmd->add_option("--scfi-point-source", scfi_point_source, "before|after");
    cmd->add_option("--joint-2d", joint_2d, "0|1: enable 2D joint training");
    cmd->add_option("--scfi-pairs", scfi_pairs, "sampled box pairs per scene");
    cmd->add_option("--lr3d", lr3d, "point branch learning rate");
    cmd->add_option("--lr2d", lr2d, "image branch learning rate");
  }
};

int load_config_json(const std::string& config_file, const ConfigOverrides& overrides,
                     json& out) {
  if (config_file.empty()) {
    OwnedString defaults;
    vf_status st = vf_default_run_config(&defaults.ptr);
    if (st != VF_OK) return fail_with(st, "default config");
    out = json::parse(defaults.str());
  } else {
    bool ok = false;
    std::string text = read_text_file(config_file, &ok);
    if (!ok) {
      std::cerr << R"({"error":"VF_E_IO","message":"cannot read config file: )" << config_file
                << R"("})" << "\n";
      return 1;
    }
    out = json::parse(text, nullptr, false);
    if (out.is_discarded()) {
      std::cerr << R"({"error":"VF_E_PARSE","message":"config file is not valid JSON: )"
                << config_file << R"("})" << "\n";
      return 1;
    }
  }
  overrides.apply(out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"voxel-image fusion 3D detection on synthetic scenes"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic scene dataset");
  std::string gen_out, gen_config;
  int gen_scenes = 100;
  uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "output dataset directory")->required();
  gen->add_option("--scenes", gen_scenes, "number of scenes");
  gen->add_option("--seed", gen_seed, "dataset seed");
  gen->add_option("--config", gen_config, "scene generator config JSON file");

  // train
  auto* tr = app.add_subcommand("train", "train a model");
  std::string tr_config, tr_out;
  ConfigOverrides tr_over;
  tr->add_option("--config", tr_config, "run config JSON file");
  tr->add_option("--out", tr_out, "output directory")->required();
  tr_over.add_options(tr);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string ev_ckpt, ev_data, ev_split = "eval";
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint directory")->required();
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--split", ev_split, "eval|train|all");

  // ablate
  auto* ab = app.add_subcommand("ablate", "run one ablation axis");
  std::string ab_axis, ab_config, ab_out;
  int ab_seeds = 3, ab_jobs = 2;
  ab->add_option("--axis", ab_axis, "components|query|source|loss")->required();
  ab->add_option("--config", ab_config, "base run config JSON file");
  ab->add_option("--out", ab_out, "output directory")->required();
  ab->add_option("--seeds", ab_seeds, "seeds per row");
  ab->add_option("--jobs", ab_jobs, "worker threads");
  ConfigOverrides ab_over;
  ab_over.add_options(ab);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  std::string gc_module;
  gc->add_option("--module", gc_module,
                 "tensor|point_branch|image_branch|cafa|scfi|detect|joint (default: all)");

  // dump-align-map
  auto* dm = app.add_subcommand("dump-align-map", "render per-voxel alignment heatmaps");
  std::string dm_ckpt, dm_scene, dm_out, dm_data;
  int dm_voxels = 2;
  uint64_t dm_seed = 0;
  dm->add_option("--checkpoint", dm_ckpt, "checkpoint directory")->required();
  dm->add_option("--scene", dm_scene, "scene id (e.g. scene_00003)")->required();
  dm->add_option("--out", dm_out, "output directory")->required();
  dm->add_option("--data", dm_data, "dataset directory (default: the checkpoint's dataset)");
  dm->add_option("--voxels", dm_voxels, "number of voxels to render");
  dm->add_option("--seed", dm_seed, "voxel selector seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    json err;
    err["error"] = "usage";
    err["message"] = e.what();
    std::cerr << err.dump() << "\n";
    return 2;
  }

  if (gen->parsed()) {
    std::string config_text;
    const char* config_ptr = nullptr;
    if (!gen_config.empty()) {
      bool ok = false;
      config_text = read_text_file(gen_config, &ok);
      if (!ok) {
        std::cerr << R"({"error":"VF_E_IO","message":"cannot read scene config"})" << "\n";
        return 1;
      }
      config_ptr = config_text.c_str();
    }
    vf_status st = vf_generate_dataset(gen_out.c_str(), gen_scenes, gen_seed, config_ptr);
    if (st != VF_OK) return fail_with(st, "gen-data");
    write_run_stamp(gen_out, "gen-data",
                    json{{"scenes", gen_scenes}, {"seed", gen_seed}, {"out", gen_out}});
    std::cout << "wrote " << gen_scenes << " scenes to " << gen_out << "\n";
    return 0;
  }

  if (tr->parsed()) {
    json cfg;
    int rc = load_config_json(tr_config, tr_over, cfg);
    if (rc != 0) return rc;
    OwnedString report;
    vf_status st = vf_train(cfg.dump().c_str(), tr_out.c_str(), &report.ptr);
    if (st != VF_OK) return fail_with(st, "train");
    json rep = json::parse(report.str());
    std::cout << "final mAP3D " << rep["final"]["map3d"] << ", mAP_BEV "
              << rep["final"]["map_bev"] << " (" << rep["wall_seconds"] << " s)\n";
    return 0;
  }

  if (ev->parsed()) {
    vf_model* model = nullptr;
    vf_status st = vf_model_open(ev_ckpt.c_str(), &model);
    if (st != VF_OK) return fail_with(st, "eval: open checkpoint");
    OwnedString metrics;
    st = vf_model_evaluate(model, ev_data.c_str(), ev_split.c_str(), &metrics.ptr);
    vf_model_close(model);
    if (st != VF_OK) return fail_with(st, "eval");
    std::cout << metrics.str() << "\n";
    return 0;
  }

  if (ab->parsed()) {
    json cfg;
    int rc = load_config_json(ab_config, ab_over, cfg);
    if (rc != 0) return rc;
    OwnedString table;
    vf_status st =
        vf_ablate(cfg.dump().c_str(), ab_axis.c_str(), ab_out.c_str(), ab_seeds, ab_jobs,
                  &table.ptr);
    if (st != VF_OK) return fail_with(st, "ablate");
    write_run_stamp(ab_out, "ablate",
                    json{{"axis", ab_axis}, {"seeds", ab_seeds}, {"config", cfg}});
    json t = json::parse(table.str());
    for (const auto& row : t["rows"]) {
      std::printf("%-20s mAP3D %.4f +- %.4f\n", row["label"].get<std::string>().c_str(),
                  row["mean_map3d"].get<double>(), row["std_map3d"].get<double>());
    }
    return 0;
  }

  if (gc->parsed()) {
    OwnedString report;
    vf_status st = vf_gradcheck(gc_module.empty() ? nullptr : gc_module.c_str(), &report.ptr);
    if (st != VF_OK) return fail_with(st, "gradcheck");
    json rep = json::parse(report.str());
    bool all_ok = true;
    for (const auto& r : rep) {
      double err = r["max_rel_error"].get<double>();
      bool ok = err < 1e-4;
      all_ok = all_ok && ok;
      std::printf("%-14s max relative error %.3e  %s\n",
                  r["module"].get<std::string>().c_str(), err, ok ? "ok" : "FAIL");
    }
    return all_ok ? 0 : 1;
  }

  if (dm->parsed()) {
    vf_model* model = nullptr;
    vf_status st = vf_model_open(dm_ckpt.c_str(), &model);
    if (st != VF_OK) return fail_with(st, "dump-align-map: open checkpoint");
    std::string data_dir = dm_data;
    if (data_dir.empty()) {
      // default to the dataset recorded in the checkpoint's config
      bool ok = false;
      std::string manifest = read_text_file(dm_ckpt + "/manifest.json", &ok);
      if (ok) {
        json m = json::parse(manifest, nullptr, false);
        if (!m.is_discarded() && m.contains("config")) {
          data_dir = m["config"].value("dataset_dir", std::string());
        }
      }
      if (data_dir.empty()) {
        vf_model_close(model);
        std::cerr << R"({"error":"VF_E_INVALID_ARGUMENT","message":"no --data and the )"
                  << R"(checkpoint records no dataset_dir"})" << "\n";
        return 1;
      }
    }
    OwnedString stats;
    st = vf_model_dump_align_map(model, data_dir.c_str(), dm_scene.c_str(), dm_out.c_str(),
                                 dm_voxels, dm_seed, &stats.ptr);
    vf_model_close(model);
    if (st != VF_OK) return fail_with(st, "dump-align-map");
    write_run_stamp(dm_out, "dump-align-map",
                    json{{"scene", dm_scene}, {"voxels", dm_voxels}, {"seed", dm_seed}});
    std::cout << stats.str() << "\n";
    return 0;
  }

  return 2;
}
