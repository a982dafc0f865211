#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vf/geometry.hpp"
#include "vf/io_util.hpp"
#include "vf/rng.hpp"

namespace vf {

struct ClassSpec {
  std::string name;
  double prior = 0.5;
  std::array<double, 2> length_range{1, 1};
  std::array<double, 2> width_range{1, 1};
  std::array<double, 2> height_range{1, 1};
  std::array<double, 3> color{0.5, 0.5, 0.5};
  double keep_prob = 1.0;     // 1 - point dropout
  double points_base = 60.0;  // surface points per m^2 at 1 m distance
};

// World frame: x forward, y left, z up; camera at the origin looking along +x.
struct SceneConfig {
  int image_h = 128;
  int image_w = 192;
  double focal = 96.0;
  int point_budget = 2048;
  int min_objects = 1;
  int max_objects = 4;
  std::array<ClassSpec, 2> classes;
  int ground_noise_points = 250;
  double lidar_range = 40.0;
  double ground_z = -1.6;
  double x_min = 6.0;
  double x_max = 30.0;
  double y_abs_max = 14.0;  // placement band; keeps objects inside the voxel grid
  int min_points = 3;
  int max_place_retries = 200;

  static SceneConfig defaults();
  nlohmann::json to_json() const;
  static SceneConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

struct Scene {
  std::vector<float> points;  // N x 4 row-major: x, y, z, intensity
  ImageRgb image;             // values quantized to 8-bit levels
  std::vector<Box3D> gt_boxes3d;
  std::vector<Box2D> gt_boxes2d;
  CameraProjection projection;
  uint64_t seed = 0;
  std::string rng_name;
  std::string config_hash;

  int64_t point_count() const { return static_cast<int64_t>(points.size()) / 4; }
};

Scene generate_scene(uint64_t seed, const SceneConfig& cfg);

// Directory layout: scene.json, points.f32 (float32 LE N x 4), image.ppm (P6).
void save_scene(const Scene& scene, const std::string& dir);
Scene load_scene(const std::string& dir);

struct Dataset {
  std::string dir;
  SceneConfig config;
  std::vector<std::string> scene_ids;
  std::vector<std::string> train_ids;
  std::vector<std::string> eval_ids;

  Scene load(const std::string& scene_id) const;
};

// Writes n_scenes scene directories plus manifest.json (75/25 train/eval split).
void generate_dataset(const std::string& out_dir, int n_scenes, uint64_t seed,
                      const SceneConfig& cfg);
Dataset open_dataset(const std::string& dir);

}  // namespace vf
