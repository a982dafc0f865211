#include "vf/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <numeric>

namespace fs = std::filesystem;
using nlohmann::json;

namespace vf {

SceneConfig SceneConfig::defaults() {
  SceneConfig cfg;
  cfg.classes[0] = ClassSpec{
      "car", 0.5, {3.4, 4.4}, {1.6, 2.0}, {1.4, 1.7}, {0.16, 0.35, 0.88}, 0.92, 55.0};
  cfg.classes[1] = ClassSpec{
      "ped", 0.5, {0.85, 1.15}, {0.85, 1.15}, {1.6, 1.9}, {0.95, 0.55, 0.10}, 0.22, 160.0};
  return cfg;
}

json SceneConfig::to_json() const {
  json cls = json::array();
  for (const auto& c : classes) {
    cls.push_back({{"name", c.name},
                   {"prior", c.prior},
                   {"length_range", c.length_range},
                   {"width_range", c.width_range},
                   {"height_range", c.height_range},
                   {"color", c.color},
                   {"keep_prob", c.keep_prob},
                   {"points_base", c.points_base}});
  }
  return json{{"image_h", image_h},
              {"image_w", image_w},
              {"focal", focal},
              {"point_budget", point_budget},
              {"min_objects", min_objects},
              {"max_objects", max_objects},
              {"classes", cls},
              {"ground_noise_points", ground_noise_points},
              {"lidar_range", lidar_range},
              {"ground_z", ground_z},
              {"x_min", x_min},
              {"x_max", x_max},
              {"y_abs_max", y_abs_max},
              {"min_points", min_points},
              {"max_place_retries", max_place_retries}};
}

SceneConfig SceneConfig::from_json(const json& j) {
  SceneConfig cfg = defaults();
  try {
    cfg.image_h = j.value("image_h", cfg.image_h);
    cfg.image_w = j.value("image_w", cfg.image_w);
    cfg.focal = j.value("focal", cfg.focal);
    cfg.point_budget = j.value("point_budget", cfg.point_budget);
    cfg.min_objects = j.value("min_objects", cfg.min_objects);
    cfg.max_objects = j.value("max_objects", cfg.max_objects);
    cfg.ground_noise_points = j.value("ground_noise_points", cfg.ground_noise_points);
    cfg.lidar_range = j.value("lidar_range", cfg.lidar_range);
    cfg.ground_z = j.value("ground_z", cfg.ground_z);
    cfg.x_min = j.value("x_min", cfg.x_min);
    cfg.x_max = j.value("x_max", cfg.x_max);
    cfg.y_abs_max = j.value("y_abs_max", cfg.y_abs_max);
    cfg.min_points = j.value("min_points", cfg.min_points);
    cfg.max_place_retries = j.value("max_place_retries", cfg.max_place_retries);
    if (j.contains("classes")) {
      const auto& cls = j.at("classes");
      for (size_t i = 0; i < cfg.classes.size() && i < cls.size(); ++i) {
        auto& c = cfg.classes[i];
        const auto& cj = cls[i];
        c.name = cj.value("name", c.name);
        c.prior = cj.value("prior", c.prior);
        if (cj.contains("length_range")) c.length_range = cj.at("length_range");
        if (cj.contains("width_range")) c.width_range = cj.at("width_range");
        if (cj.contains("height_range")) c.height_range = cj.at("height_range");
        if (cj.contains("color")) c.color = cj.at("color");
        c.keep_prob = cj.value("keep_prob", c.keep_prob);
        c.points_base = cj.value("points_base", c.points_base);
      }
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::parse, std::string("scene config: ") + e.what());
  }
  if (cfg.image_h <= 0 || cfg.image_w <= 0 || cfg.point_budget <= 0 ||
      cfg.min_objects < 0 || cfg.max_objects < cfg.min_objects || cfg.lidar_range <= 0) {
    fail(ErrorCode::invalid_argument, "scene config: non-positive extent or bad object range");
  }
  double prior_sum = cfg.classes[0].prior + cfg.classes[1].prior;
  if (std::abs(prior_sum - 1.0) > 1e-9) {
    fail(ErrorCode::invalid_argument, "scene config: class priors must sum to 1");
  }
  return cfg;
}

std::string SceneConfig::hash() const {
  std::string s = to_json().dump();
  return hex64(fnv1a64(std::span<const uint8_t>(
      reinterpret_cast<const uint8_t*>(s.data()), s.size())));
}

namespace {

struct PlacedObject {
  Box3D box;
  Box2D box2d;
  double brightness = 1.0;
};

// Convex hull (monotone chain) of projected corners, counter-clockwise.
std::vector<std::array<double, 2>> convex_hull(std::vector<std::array<double, 2>> pts) {
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  if (pts.size() < 3) return pts;
  auto cross = [](const std::array<double, 2>& o, const std::array<double, 2>& a,
                  const std::array<double, 2>& b) {
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
  };
  std::vector<std::array<double, 2>> hull(2 * pts.size());
  size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  size_t lower = k + 1;
  for (auto it = pts.rbegin() + 1; it != pts.rend(); ++it) {
    while (k >= lower && cross(hull[k - 2], hull[k - 1], *it) <= 0) --k;
    hull[k++] = *it;
  }
  hull.resize(k - 1);
  return hull;
}

bool inside_convex(const std::vector<std::array<double, 2>>& hull, double x, double y) {
  size_t n = hull.size();
  if (n < 3) return false;
  for (size_t i = 0; i < n; ++i) {
    const auto& a = hull[i];
    const auto& b = hull[(i + 1) % n];
    double cr = (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
    if (cr < 0) return false;
  }
  return true;
}

void fill_silhouette(ImageRgb& img, const CameraProjection& proj, const PlacedObject& obj,
                     const std::array<double, 3>& color) {
  auto corners = box3d_corners(obj.box);
  std::vector<std::array<double, 2>> pts;
  pts.reserve(8);
  for (const auto& c : corners) {
    auto p = project_point(proj, c[0], c[1], c[2]);
    pts.push_back({p.u, p.v});
  }
  auto hull = convex_hull(std::move(pts));
  if (hull.size() < 3) return;
  double u0 = hull[0][0], u1 = hull[0][0], v0 = hull[0][1], v1 = hull[0][1];
  for (const auto& p : hull) {
    u0 = std::min(u0, p[0]);
    u1 = std::max(u1, p[0]);
    v0 = std::min(v0, p[1]);
    v1 = std::max(v1, p[1]);
  }
  int px0 = std::max(0, static_cast<int>(std::floor(u0)));
  int px1 = std::min(img.width - 1, static_cast<int>(std::ceil(u1)));
  int py0 = std::max(0, static_cast<int>(std::floor(v0)));
  int py1 = std::min(img.height - 1, static_cast<int>(std::ceil(v1)));
  for (int y = py0; y <= py1; ++y) {
    for (int x = px0; x <= px1; ++x) {
      if (!inside_convex(hull, x + 0.5, y + 0.5)) continue;
      for (int c = 0; c < 3; ++c) {
        img.at(c, y, x) = std::clamp(color[static_cast<size_t>(c)] * obj.brightness, 0.0, 1.0);
      }
    }
  }
}

void render_background(ImageRgb& img, Rng& rng) {
  // Coarse gray value-noise grid, bilinearly upsampled, plus fine noise.
  constexpr int GH = 6, GW = 9;
  std::array<std::array<double, 3>, GH * GW> grid;
  for (auto& cell : grid) {
    double base = rng.uniform(0.30, 0.55);
    for (int c = 0; c < 3; ++c) cell[static_cast<size_t>(c)] = base + rng.uniform(-0.04, 0.04);
  }
  for (int y = 0; y < img.height; ++y) {
    double gy = static_cast<double>(y) / img.height * (GH - 1);
    int y0 = static_cast<int>(gy);
    int y1 = std::min(y0 + 1, GH - 1);
    double fy = gy - y0;
    for (int x = 0; x < img.width; ++x) {
      double gx = static_cast<double>(x) / img.width * (GW - 1);
      int x0 = static_cast<int>(gx);
      int x1 = std::min(x0 + 1, GW - 1);
      double fx = gx - x0;
      double noise = rng.uniform(-0.02, 0.02);
      for (int c = 0; c < 3; ++c) {
        double v = (1 - fx) * (1 - fy) * grid[static_cast<size_t>(y0 * GW + x0)][static_cast<size_t>(c)] +
                   fx * (1 - fy) * grid[static_cast<size_t>(y0 * GW + x1)][static_cast<size_t>(c)] +
                   (1 - fx) * fy * grid[static_cast<size_t>(y1 * GW + x0)][static_cast<size_t>(c)] +
                   fx * fy * grid[static_cast<size_t>(y1 * GW + x1)][static_cast<size_t>(c)];
        img.at(c, y, x) = std::clamp(v + noise, 0.0, 1.0);
      }
    }
  }
}

// Uniform point on the cuboid surface, faces weighted by area.
std::array<double, 3> sample_surface_point(const Box3D& b, Rng& rng) {
  double axz = b.l * b.h, ayz = b.w * b.h, axy = b.l * b.w;
  // faces: +y/-y (area axz), +x/-x (ayz), +z/-z (axy)
  double total = 2 * (axz + ayz + axy);
  double pick = rng.uniform(0.0, total);
  double a = rng.uniform(-0.5, 0.5);
  double bcoord = rng.uniform(-0.5, 0.5);
  double px, py, pz;
  if (pick < 2 * axz) {
    double side = pick < axz ? 0.5 : -0.5;
    px = a * b.l;
    py = side * b.w;
    pz = bcoord * b.h;
  } else if (pick < 2 * axz + 2 * ayz) {
    double side = pick < 2 * axz + ayz ? 0.5 : -0.5;
    px = side * b.l;
    py = a * b.w;
    pz = bcoord * b.h;
  } else {
    double side = pick < 2 * (axz + ayz) + axy ? 0.5 : -0.5;
    px = a * b.l;
    py = bcoord * b.w;
    pz = side * b.h;
  }
  return {b.x + px, b.y + py, b.z + pz};
}

bool footprints_clear(const Box3D& a, const Box3D& b, double gap) {
  double ox = std::min(a.x + 0.5 * a.l, b.x + 0.5 * b.l) - std::max(a.x - 0.5 * a.l, b.x - 0.5 * b.l);
  double oy = std::min(a.y + 0.5 * a.w, b.y + 0.5 * b.w) - std::max(a.y - 0.5 * a.w, b.y - 0.5 * b.w);
  return ox <= -gap || oy <= -gap;
}

}  // namespace

Scene generate_scene(uint64_t seed, const SceneConfig& cfg) {
  Rng rng(seed);
  Scene scene;
  scene.seed = seed;
  scene.rng_name = Rng::kName;
  scene.config_hash = cfg.hash();
  scene.projection =
      CameraProjection::pinhole(cfg.focal, cfg.image_w / 2.0, cfg.image_h / 2.0);
  scene.image.width = cfg.image_w;
  scene.image.height = cfg.image_h;
  scene.image.data.assign(static_cast<size_t>(3) * cfg.image_w * cfg.image_h, 0.0);
  render_background(scene.image, rng);

  int n_objects = static_cast<int>(rng.uniform_int(cfg.min_objects, cfg.max_objects));
  std::vector<PlacedObject> objects;
  for (int i = 0; i < n_objects; ++i) {
    // class drawn once per object so placement rejection cannot skew the priors
    int cls = rng.bernoulli(cfg.classes[0].prior) ? 0 : 1;
    bool placed = false;
    for (int attempt = 0; attempt < cfg.max_place_retries && !placed; ++attempt) {
      const ClassSpec& spec = cfg.classes[static_cast<size_t>(cls)];
      Box3D b;
      b.class_id = cls;
      b.l = rng.uniform(spec.length_range[0], spec.length_range[1]);
      b.w = rng.uniform(spec.width_range[0], spec.width_range[1]);
      b.h = rng.uniform(spec.height_range[0], spec.height_range[1]);
      b.yaw = 0.0;
      b.x = rng.uniform(cfg.x_min, cfg.x_max);
      double y_span = std::min(0.9 * b.x * (cfg.image_w / 2.0) / cfg.focal, cfg.y_abs_max);
      b.y = rng.uniform(-y_span, y_span);
      b.z = cfg.ground_z + 0.5 * b.h;
      double brightness = rng.uniform(0.75, 1.25);

      Box2D b2;
      try {
        b2 = project_box3d(scene.projection, b, cfg.image_w, cfg.image_h);
      } catch (const Error&) {
        continue;
      }
      // keep the silhouette fully in frame so every surface point projects inside
      if (b2.u_min < 2 || b2.u_max > cfg.image_w - 2 || b2.v_min < 2 ||
          b2.v_max > cfg.image_h - 2) {
        continue;
      }
      bool clear = true;
      for (const auto& other : objects) {
        if (!footprints_clear(b, other.box, 0.6)) {
          clear = false;
          break;
        }
      }
      if (!clear) continue;
      objects.push_back(PlacedObject{b, b2, brightness});
      placed = true;
    }
    if (!placed) {
      fail(ErrorCode::placement,
           "generate_scene: could not place object " + std::to_string(i) + " after " +
               std::to_string(cfg.max_place_retries) + " retries");
    }
  }

  // surface points, density ~ 1/distance^2, per-class dropout
  std::vector<float> pts;
  for (const auto& obj : objects) {
    const ClassSpec& spec = cfg.classes[static_cast<size_t>(obj.box.class_id)];
    const Box3D& b = obj.box;
    double dist2 = b.x * b.x + b.y * b.y + b.z * b.z;
    double area = 2.0 * (b.l * b.w + b.l * b.h + b.w * b.h);
    int n_base = std::max(1, static_cast<int>(std::llround(spec.points_base * area / dist2)));
    int kept = 0;
    for (int k = 0; k < n_base; ++k) {
      auto p = sample_surface_point(b, rng);
      bool keep = rng.bernoulli(spec.keep_prob);
      if (!keep) continue;
      double intensity = rng.uniform(0.2, 0.8);
      pts.push_back(static_cast<float>(p[0]));
      pts.push_back(static_cast<float>(p[1]));
      pts.push_back(static_cast<float>(p[2]));
      pts.push_back(static_cast<float>(intensity));
      ++kept;
    }
    while (kept < cfg.min_points) {
      auto p = sample_surface_point(b, rng);
      double intensity = rng.uniform(0.2, 0.8);
      pts.push_back(static_cast<float>(p[0]));
      pts.push_back(static_cast<float>(p[1]));
      pts.push_back(static_cast<float>(p[2]));
      pts.push_back(static_cast<float>(intensity));
      ++kept;
    }
  }

  int budget_left = cfg.point_budget - static_cast<int>(pts.size() / 4);
  int n_noise = std::min(cfg.ground_noise_points, std::max(0, budget_left));
  for (int k = 0; k < n_noise; ++k) {
    double x = rng.uniform(1.0, cfg.lidar_range);
    double y_span = x * (cfg.image_w / 2.0) / cfg.focal;
    double y = rng.uniform(-y_span, y_span);
    double z = cfg.ground_z + std::abs(rng.normal(0.0, 0.04));
    double intensity = rng.uniform(0.2, 0.8);
    pts.push_back(static_cast<float>(x));
    pts.push_back(static_cast<float>(y));
    pts.push_back(static_cast<float>(z));
    pts.push_back(static_cast<float>(intensity));
  }
  scene.points = std::move(pts);

  // painter's algorithm: far objects first
  std::vector<size_t> order(objects.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return objects[a].box.x > objects[b].box.x;
  });
  for (size_t idx : order) {
    const auto& obj = objects[idx];
    fill_silhouette(scene.image, scene.projection, obj,
                    cfg.classes[static_cast<size_t>(obj.box.class_id)].color);
  }
  // quantize to the 8-bit levels the PPM file will carry
  for (double& v : scene.image.data) {
    v = std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  }

  for (const auto& obj : objects) {
    scene.gt_boxes3d.push_back(obj.box);
    scene.gt_boxes2d.push_back(obj.box2d);
  }
  return scene;
}

namespace {

json box3d_to_json(const Box3D& b) {
  return json{{"center", {b.x, b.y, b.z}},
              {"size", {b.l, b.w, b.h}},
              {"yaw", b.yaw},
              {"class_id", b.class_id}};
}

Box3D box3d_from_json(const json& j) {
  Box3D b;
  b.x = j.at("center").at(0);
  b.y = j.at("center").at(1);
  b.z = j.at("center").at(2);
  b.l = j.at("size").at(0);
  b.w = j.at("size").at(1);
  b.h = j.at("size").at(2);
  b.yaw = j.at("yaw");
  b.class_id = j.at("class_id");
  return b;
}

json box2d_to_json(const Box2D& b) {
  return json{{"u_min", b.u_min}, {"v_min", b.v_min}, {"u_max", b.u_max},
              {"v_max", b.v_max}, {"class_id", b.class_id}};
}

Box2D box2d_from_json(const json& j) {
  Box2D b;
  b.u_min = j.at("u_min");
  b.v_min = j.at("v_min");
  b.u_max = j.at("u_max");
  b.v_max = j.at("v_max");
  b.class_id = j.at("class_id");
  return b;
}

}  // namespace

void save_scene(const Scene& scene, const std::string& dir) {
  fs::create_directories(dir);
  json j;
  j["seed"] = scene.seed;
  j["rng"] = scene.rng_name;
  j["config_hash"] = scene.config_hash;
  j["projection"] = scene.projection.m;
  json b3 = json::array(), b2 = json::array();
  for (const auto& b : scene.gt_boxes3d) b3.push_back(box3d_to_json(b));
  for (const auto& b : scene.gt_boxes2d) b2.push_back(box2d_to_json(b));
  j["boxes3d"] = b3;
  j["boxes2d"] = b2;
  write_file_text(dir + "/scene.json", j.dump(2) + "\n");

  std::vector<uint8_t> raw(scene.points.size() * 4);
  std::memcpy(raw.data(), scene.points.data(), raw.size());
  write_file_bytes(dir + "/points.f32", raw);
  write_file_bytes(dir + "/image.ppm", encode_ppm(scene.image));
}

Scene load_scene(const std::string& dir) {
  Scene scene;
  json j;
  try {
    j = json::parse(read_file_text(dir + "/scene.json"));
  } catch (const json::exception& e) {
    fail(ErrorCode::parse, "scene.json: " + std::string(e.what()));
  }
  try {
    scene.seed = j.at("seed");
    scene.rng_name = j.at("rng");
    scene.config_hash = j.at("config_hash");
    auto proj = j.at("projection");
    if (proj.size() != 12) fail(ErrorCode::parse, "scene.json: field 'projection' needs 12 values");
    for (size_t i = 0; i < 12; ++i) scene.projection.m[i] = proj.at(i);
    for (const auto& bj : j.at("boxes3d")) scene.gt_boxes3d.push_back(box3d_from_json(bj));
    for (const auto& bj : j.at("boxes2d")) scene.gt_boxes2d.push_back(box2d_from_json(bj));
  } catch (const json::exception& e) {
    fail(ErrorCode::parse, "scene.json: " + std::string(e.what()));
  }
  if (scene.gt_boxes2d.size() != scene.gt_boxes3d.size()) {
    fail(ErrorCode::parse, "scene.json: field 'boxes2d' length differs from 'boxes3d'");
  }

  auto raw = read_file_bytes(dir + "/points.f32");
  if (raw.size() % 16 != 0) {
    fail(ErrorCode::parse, "points.f32: truncated (size " + std::to_string(raw.size()) +
                               " not a multiple of 16)");
  }
  scene.points.resize(raw.size() / 4);
  std::memcpy(scene.points.data(), raw.data(), raw.size());

  scene.image = decode_ppm(read_file_bytes(dir + "/image.ppm"));
  return scene;
}

void generate_dataset(const std::string& out_dir, int n_scenes, uint64_t seed,
                      const SceneConfig& cfg) {
  if (n_scenes <= 0) fail(ErrorCode::invalid_argument, "generate_dataset: need n_scenes >= 1");
  fs::create_directories(out_dir);
  std::vector<std::string> ids;
  for (int i = 0; i < n_scenes; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%05d", i);
    uint64_t scene_seed = splitmix64(seed + static_cast<uint64_t>(i));
    Scene s = generate_scene(scene_seed, cfg);
    save_scene(s, out_dir + "/" + name);
    ids.emplace_back(name);
  }
  int n_train = (n_scenes * 3) / 4;
  if (n_scenes > 1 && n_train == n_scenes) n_train = n_scenes - 1;
  json manifest;
  manifest["seed"] = seed;
  manifest["rng"] = Rng::kName;
  manifest["config"] = cfg.to_json();
  manifest["scenes"] = ids;
  manifest["splits"] = {
      {"train", std::vector<std::string>(ids.begin(), ids.begin() + n_train)},
      {"eval", std::vector<std::string>(ids.begin() + n_train, ids.end())}};
  write_file_text(out_dir + "/manifest.json", manifest.dump(2) + "\n");
}

Dataset open_dataset(const std::string& dir) {
  Dataset ds;
  ds.dir = dir;
  json manifest;
  try {
    manifest = json::parse(read_file_text(dir + "/manifest.json"));
    ds.config = SceneConfig::from_json(manifest.at("config"));
    ds.scene_ids = manifest.at("scenes").get<std::vector<std::string>>();
    ds.train_ids = manifest.at("splits").at("train").get<std::vector<std::string>>();
    ds.eval_ids = manifest.at("splits").at("eval").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    fail(ErrorCode::parse, "manifest.json: " + std::string(e.what()));
  }
  return ds;
}

Scene Dataset::load(const std::string& scene_id) const {
  return load_scene(dir + "/" + scene_id);
}

}  // namespace vf
