#include "vf/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <mutex>
#include <thread>

namespace fs = std::filesystem;
using nlohmann::json;

namespace vf {

json EvalMetrics::to_json() const {
  json j;
  j["ap3d"] = ap3d;
  j["ap_bev"] = ap_bev;
  j["map3d"] = map3d;
  j["map_bev"] = map_bev;
  if (attention_mass.has_value()) {
    j["attention_mass"] = *attention_mass;
  } else {
    j["attention_mass"] = nullptr;
  }
  return j;
}

json RunReport::to_json() const {
  json j;
  j["config_hash"] = config_hash;
  j["seed"] = seed;
  j["wall_seconds"] = wall_seconds;
  j["final"] = final_metrics.to_json();
  json evals_j = json::array();
  for (const auto& [step, m] : evals) {
    evals_j.push_back({{"step", step}, {"metrics", m.to_json()}});
  }
  j["evals"] = evals_j;
  json hist = json::array();
  for (const StepLog& s : loss_history) {
    hist.push_back({{"step", s.step}, {"total", s.total}, {"terms", s.terms}});
  }
  j["loss_history"] = hist;
  return j;
}

namespace {

// Branch optimizer chosen by config; state persists across steps.
class BranchOptimizer {
 public:
  BranchOptimizer(OptimKind kind, double lr) : kind_(kind), adamw_(lr), sgd_(lr) {}
  void step(std::span<NamedParam> params) {
    if (kind_ == OptimKind::adamw) {
      adamw_.step(params);
    } else {
      sgd_.step(params);
    }
  }

 private:
  OptimKind kind_;
  AdamW adamw_;
  SgdMomentum sgd_;
};

void accumulate_term(std::map<std::string, std::pair<double, int>>& acc, const char* name,
                     const Tensor& t) {
  if (!t.defined()) return;
  auto& [sum, n] = acc[name];
  sum += t.item();
  n += 1;
}

}  // namespace

EvalMetrics evaluate(const Model& model, const std::vector<SceneInputs>& scenes) {
  std::vector<EvalPred3D> preds;
  std::vector<std::vector<Box3D>> gts;
  double mass_sum = 0.0;
  int64_t mass_n = 0;
  Rng rng(0);  // evaluation is read-only; pair sampling draws are discarded
  for (size_t i = 0; i < scenes.size(); ++i) {
    const SceneInputs& in = scenes[i];
    auto r = model.forward(in, true, rng);
    for (const auto& det : r.detections) {
      preds.push_back(EvalPred3D{det.box, det.score, static_cast<int>(i)});
    }
    gts.push_back(in.scene.gt_boxes3d);

    if (r.align.has_value()) {
      const AlignmentMap& am = *r.align;
      int64_t hw = am.fmap_h * am.fmap_w;
      for (size_t obj = 0; obj < in.scene.gt_boxes3d.size(); ++obj) {
        const Box3D& b3 = in.scene.gt_boxes3d[obj];
        const Box2D& b2 = in.scene.gt_boxes2d[obj];
        for (int64_t jx = 0; jx < in.voxels.size(); ++jx) {
          auto c = model.cfg.voxel_grid.voxel_center(in.voxels.coords[static_cast<size_t>(jx)][0],
                                                     in.voxels.coords[static_cast<size_t>(jx)][1],
                                                     in.voxels.coords[static_cast<size_t>(jx)][2]);
          if (std::abs(c[0] - b3.x) > 0.5 * b3.l || std::abs(c[1] - b3.y) > 0.5 * b3.w ||
              std::abs(c[2] - b3.z) > 0.5 * b3.h) {
            continue;
          }
          auto row = am.weights.data().subspan(static_cast<size_t>(jx * hw),
                                               static_cast<size_t>(hw));
          mass_sum += attention_mass_in_box(row, am.fmap_h, am.fmap_w,
                                            model.cfg.image_stride, b2);
          mass_n += 1;
        }
      }
    }
  }

  EvalMetrics m;
  int n_classes = static_cast<int>(model.cfg.anchors.size());
  for (int c = 0; c < n_classes; ++c) {
    m.ap3d.push_back(average_precision(preds, gts, c, model.cfg.ap_iou_3d, false));
    m.ap_bev.push_back(average_precision(preds, gts, c, model.cfg.ap_iou_bev, true));
  }
  m.map3d = 0.0;
  m.map_bev = 0.0;
  for (int c = 0; c < n_classes; ++c) {
    m.map3d += m.ap3d[static_cast<size_t>(c)] / n_classes;
    m.map_bev += m.ap_bev[static_cast<size_t>(c)] / n_classes;
  }
  if (mass_n > 0) m.attention_mass = mass_sum / static_cast<double>(mass_n);
  return m;
}

RunReport train(const RunConfig& cfg, const std::string& out_dir) {
  auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  Dataset ds = open_dataset(cfg.dataset_dir);
  if (ds.train_ids.empty()) fail(ErrorCode::invalid_argument, "train: dataset has no train split");

  std::vector<SceneInputs> train_scenes, eval_scenes;
  train_scenes.reserve(ds.train_ids.size());
  for (const auto& id : ds.train_ids) train_scenes.push_back(SceneInputs::prepare(ds.load(id), cfg));
  for (const auto& id : ds.eval_ids) eval_scenes.push_back(SceneInputs::prepare(ds.load(id), cfg));

  Model model = Model::init(cfg);
  auto point_params = model.point_side_params();
  auto image_params = model.image_side_params();
  BranchOptimizer opt_point(cfg.opt3d, cfg.lr3d);
  BranchOptimizer opt_image(cfg.opt2d, cfg.lr2d);

  // The interaction heads are episodic: a step whose batch yields no usable
  // box pairs leaves them without gradients, and they must simply sit out.
  auto split_scfi = [](const std::vector<NamedParam>& all) {
    std::pair<std::vector<NamedParam>, std::vector<NamedParam>> out;
    for (const auto& p : all) {
      (p.name.rfind("scfi", 0) == 0 ? out.second : out.first).push_back(p);
    }
    return out;
  };
  auto [point_main, point_scfi] = split_scfi(point_params);
  auto [image_main, image_scfi] = split_scfi(image_params);
  auto step_group = [](BranchOptimizer& opt, std::vector<NamedParam>& main,
                       std::vector<NamedParam>& scfi) {
    std::vector<NamedParam> active = main;
    if (!scfi.empty() && scfi.front().tensor.has_grad()) {
      active.insert(active.end(), scfi.begin(), scfi.end());
    }
    if (!active.empty()) opt.step(active);
  };

  Rng step_rng(splitmix64(cfg.seed ^ 0x7ea17ea17ea17ea1ULL));
  RunReport report;
  report.config_hash = cfg.hash();
  report.seed = cfg.seed;

  for (int step = 1; step <= cfg.steps; ++step) {
    Tape tape;
    Tensor batch_total;
    int used = 0;
    std::map<std::string, std::pair<double, int>> acc;
    for (int b = 0; b < cfg.batch_size; ++b) {
      int64_t idx = step_rng.uniform_int(0, static_cast<int64_t>(train_scenes.size()) - 1);
      auto r = model.forward(train_scenes[static_cast<size_t>(idx)], false, step_rng);
      if (r.voxel_count == 0) continue;
      batch_total = used == 0 ? r.losses.total : add(batch_total, r.losses.total);
      accumulate_term(acc, "l3d_cls", r.losses.l3d_cls);
      accumulate_term(acc, "l3d_reg", r.losses.l3d_reg);
      accumulate_term(acc, "l2d_rpn_cls", r.losses.l2d_rpn_cls);
      accumulate_term(acc, "l2d_rpn_reg", r.losses.l2d_rpn_reg);
      accumulate_term(acc, "l2d_rcnn_cls", r.losses.l2d_rcnn_cls);
      accumulate_term(acc, "l2d_rcnn_reg", r.losses.l2d_rcnn_reg);
      accumulate_term(acc, "l_scfi", r.losses.l_scfi);
      ++used;
    }
    if (used == 0) continue;  // degenerate batch: every sampled scene was empty
    Tensor loss = scale(batch_total, 1.0 / used);
    tape.backward(loss);
    step_group(opt_point, point_main, point_scfi);
    step_group(opt_image, image_main, image_scfi);

    StepLog log;
    log.step = step;
    log.total = loss.item();
    for (const auto& [name, sum_n] : acc) {
      log.terms[name] = sum_n.first / sum_n.second;
    }
    report.loss_history.push_back(std::move(log));

    if (cfg.eval_every > 0 && step % cfg.eval_every == 0 && step != cfg.steps &&
        !eval_scenes.empty()) {
      report.evals.emplace_back(step, evaluate(model, eval_scenes));
    }
  }

  if (!eval_scenes.empty()) {
    report.final_metrics = evaluate(model, eval_scenes);
    report.evals.emplace_back(cfg.steps, report.final_metrics);
  }
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    json run;
    run["version"] = kVersion;
    run["config"] = cfg.to_json();
    run["config_hash"] = report.config_hash;
    run["seed"] = cfg.seed;
    run["rng"] = Rng::kName;
    write_file_text(out_dir + "/run.json", run.dump(2) + "\n");
    write_file_text(out_dir + "/metrics.json", report.to_json().dump(2) + "\n");
    model.save_checkpoint(out_dir + "/checkpoint");
  }
  return report;
}

// ---- ablation runner ---------------------------------------------------------

namespace {

std::vector<std::pair<std::string, RunConfig>> ablation_rows(const RunConfig& base,
                                                             const std::string& axis) {
  ScfiMode scfi_on = base.scfi == ScfiMode::off ? ScfiMode::ncs_pos : base.scfi;
  std::vector<std::pair<std::string, RunConfig>> rows;
  if (axis == "components") {
    RunConfig r = base;
    r.fusion = FusionStrategy::none;
    r.scfi = ScfiMode::off;
    r.joint_2d = false;
    rows.emplace_back("baseline", r);
    r.fusion = FusionStrategy::cafa;
    rows.emplace_back("cafa", r);
    r.scfi = scfi_on;
    rows.emplace_back("cafa_scfi", r);
    r.joint_2d = true;
    rows.emplace_back("cafa_scfi_joint2d", r);
  } else if (axis == "query") {
    for (auto [name, strat] : std::initializer_list<std::pair<const char*, FusionStrategy>>{
             {"point_proj", FusionStrategy::point_proj},
             {"nonlocal", FusionStrategy::nonlocal},
             {"multihead", FusionStrategy::cafa_multihead},
             {"cafa", FusionStrategy::cafa}}) {
      RunConfig r = base;
      r.fusion = strat;
      r.scfi = scfi_on;
      rows.emplace_back(name, r);
    }
  } else if (axis == "source") {
    for (auto [name, img, pt] :
         std::initializer_list<std::tuple<const char*, ScfiImageSource, ScfiPointSource>>{
             {"p5_after", ScfiImageSource::p5, ScfiPointSource::after_backbone},
             {"c5_after", ScfiImageSource::c5, ScfiPointSource::after_backbone},
             {"p5_before", ScfiImageSource::p5, ScfiPointSource::before_backbone},
             {"c5_before", ScfiImageSource::c5, ScfiPointSource::before_backbone}}) {
      RunConfig r = base;
      r.scfi = scfi_on;
      r.scfi_image_source = img;
      r.scfi_point_source = pt;
      rows.emplace_back(name, r);
    }
  } else if (axis == "loss") {
    for (auto [name, mode] : std::initializer_list<std::pair<const char*, ScfiMode>>{
             {"nce", ScfiMode::nce},
             {"infonce", ScfiMode::infonce},
             {"ce_pos", ScfiMode::ce_pos},
             {"ncs_pos", ScfiMode::ncs_pos}}) {
      RunConfig r = base;
      r.scfi = mode;
      rows.emplace_back(name, r);
    }
  } else {
    fail(ErrorCode::invalid_argument,
         "ablate: unknown axis '" + axis + "' (want components|query|source|loss)");
  }
  return rows;
}

json ablation_table_json(const std::vector<AblationRow>& rows, const std::string& axis) {
  json table;
  table["axis"] = axis;
  json rows_j = json::array();
  for (const auto& row : rows) {
    json runs = json::array();
    for (const auto& rep : row.runs) {
      runs.push_back({{"seed", rep.seed},
                      {"map3d", rep.final_metrics.map3d},
                      {"map_bev", rep.final_metrics.map_bev},
                      {"ap3d", rep.final_metrics.ap3d},
                      {"attention_mass", rep.final_metrics.attention_mass.has_value()
                                             ? json(*rep.final_metrics.attention_mass)
                                             : json(nullptr)},
                      {"wall_seconds", rep.wall_seconds}});
    }
    rows_j.push_back({{"label", row.label},
                      {"config_hash", row.config.hash()},
                      {"runs", runs},
                      {"mean_map3d", row.mean_map3d},
                      {"std_map3d", row.std_map3d}});
  }
  table["rows"] = rows_j;
  return table;
}

std::string ablation_table_text(const std::vector<AblationRow>& rows, const std::string& axis) {
  std::string out = "axis: " + axis + "\n";
  char line[160];
  std::snprintf(line, sizeof(line), "%-20s %12s %12s %8s\n", "row", "mAP3D mean", "mAP3D std",
                "runs");
  out += line;
  for (const auto& row : rows) {
    std::snprintf(line, sizeof(line), "%-20s %12.4f %12.4f %8zu\n", row.label.c_str(),
                  row.mean_map3d, row.std_map3d, row.runs.size());
    out += line;
  }
  return out;
}

void write_ablation_outputs(const std::vector<AblationRow>& rows, const std::string& axis,
                            const std::string& out_dir) {
  if (out_dir.empty()) return;
  fs::create_directories(out_dir);
  write_file_text(out_dir + "/table.json", ablation_table_json(rows, axis).dump(2) + "\n");
  write_file_text(out_dir + "/table.txt", ablation_table_text(rows, axis));
}

}  // namespace

std::vector<AblationRow> ablate(const RunConfig& base, const std::string& axis,
                                const std::string& out_dir, int n_seeds, int jobs) {
  auto row_cfgs = ablation_rows(base, axis);
  std::vector<AblationRow> rows;
  for (auto& [label, cfg] : row_cfgs) {
    AblationRow row;
    row.label = label;
    row.config = cfg;
    rows.push_back(std::move(row));
  }

  struct Task {
    size_t row;
    int seed_idx;
  };
  std::vector<Task> tasks;
  for (size_t r = 0; r < rows.size(); ++r) {
    for (int s = 0; s < n_seeds; ++s) tasks.push_back(Task{r, s});
  }
  std::vector<std::vector<RunReport>> results(rows.size(),
                                              std::vector<RunReport>(static_cast<size_t>(n_seeds)));
  std::vector<std::vector<bool>> done(rows.size(), std::vector<bool>(static_cast<size_t>(n_seeds), false));
  std::atomic<size_t> next{0};
  std::mutex err_mutex;
  std::exception_ptr first_error;

  auto worker = [&]() {
    while (true) {
      size_t i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (first_error) return;
      }
      const Task& t = tasks[i];
      RunConfig cfg = rows[t.row].config;
      cfg.seed = base.seed + static_cast<uint64_t>(t.seed_idx);
      std::string run_dir;
      if (!out_dir.empty()) {
        run_dir = out_dir + "/" + rows[t.row].label + "/seed" + std::to_string(t.seed_idx);
      }
      try {
        results[t.row][static_cast<size_t>(t.seed_idx)] = train(cfg, run_dir);
        done[t.row][static_cast<size_t>(t.seed_idx)] = true;
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  int n_workers = std::max(1, std::min<int>(jobs, static_cast<int>(tasks.size())));
  std::vector<std::thread> pool;
  for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
  for (auto& th : pool) th.join();

  for (size_t r = 0; r < rows.size(); ++r) {
    double sum = 0.0, sum2 = 0.0;
    int n = 0;
    for (int s = 0; s < n_seeds; ++s) {
      if (!done[r][static_cast<size_t>(s)]) continue;
      rows[r].runs.push_back(results[r][static_cast<size_t>(s)]);
      double v = results[r][static_cast<size_t>(s)].final_metrics.map3d;
      sum += v;
      sum2 += v * v;
      ++n;
    }
    if (n > 0) {
      rows[r].mean_map3d = sum / n;
      double var = sum2 / n - rows[r].mean_map3d * rows[r].mean_map3d;
      rows[r].std_map3d = std::sqrt(std::max(0.0, var));
    }
  }
  write_ablation_outputs(rows, axis, out_dir);
  if (first_error) std::rethrow_exception(first_error);
  return rows;
}

// ---- alignment map dump --------------------------------------------------------

json dump_align_map(const Model& model, const Scene& scene, const std::string& out_dir,
                    int n_voxels, uint64_t selector_seed) {
  if (!model.cfg.fusion_has_align()) {
    fail(ErrorCode::unsupported,
         std::string("dump-align-map: strategy '") + to_string(model.cfg.fusion) +
             "' has no alignment map");
  }
  SceneInputs in = SceneInputs::prepare(scene, model.cfg);
  Rng rng(selector_seed);
  auto r = model.forward(in, false, rng);
  if (!r.align.has_value()) fail(ErrorCode::state, "dump-align-map: forward produced no map");
  const AlignmentMap& am = *r.align;
  int64_t hw = am.fmap_h * am.fmap_w;

  // candidate voxels inside gt boxes, tagged with their object index
  std::vector<std::pair<int64_t, int>> in_box;
  for (int64_t j = 0; j < in.voxels.size(); ++j) {
    auto c = model.cfg.voxel_grid.voxel_center(in.voxels.coords[static_cast<size_t>(j)][0],
                                               in.voxels.coords[static_cast<size_t>(j)][1],
                                               in.voxels.coords[static_cast<size_t>(j)][2]);
    for (size_t obj = 0; obj < scene.gt_boxes3d.size(); ++obj) {
      const Box3D& b = scene.gt_boxes3d[obj];
      if (std::abs(c[0] - b.x) <= 0.5 * b.l && std::abs(c[1] - b.y) <= 0.5 * b.w &&
          std::abs(c[2] - b.z) <= 0.5 * b.h) {
        in_box.emplace_back(j, static_cast<int>(obj));
        break;
      }
    }
  }
  std::vector<std::pair<int64_t, int>> chosen;
  if (!in_box.empty()) {
    size_t take = std::min<size_t>(static_cast<size_t>(n_voxels), in_box.size());
    for (size_t i = 0; i < take; ++i) {
      size_t j = i + static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(in_box.size() - i - 1)));
      std::swap(in_box[i], in_box[j]);
      chosen.push_back(in_box[i]);
    }
  } else {
    for (int64_t j = 0; j < std::min<int64_t>(n_voxels, in.voxels.size()); ++j) {
      chosen.emplace_back(j, -1);
    }
  }

  fs::create_directories(out_dir);
  json stats;
  stats["scene_seed"] = scene.seed;
  stats["fmap_h"] = am.fmap_h;
  stats["fmap_w"] = am.fmap_w;
  stats["stride"] = model.cfg.image_stride;
  json voxels_j = json::array();
  double mass_sum = 0.0;
  int mass_n = 0;
  for (const auto& [j, obj] : chosen) {
    auto row = am.weights.data().subspan(static_cast<size_t>(j * hw), static_cast<size_t>(hw));
    char fname[48];
    std::snprintf(fname, sizeof(fname), "align_voxel_%04lld.pgm", static_cast<long long>(j));
    write_file_bytes(out_dir + "/" + fname, alignment_row_pgm(row, am.fmap_h, am.fmap_w));
    json vj;
    vj["voxel"] = j;
    vj["coords"] = in.voxels.coords[static_cast<size_t>(j)];
    vj["file"] = fname;
    vj["object"] = obj;
    if (obj >= 0) {
      double mass = attention_mass_in_box(row, am.fmap_h, am.fmap_w, model.cfg.image_stride,
                                          scene.gt_boxes2d[static_cast<size_t>(obj)]);
      vj["attention_mass"] = mass;
      mass_sum += mass;
      ++mass_n;
    } else {
      vj["attention_mass"] = nullptr;
    }
    voxels_j.push_back(vj);
  }
  stats["voxels"] = voxels_j;
  stats["mean_attention_mass"] = mass_n > 0 ? json(mass_sum / mass_n) : json(nullptr);
  write_file_text(out_dir + "/stats.json", stats.dump(2) + "\n");
  return stats;
}

// ---- per-module gradient checks ---------------------------------------------

namespace {

Tensor random_leaf(Shape shape, Rng& rng, double amp = 1.0) {
  std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
  for (double& v : d) v = rng.uniform(-amp, amp);
  return Tensor::from_data(std::move(shape), std::move(d), true);
}

double check_tensor_primitives() {
  Rng rng(11);
  double worst = 0.0;
  auto run = [&](const std::function<Tensor()>& f, std::vector<Tensor> params) {
    worst = std::max(worst, grad_check(f, params));
  };
  auto a = random_leaf({3, 4}, rng);
  auto b = random_leaf({3, 4}, rng);
  run([&]() { return mean(mul(add(a, b), sub(a, b))); }, {a, b});
  run([&]() { return mean(mul(softmax(a), softmax(a))); }, {a});
  run([&]() { return mean(mul(l2_normalize(a, 1), add_scalar(a, 0.3))); }, {a});
  auto m = random_leaf({4, 3}, rng);
  auto n = random_leaf({3, 5}, rng);
  run([&]() { return mean(mul(matmul(m, n), matmul(m, n))); }, {m, n});
  auto x = random_leaf({2, 6, 5}, rng);
  auto w = random_leaf({3, 2, 3, 3}, rng);
  run([&]() { return mean(mul(conv2d(x, w, 2, 1), conv2d(x, w, 2, 1))); }, {x, w});
  run([&]() { return sum(bilinear_sample(x, 1.7, 2.3)); }, {x});
  auto logits = random_leaf({5}, rng);
  auto targets = Tensor::from_data({5}, {1, 0, 1, 1, 0});
  run([&]() { return mean(bce_with_logits(logits, targets)); }, {logits});
  auto cls = random_leaf({3, 4}, rng);
  run([&]() { return mean(cross_entropy_rows(cls, {1, 0, 3})); }, {cls});
  auto pred = random_leaf({6}, rng);
  auto tgt = Tensor::from_data({6}, {0.1, -0.4, 2.0, 0.0, -1.5, 0.3});
  run([&]() { return mean(smooth_l1(pred, tgt)); }, {pred});
  auto feats = random_leaf({5, 3}, rng);
  std::vector<std::array<int64_t, 2>> cells{{0, 0}, {1, 1}, {0, 0}, {2, 0}, {1, 1}};
  run([&]() { return mean(mul(scatter_max_bev(feats, cells, 3, 2), scatter_max_bev(feats, cells, 3, 2))); },
      {feats});
  auto bevm = random_leaf({2, 3, 2}, rng);
  run([&]() { return mean(mul(gather_cells(bevm, cells), gather_cells(bevm, cells))); }, {bevm});
  std::vector<std::vector<int64_t>> groups{{0, 1}, {2, 3, 4}, {}};
  run([&]() { return mean(mul(group_rows_max(feats, groups, 3), group_rows_max(feats, groups, 3))); },
      {feats});
  return worst;
}

double check_point_branch() {
  Rng rng(12);
  VoxelGridSpec spec;
  spec.min = {0, -4, -2};
  spec.max = {8, 4, 2};
  spec.voxel_size = {2.0, 2.0, 2.0};
  std::vector<float> pts;
  for (int i = 0; i < 30; ++i) {
    pts.push_back(static_cast<float>(rng.uniform(0.0, 8.0)));
    pts.push_back(static_cast<float>(rng.uniform(-4.0, 4.0)));
    pts.push_back(static_cast<float>(rng.uniform(-2.0, 2.0)));
    pts.push_back(0.5f);
  }
  VoxelSet vs = voxelize(pts, spec);
  auto ep = VoxelEmbedParams::init(6, rng);
  auto bp = BevBackboneParams::init(6, 4, rng);
  auto f = [&]() {
    Tensor feats = embed_voxels(vs, ep);
    Tensor bev = bev_backbone(vs, feats, spec, bp);
    return mean(mul(bev, bev));
  };
  std::vector<Tensor> params{ep.w1, ep.b1, ep.w2, ep.b2, bp.w1, bp.b1, bp.w2, bp.b2};
  return grad_check(f, params);
}

double check_image_branch() {
  Rng rng(13);
  auto bp = ImageBackboneParams::init(8, 3, rng);
  auto rp = ReduceDimParams::init(3, 5, rng);
  std::vector<double> img(3 * 8 * 8);
  for (double& v : img) v = rng.uniform(0.0, 1.0);
  Tensor image = Tensor::from_data({3, 8, 8}, std::move(img), false);
  auto f = [&]() {
    auto out = backbone_forward(image, bp);
    auto red = reduce_dim(out.c5, rp);
    return add(mean(mul(red.feats, red.feats)), mean(mul(out.p5.feats, out.p5.feats)));
  };
  std::vector<Tensor> params;
  for (Tensor* t : bp.parameters()) params.push_back(*t);
  params.push_back(rp.w);
  params.push_back(rp.b);
  return grad_check(f, params);
}

double check_cafa() {
  Rng rng(14);
  int64_t d = 4;
  auto prm = CafaParams::init(d, d, d, 2, rng);
  auto P = random_leaf({3, d}, rng);
  auto F = random_leaf({6, d}, rng);
  std::vector<Tensor> params{prm.w_q, prm.w_k, prm.w_v, prm.ffn_w, prm.ffn_b,
                             prm.mix_w, prm.mix_b, P, F};
  double worst = 0.0;
  worst = std::max(worst, grad_check([&]() {
    auto out = cafa_forward(P, F, prm, 2, 3);
    return mean(mul(out.fused, out.fused));
  }, params));
  worst = std::max(worst, grad_check([&]() {
    auto out = multihead_cafa_forward(P, F, prm, 2, 3);
    return mean(mul(out.fused, out.fused));
  }, params));
  worst = std::max(worst, grad_check([&]() {
    return mean(mul(nonlocal_fusion(P, F, prm), nonlocal_fusion(P, F, prm)));
  }, params));
  return worst;
}

double check_scfi() {
  Rng rng(15);
  auto heads = ScfiHeads::init(6, 5, 4, 4, rng);
  // nudge the biases off zero: at micro widths a dead relu layer can make a
  // projector output exactly zero, where the cosine is not differentiable
  for (auto* h : {&heads.proj3d, &heads.pred3d, &heads.proj2d, &heads.pred2d}) {
    for (double& v : h->b1.mutable_data()) v = 0.15;
    for (double& v : h->b2.mutable_data()) v = 0.1;
  }
  std::vector<std::pair<Tensor, Tensor>> pairs;
  for (int i = 0; i < 2; ++i) {
    pairs.emplace_back(random_leaf({1, 6}, rng), random_leaf({1, 5}, rng));
  }
  std::vector<Tensor> params;
  for (auto* g : {&heads.proj3d, &heads.pred3d, &heads.proj2d, &heads.pred2d}) {
    for (Tensor* t : g->parameters()) params.push_back(*t);
  }
  for (auto& [a, b] : pairs) {
    params.push_back(a);
    params.push_back(b);
  }
  ScfiTargets frozen = scfi_targets(pairs, heads);
  auto f_analytic = [&]() { return scfi_loss(pairs, heads, ScfiVariant::ncs_pos); };
  auto f_numeric = [&]() { return scfi_loss(pairs, heads, ScfiVariant::ncs_pos, &frozen); };
  return grad_check(f_analytic, f_numeric, params);
}

double check_detect_heads() {
  Rng rng(16);
  VoxelGridSpec spec;
  spec.min = {0, -4, -2};
  spec.max = {8, 4, 2};
  spec.voxel_size = {2.0, 2.0, 4.0};
  std::vector<Box3D> anchors{Box3D{0, 0, -0.8, 3.9, 1.8, 1.5, 0, 0},
                             Box3D{0, 0, -0.7, 0.7, 0.7, 1.7, 0, 1}};
  auto hp = Head3dParams::init(4, anchors, rng);
  Tensor bev = random_leaf({4, 4, 4}, rng);
  std::vector<Box3D> gts{Box3D{3.0, 1.0, -0.8, 3.9, 1.8, 1.5, 0, 0}};
  double worst = 0.0;
  {
    std::vector<Tensor> params{hp.w, hp.b, bev};
    auto f = [&]() {
      auto out = head3d_forward(bev, hp);
      auto [cls, reg] = loss3d(out, gts, spec, hp);
      return add(cls, reg);
    };
    worst = std::max(worst, grad_check(f, params));
  }
  {
    auto h2 = Head2dParams::init(3, 2, 2, rng);
    h2.top_k = 3;
    Tensor feats = random_leaf({3, 4, 4}, rng);
    std::vector<Box2D> gts2{{6.0, 6.0, 26.0, 22.0, 0}};
    FeatureMap fm0{feats, 8};
    auto frozen = head2d_forward(fm0, h2).proposals;
    std::vector<Tensor> params{feats};
    for (Tensor* t : h2.parameters()) params.push_back(*t);
    auto f = [&]() {
      FeatureMap fm{feats, 8};
      auto out = head2d_forward(fm, h2, &frozen);
      auto l = loss2d(out, gts2, h2);
      return add(add(l.rpn_cls, l.rpn_reg), add(l.rcnn_cls, l.rcnn_reg));
    };
    worst = std::max(worst, grad_check(f, params));
  }
  return worst;
}

// Full joint loss on a deterministic micro scene with frozen structural
// choices (pairs, stop-gradient targets, proposals).
double check_joint() {
  SceneConfig scfg = SceneConfig::defaults();
  scfg.image_h = 16;
  scfg.image_w = 24;
  scfg.focal = 12.0;
  scfg.point_budget = 120;
  scfg.ground_noise_points = 25;
  scfg.min_objects = 1;
  scfg.max_objects = 2;
  scfg.x_min = 4.0;
  scfg.x_max = 7.0;
  scfg.lidar_range = 10.0;
  Scene scene = generate_scene(424242, scfg);

  RunConfig cfg = RunConfig::defaults();
  cfg.hidden_dim = 8;
  cfg.heads = 2;
  cfg.roi_out = 2;
  cfg.scfi_hidden = 6;
  cfg.scfi_out = 6;
  cfg.image_stride = 8;
  cfg.backbone_channels = 4;
  cfg.bev_channels = 5;
  cfg.scfi_pairs = 1;
  cfg.top_k_proposals = 3;
  cfg.fusion = FusionStrategy::cafa;
  cfg.scfi = ScfiMode::ncs_pos;
  cfg.joint_2d = true;
  cfg.voxel_grid.min = {0, -4, -2};
  cfg.voxel_grid.max = {8, 4, 2};
  cfg.voxel_grid.voxel_size = {2.0, 2.0, 2.0};
  cfg.seed = 7;
  Model model = Model::init(cfg);
  SceneInputs in = SceneInputs::prepare(scene, cfg);

  FrozenStructure frozen;
  Rng capture_rng(3);
  model.forward(in, false, capture_rng, nullptr, &frozen);

  auto named = model.all_params();
  std::vector<Tensor> params;
  for (auto& p : named) params.push_back(p.tensor);
  Rng dummy(4);
  auto f = [&]() { return model.forward(in, false, dummy, &frozen).losses.total; };
  return grad_check(f, params);
}

}  // namespace

std::vector<GradCheckResult> gradcheck_modules(const std::string& only) {
  struct Entry {
    const char* name;
    double (*fn)();
  };
  const Entry entries[] = {
      {"tensor", &check_tensor_primitives}, {"point_branch", &check_point_branch},
      {"image_branch", &check_image_branch}, {"cafa", &check_cafa},
      {"scfi", &check_scfi},                 {"detect", &check_detect_heads},
      {"joint", &check_joint},
  };
  std::vector<GradCheckResult> out;
  bool matched = false;
  for (const Entry& e : entries) {
    if (!only.empty() && only != e.name) continue;
    matched = true;
    out.push_back(GradCheckResult{e.name, e.fn()});
  }
  if (!only.empty() && !matched) {
    fail(ErrorCode::invalid_argument,
         "gradcheck: unknown module '" + only +
             "' (want tensor|point_branch|image_branch|cafa|scfi|detect|joint)");
  }
  return out;
}

}  // namespace vf
