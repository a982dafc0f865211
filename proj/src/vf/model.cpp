#include "vf/model.hpp"

#include <filesystem>

namespace fs = std::filesystem;
using nlohmann::json;

namespace vf {

SceneInputs SceneInputs::prepare(Scene scene, const RunConfig& cfg) {
  SceneInputs in;
  in.voxels = voxelize(scene.points, cfg.voxel_grid);
  if (cfg.needs_image_branch()) in.image = image_to_tensor(scene.image);
  in.scene = std::move(scene);
  return in;
}

Model Model::init(const RunConfig& cfg) {
  cfg.validate();
  Rng rng(splitmix64(cfg.seed ^ 0x5eedc0de5eedc0deULL));
  Model m;
  m.cfg = cfg;
  int64_t d = cfg.hidden_dim;
  m.embed = VoxelEmbedParams::init(d, rng);
  m.bev = BevBackboneParams::init(d, cfg.bev_channels, rng);
  m.head3d = Head3dParams::init(cfg.bev_channels, cfg.anchors, rng);

  m.has_fusion = cfg.fusion != FusionStrategy::none;
  m.has_image = cfg.needs_image_branch();
  m.has_reduce = cfg.fusion_uses_reduced_map();
  m.has_head2d = cfg.joint_2d;
  m.has_scfi = cfg.scfi != ScfiMode::off;

  if (m.has_image) {
    bool with_p5 = cfg.joint_2d || (cfg.scfi != ScfiMode::off &&
                                    cfg.scfi_image_source == ScfiImageSource::p5);
    m.backbone = ImageBackboneParams::init(cfg.image_stride, cfg.backbone_channels, rng, with_p5);
  }
  if (m.has_reduce) {
    m.reduce = ReduceDimParams::init(cfg.backbone_channels, d, rng);
  }
  if (m.has_fusion) {
    if (cfg.fusion == FusionStrategy::point_proj) {
      m.fusion_params = CafaParams::init_mix_only(d, rng);
    } else {
      m.fusion_params = CafaParams::init(d, d, d, cfg.heads, rng);
      m.fusion_params.layer_norm = cfg.cafa_layer_norm;
      m.fusion_params.dropout_p = cfg.cafa_dropout ? cfg.cafa_dropout_p : 0.0;
    }
  }
  if (m.has_head2d) {
    m.head2d = Head2dParams::init(cfg.backbone_channels, static_cast<int>(cfg.anchors.size()),
                                  cfg.roi_out, rng);
    m.head2d.top_k = cfg.top_k_proposals;
    m.head2d.anchor_size = cfg.anchor2d_size;
  }
  if (m.has_scfi) {
    int64_t point_dim = cfg.scfi_point_source == ScfiPointSource::before_backbone
                            ? d
                            : cfg.bev_channels;
    int64_t cell3 = static_cast<int64_t>(cfg.roi_out) * cfg.roi_out * cfg.roi_out;
    int64_t cell2 = static_cast<int64_t>(cfg.roi_out) * cfg.roi_out;
    m.scfi_heads = ScfiHeads::init(cell3 * point_dim, cell2 * cfg.backbone_channels,
                                   cfg.scfi_hidden, cfg.scfi_out, rng);
  }
  return m;
}

namespace {

void push(std::vector<NamedParam>& out, const std::string& name, const Tensor& t) {
  out.push_back(NamedParam{name, t});
}

void push_all(std::vector<NamedParam>& out, const std::string& prefix,
              std::vector<Tensor*> tensors) {
  int i = 0;
  for (Tensor* t : tensors) {
    push(out, prefix + "." + std::to_string(i++), *t);
  }
}

}  // namespace

std::vector<NamedParam> Model::point_side_params() {
  std::vector<NamedParam> out;
  push(out, "embed.w1", embed.w1);
  push(out, "embed.b1", embed.b1);
  push(out, "embed.w2", embed.w2);
  push(out, "embed.b2", embed.b2);
  push(out, "bev.w1", bev.w1);
  push(out, "bev.b1", bev.b1);
  push(out, "bev.w2", bev.w2);
  push(out, "bev.b2", bev.b2);
  push(out, "head3d.w", head3d.w);
  push(out, "head3d.b", head3d.b);
  if (has_fusion) push_all(out, "fusion", fusion_params.parameters());
  if (has_scfi) push_all(out, "scfi3d", scfi_heads.point_parameters());
  return out;
}

std::vector<NamedParam> Model::image_side_params() {
  std::vector<NamedParam> out;
  if (has_image) push_all(out, "backbone", backbone.parameters());
  if (has_reduce) {
    push(out, "reduce.w", reduce.w);
    push(out, "reduce.b", reduce.b);
  }
  if (has_head2d) push_all(out, "head2d", head2d.parameters());
  if (has_scfi) push_all(out, "scfi2d", scfi_heads.image_parameters());
  return out;
}

std::vector<NamedParam> Model::all_params() {
  auto out = point_side_params();
  auto img = image_side_params();
  out.insert(out.end(), img.begin(), img.end());
  return out;
}

ForwardResult Model::forward(const SceneInputs& in, bool decode_detections, Rng& step_rng,
                             const FrozenStructure* frozen, FrozenStructure* capture) const {
  ForwardResult result;
  result.voxel_count = in.voxels.size();
  if (in.voxels.size() == 0) {
    result.losses.total = Tensor::scalar(0.0);
    return result;
  }

  Tensor voxel_feats = embed_voxels(in.voxels, embed);

  // image branch
  FeatureMap c5, p5, reduced;
  if (has_image) {
    auto maps = backbone_forward(in.image, backbone);
    c5 = maps.c5;
    p5 = maps.p5;
    if (has_reduce) reduced = reduce_dim(c5, reduce);
  }

  // fusion
  Tensor fused = voxel_feats;
  if (has_fusion) {
    switch (cfg.fusion) {
      case FusionStrategy::point_proj:
        fused = point_projection_fusion(voxel_feats, reduced, in.scene.projection, in.voxels,
                                        cfg.voxel_grid, fusion_params);
        break;
      case FusionStrategy::nonlocal:
        fused = nonlocal_fusion(voxel_feats, flatten_spatial(reduced), fusion_params);
        break;
      case FusionStrategy::cafa: {
        Rng* drop = fusion_params.dropout_p > 0.0 ? &step_rng : nullptr;
        auto r = cafa_forward(voxel_feats, flatten_spatial(reduced), fusion_params,
                              reduced.height(), reduced.width(), drop);
        fused = r.fused;
        result.align = r.align;
        break;
      }
      case FusionStrategy::cafa_multihead: {
        Rng* drop = fusion_params.dropout_p > 0.0 ? &step_rng : nullptr;
        auto r = multihead_cafa_forward(voxel_feats, flatten_spatial(reduced), fusion_params,
                                        reduced.height(), reduced.width(), drop);
        fused = r.fused;
        result.align = r.align;
        break;
      }
      case FusionStrategy::none:
        break;
    }
  }

  Tensor bev_map = bev_backbone(in.voxels, fused, cfg.voxel_grid, bev);
  Head3dOut h3 = head3d_forward(bev_map, head3d);
  auto [l3d_cls, l3d_reg] = loss3d(h3, in.scene.gt_boxes3d, cfg.voxel_grid, head3d);
  result.losses.l3d_cls = l3d_cls;
  result.losses.l3d_reg = l3d_reg;

  bool need_decode = decode_detections || has_scfi;
  if (need_decode) {
    double thresh = decode_detections ? cfg.eval_score_thresh : cfg.train_decode_thresh;
    result.detections = head3d_decode(h3, cfg.voxel_grid, head3d, thresh, cfg.nms_iou);
  }

  Head2dOut h2;
  if (has_head2d) {
    h2 = head2d_forward(p5, head2d, frozen ? &frozen->proposals : nullptr);
    if (capture) capture->proposals = h2.proposals;
    Loss2d l2 = loss2d(h2, in.scene.gt_boxes2d, head2d);
    result.losses.l2d_rpn_cls = l2.rpn_cls;
    result.losses.l2d_rpn_reg = l2.rpn_reg;
    result.losses.l2d_rcnn_cls = l2.rcnn_cls;
    result.losses.l2d_rcnn_reg = l2.rcnn_reg;
  }

  if (has_scfi) {
    std::vector<BoxPair> pairs;
    if (frozen) {
      pairs = frozen->pairs;
    } else {
      std::vector<Box3D> boxes;
      std::vector<double> scores;
      for (const auto& det : result.detections) {
        boxes.push_back(det.box);
        scores.push_back(det.score);
      }
      pairs = sample_pairs(boxes, scores, in.scene.gt_boxes3d, in.scene.projection,
                           in.scene.image.width, in.scene.image.height, cfg.scfi_pairs,
                           step_rng, cfg.scfi_score_thresh);
    }
    if (capture) capture->pairs = pairs;
    if (!pairs.empty()) {
      const FeatureMap& img_src = cfg.scfi_image_source == ScfiImageSource::c5 ? c5 : p5;
      Tensor point_src = cfg.scfi_point_source == ScfiPointSource::before_backbone
                             ? fused
                             : gather_cells(bev_map, in.voxels.bev_cells());
      std::vector<std::pair<Tensor, Tensor>> roi_pairs;
      for (const BoxPair& bp : pairs) {
        auto r3 = roi_pool_3d(in.voxels, point_src, cfg.voxel_grid, bp.box3d, cfg.roi_out);
        auto r2 = roi_align_2d(img_src, bp.box2d, cfg.roi_out);
        // a box covering no voxels pools to exactly zero; the cosine terms
        // sit on the epsilon-floored normalization there, so drop the pair
        bool all_zero = true;
        for (double v : r3.flat.data()) {
          if (v != 0.0) {
            all_zero = false;
            break;
          }
        }
        if (all_zero) continue;
        roi_pairs.emplace_back(r3.flat, r2.flat);
      }
      if (!roi_pairs.empty()) {
        ScfiVariant variant;
        switch (cfg.scfi) {
          case ScfiMode::ncs_pos: variant = ScfiVariant::ncs_pos; break;
          case ScfiMode::symmetric: variant = ScfiVariant::symmetric; break;
          case ScfiMode::nce: variant = ScfiVariant::nce; break;
          case ScfiMode::infonce: variant = ScfiVariant::infonce; break;
          case ScfiMode::ce_pos: variant = ScfiVariant::ce_pos; break;
          default: fail(ErrorCode::state, "forward: scfi mode off but has_scfi set");
        }
        if (capture) {
          capture->targets = scfi_targets(roi_pairs, scfi_heads);
        }
        const ScfiTargets* tgt =
            frozen && frozen->targets.has_value() ? &frozen->targets.value() : nullptr;
        result.losses.l_scfi = scfi_loss(roi_pairs, scfi_heads, variant, tgt);
      }
    }
  }

  // weighted total
  const LossWeights& w = cfg.loss_weights;
  Tensor total = scale(result.losses.l3d_cls, w.l3d_cls);
  total = add(total, scale(result.losses.l3d_reg, w.l3d_reg));
  if (result.losses.l2d_rpn_cls.defined()) {
    total = add(total, scale(result.losses.l2d_rpn_cls, w.l2d_rpn_cls));
    total = add(total, scale(result.losses.l2d_rpn_reg, w.l2d_rpn_reg));
    total = add(total, scale(result.losses.l2d_rcnn_cls, w.l2d_rcnn_cls));
    total = add(total, scale(result.losses.l2d_rcnn_reg, w.l2d_rcnn_reg));
  }
  if (result.losses.l_scfi.defined()) {
    total = add(total, scale(result.losses.l_scfi, w.l_scfi));
  }
  result.losses.total = total;
  return result;
}

void Model::save_checkpoint(const std::string& dir) const {
  fs::create_directories(dir);
  auto params = const_cast<Model*>(this)->all_params();
  json manifest;
  manifest["format"] = 1;
  manifest["version"] = kVersion;
  manifest["config"] = cfg.to_json();
  json plist = json::array();
  int i = 0;
  for (const auto& p : params) {
    char fname[32];
    std::snprintf(fname, sizeof(fname), "p%04d.aatn", i++);
    save_tensor(p.tensor, dir + "/" + fname);
    plist.push_back({{"name", p.name}, {"file", fname}});
  }
  manifest["params"] = plist;
  write_file_text(dir + "/manifest.json", manifest.dump(2) + "\n");
}

Model Model::load_checkpoint(const std::string& dir) {
  json manifest;
  try {
    manifest = json::parse(read_file_text(dir + "/manifest.json"));
  } catch (const json::exception& e) {
    fail(ErrorCode::parse, "checkpoint manifest: " + std::string(e.what()));
  }
  RunConfig cfg = RunConfig::from_json(manifest.at("config"));
  Model m = Model::init(cfg);
  auto params = m.all_params();
  const auto& plist = manifest.at("params");
  if (plist.size() != params.size()) {
    fail(ErrorCode::parse, "checkpoint: parameter count mismatch (config/component drift)");
  }
  for (size_t i = 0; i < params.size(); ++i) {
    std::string name = plist.at(i).at("name");
    std::string file = plist.at(i).at("file");
    if (name != params[i].name) {
      fail(ErrorCode::parse, "checkpoint: parameter order mismatch at '" + name + "'");
    }
    Tensor loaded = load_tensor(dir + "/" + file);
    if (loaded.shape() != params[i].tensor.shape()) {
      fail(ErrorCode::parse, "checkpoint: shape mismatch for '" + name + "'");
    }
    auto dst = params[i].tensor.mutable_data();
    auto src = loaded.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return m;
}

}  // namespace vf
