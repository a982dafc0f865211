#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "vf/geometry.hpp"
#include "vf/point_branch.hpp"

namespace vf {

inline constexpr const char* kVersion = "0.1.0";

enum class FusionStrategy { none, point_proj, nonlocal, cafa, cafa_multihead };
enum class ScfiMode { off, ncs_pos, symmetric, nce, infonce, ce_pos };
enum class ScfiImageSource { c5, p5 };
enum class ScfiPointSource { before_backbone, after_backbone };
enum class OptimKind { adamw, sgd };

const char* to_string(FusionStrategy v);
const char* to_string(ScfiMode v);
const char* to_string(ScfiImageSource v);
const char* to_string(ScfiPointSource v);
const char* to_string(OptimKind v);

struct LossWeights {
  double l3d_cls = 1.0, l3d_reg = 1.0;
  double l2d_rpn_cls = 1.0, l2d_rpn_reg = 1.0, l2d_rcnn_cls = 1.0, l2d_rcnn_reg = 1.0;
  double l_scfi = 1.0;
};

struct RunConfig {
  std::string dataset_dir;
  uint64_t seed = 0;
  int steps = 300;
  int batch_size = 1;
  double lr3d = 1e-3;
  double lr2d = 1e-2;
  OptimKind opt3d = OptimKind::adamw;
  OptimKind opt2d = OptimKind::sgd;
  FusionStrategy fusion = FusionStrategy::cafa;
  ScfiMode scfi = ScfiMode::ncs_pos;
  ScfiImageSource scfi_image_source = ScfiImageSource::c5;
  ScfiPointSource scfi_point_source = ScfiPointSource::before_backbone;
  bool joint_2d = true;
  int scfi_pairs = 2;
  LossWeights loss_weights;

  // model dimensions (defaults follow the reference operating point)
  int hidden_dim = 128;
  int heads = 4;
  int roi_out = 4;
  int scfi_hidden = 512;
  int scfi_out = 2048;
  int image_stride = 8;
  int backbone_channels = 64;
  int bev_channels = 32;
  bool cafa_dropout = false;
  double cafa_dropout_p = 0.1;
  bool cafa_layer_norm = false;
  int top_k_proposals = 16;
  double anchor2d_size = 24.0;

  // decoding / evaluation
  double scfi_score_thresh = 0.3;
  double train_decode_thresh = 0.3;
  double eval_score_thresh = 0.01;
  double nms_iou = 0.5;
  double ap_iou_3d = 0.25;
  double ap_iou_bev = 0.25;
  int eval_every = 0;  // 0: evaluate only after the final step

  VoxelGridSpec voxel_grid;
  std::vector<Box3D> anchors;  // per-class size template and center z

  static RunConfig defaults();
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  std::string hash() const;
  void validate() const;

  bool needs_image_branch() const {
    return fusion != FusionStrategy::none || scfi != ScfiMode::off || joint_2d;
  }
  bool fusion_uses_reduced_map() const { return fusion != FusionStrategy::none; }
  bool fusion_has_align() const {
    return fusion == FusionStrategy::cafa || fusion == FusionStrategy::cafa_multihead;
  }
};

}  // namespace vf
