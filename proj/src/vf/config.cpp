#include "vf/config.hpp"

#include <cmath>

#include "vf/io_util.hpp"

using nlohmann::json;

namespace vf {

const char* to_string(FusionStrategy v) {
  switch (v) {
    case FusionStrategy::none: return "none";
    case FusionStrategy::point_proj: return "point_proj";
    case FusionStrategy::nonlocal: return "nonlocal";
    case FusionStrategy::cafa: return "cafa";
    case FusionStrategy::cafa_multihead: return "cafa_multihead";
  }
  return "?";
}

const char* to_string(ScfiMode v) {
  switch (v) {
    case ScfiMode::off: return "off";
    case ScfiMode::ncs_pos: return "ncs_pos";
    case ScfiMode::symmetric: return "symmetric";
    case ScfiMode::nce: return "nce";
    case ScfiMode::infonce: return "infonce";
    case ScfiMode::ce_pos: return "ce_pos";
  }
  return "?";
}

const char* to_string(ScfiImageSource v) {
  return v == ScfiImageSource::c5 ? "c5" : "p5";
}

const char* to_string(ScfiPointSource v) {
  return v == ScfiPointSource::before_backbone ? "before" : "after";
}

const char* to_string(OptimKind v) { return v == OptimKind::adamw ? "adamw" : "sgd"; }

namespace {

template <typename T>
T parse_enum(const std::string& s, std::initializer_list<std::pair<const char*, T>> table,
             const char* field) {
  for (const auto& [name, value] : table) {
    if (s == name) return value;
  }
  fail(ErrorCode::parse, std::string("config: bad value '") + s + "' for " + field);
}

FusionStrategy parse_fusion(const std::string& s) {
  return parse_enum<FusionStrategy>(s,
                                    {{"none", FusionStrategy::none},
                                     {"point_proj", FusionStrategy::point_proj},
                                     {"nonlocal", FusionStrategy::nonlocal},
                                     {"cafa", FusionStrategy::cafa},
                                     {"cafa_multihead", FusionStrategy::cafa_multihead}},
                                    "fusion");
}

ScfiMode parse_scfi(const std::string& s) {
  return parse_enum<ScfiMode>(s,
                              {{"off", ScfiMode::off},
                               {"ncs_pos", ScfiMode::ncs_pos},
                               {"symmetric", ScfiMode::symmetric},
                               {"nce", ScfiMode::nce},
                               {"infonce", ScfiMode::infonce},
                               {"ce_pos", ScfiMode::ce_pos}},
                              "scfi");
}

}  // namespace

RunConfig RunConfig::defaults() {
  RunConfig cfg;
  cfg.voxel_grid.min = {0, -16, -2.5};
  cfg.voxel_grid.max = {40, 16, 1.5};
  cfg.voxel_grid.voxel_size = {0.8, 0.8, 1.0};
  cfg.anchors = {Box3D{0, 0, -0.825, 3.9, 1.8, 1.55, 0, 0},
                 Box3D{0, 0, -0.725, 1.0, 1.0, 1.75, 0, 1}};
  return cfg;
}

json RunConfig::to_json() const {
  json grid{{"min", voxel_grid.min}, {"max", voxel_grid.max}, {"voxel_size", voxel_grid.voxel_size}};
  json anchors_j = json::array();
  for (const auto& a : anchors) {
    anchors_j.push_back({{"size", {a.l, a.w, a.h}}, {"z", a.z}});
  }
  return json{{"dataset_dir", dataset_dir},
              {"seed", seed},
              {"steps", steps},
              {"batch_size", batch_size},
              {"lr3d", lr3d},
              {"lr2d", lr2d},
              {"opt3d", to_string(opt3d)},
              {"opt2d", to_string(opt2d)},
              {"fusion", to_string(fusion)},
              {"scfi", to_string(scfi)},
              {"scfi_image_source", to_string(scfi_image_source)},
              {"scfi_point_source", to_string(scfi_point_source)},
              {"joint_2d", joint_2d},
              {"scfi_pairs", scfi_pairs},
              {"loss_weights",
               {{"l3d_cls", loss_weights.l3d_cls},
                {"l3d_reg", loss_weights.l3d_reg},
                {"l2d_rpn_cls", loss_weights.l2d_rpn_cls},
                {"l2d_rpn_reg", loss_weights.l2d_rpn_reg},
                {"l2d_rcnn_cls", loss_weights.l2d_rcnn_cls},
                {"l2d_rcnn_reg", loss_weights.l2d_rcnn_reg},
                {"l_scfi", loss_weights.l_scfi}}},
              {"hidden_dim", hidden_dim},
              {"heads", heads},
              {"roi_out", roi_out},
              {"scfi_hidden", scfi_hidden},
              {"scfi_out", scfi_out},
              {"image_stride", image_stride},
              {"backbone_channels", backbone_channels},
              {"bev_channels", bev_channels},
              {"cafa_dropout", cafa_dropout},
              {"cafa_dropout_p", cafa_dropout_p},
              {"cafa_layer_norm", cafa_layer_norm},
              {"top_k_proposals", top_k_proposals},
              {"anchor2d_size", anchor2d_size},
              {"scfi_score_thresh", scfi_score_thresh},
              {"train_decode_thresh", train_decode_thresh},
              {"eval_score_thresh", eval_score_thresh},
              {"nms_iou", nms_iou},
              {"ap_iou_3d", ap_iou_3d},
              {"ap_iou_bev", ap_iou_bev},
              {"eval_every", eval_every},
              {"voxel_grid", grid},
              {"anchors", anchors_j}};
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig cfg = defaults();
  try {
    cfg.dataset_dir = j.value("dataset_dir", cfg.dataset_dir);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.steps = j.value("steps", cfg.steps);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.lr3d = j.value("lr3d", cfg.lr3d);
    cfg.lr2d = j.value("lr2d", cfg.lr2d);
    if (j.contains("opt3d")) {
      cfg.opt3d = parse_enum<OptimKind>(j.at("opt3d"),
                                        {{"adamw", OptimKind::adamw}, {"sgd", OptimKind::sgd}},
                                        "opt3d");
    }
    if (j.contains("opt2d")) {
      cfg.opt2d = parse_enum<OptimKind>(j.at("opt2d"),
                                        {{"adamw", OptimKind::adamw}, {"sgd", OptimKind::sgd}},
                                        "opt2d");
    }
    if (j.contains("fusion")) cfg.fusion = parse_fusion(j.at("fusion"));
    if (j.contains("scfi")) cfg.scfi = parse_scfi(j.at("scfi"));
    if (j.contains("scfi_image_source")) {
      cfg.scfi_image_source = parse_enum<ScfiImageSource>(
          j.at("scfi_image_source"),
          {{"c5", ScfiImageSource::c5}, {"p5", ScfiImageSource::p5}}, "scfi_image_source");
    }
    if (j.contains("scfi_point_source")) {
      cfg.scfi_point_source = parse_enum<ScfiPointSource>(
          j.at("scfi_point_source"),
          {{"before", ScfiPointSource::before_backbone},
           {"after", ScfiPointSource::after_backbone}},
          "scfi_point_source");
    }
    cfg.joint_2d = j.value("joint_2d", cfg.joint_2d);
    cfg.scfi_pairs = j.value("scfi_pairs", cfg.scfi_pairs);
    if (j.contains("loss_weights")) {
      const auto& w = j.at("loss_weights");
      cfg.loss_weights.l3d_cls = w.value("l3d_cls", 1.0);
      cfg.loss_weights.l3d_reg = w.value("l3d_reg", 1.0);
      cfg.loss_weights.l2d_rpn_cls = w.value("l2d_rpn_cls", 1.0);
      cfg.loss_weights.l2d_rpn_reg = w.value("l2d_rpn_reg", 1.0);
      cfg.loss_weights.l2d_rcnn_cls = w.value("l2d_rcnn_cls", 1.0);
      cfg.loss_weights.l2d_rcnn_reg = w.value("l2d_rcnn_reg", 1.0);
      cfg.loss_weights.l_scfi = w.value("l_scfi", 1.0);
    }
    cfg.hidden_dim = j.value("hidden_dim", cfg.hidden_dim);
    cfg.heads = j.value("heads", cfg.heads);
    cfg.roi_out = j.value("roi_out", cfg.roi_out);
    cfg.scfi_hidden = j.value("scfi_hidden", cfg.scfi_hidden);
    cfg.scfi_out = j.value("scfi_out", cfg.scfi_out);
    cfg.image_stride = j.value("image_stride", cfg.image_stride);
    cfg.backbone_channels = j.value("backbone_channels", cfg.backbone_channels);
    cfg.bev_channels = j.value("bev_channels", cfg.bev_channels);
    cfg.cafa_dropout = j.value("cafa_dropout", cfg.cafa_dropout);
    cfg.cafa_dropout_p = j.value("cafa_dropout_p", cfg.cafa_dropout_p);
    cfg.cafa_layer_norm = j.value("cafa_layer_norm", cfg.cafa_layer_norm);
    cfg.top_k_proposals = j.value("top_k_proposals", cfg.top_k_proposals);
    cfg.anchor2d_size = j.value("anchor2d_size", cfg.anchor2d_size);
    cfg.scfi_score_thresh = j.value("scfi_score_thresh", cfg.scfi_score_thresh);
    cfg.train_decode_thresh = j.value("train_decode_thresh", cfg.train_decode_thresh);
    cfg.eval_score_thresh = j.value("eval_score_thresh", cfg.eval_score_thresh);
    cfg.nms_iou = j.value("nms_iou", cfg.nms_iou);
    cfg.ap_iou_3d = j.value("ap_iou_3d", cfg.ap_iou_3d);
    cfg.ap_iou_bev = j.value("ap_iou_bev", cfg.ap_iou_bev);
    cfg.eval_every = j.value("eval_every", cfg.eval_every);
    if (j.contains("voxel_grid")) {
      const auto& g = j.at("voxel_grid");
      if (g.contains("min")) cfg.voxel_grid.min = g.at("min");
      if (g.contains("max")) cfg.voxel_grid.max = g.at("max");
      if (g.contains("voxel_size")) cfg.voxel_grid.voxel_size = g.at("voxel_size");
    }
    if (j.contains("anchors")) {
      cfg.anchors.clear();
      int cls = 0;
      for (const auto& a : j.at("anchors")) {
        Box3D b;
        b.l = a.at("size").at(0);
        b.w = a.at("size").at(1);
        b.h = a.at("size").at(2);
        b.z = a.at("z");
        b.class_id = cls++;
        cfg.anchors.push_back(b);
      }
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::parse, std::string("config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

std::string RunConfig::hash() const {
  std::string s = to_json().dump();
  return hex64(fnv1a64(std::span<const uint8_t>(
      reinterpret_cast<const uint8_t*>(s.data()), s.size())));
}

void RunConfig::validate() const {
  if (lr3d <= 0 || lr2d <= 0) fail(ErrorCode::invalid_argument, "config: learning rates must be > 0");
  if (steps < 1) fail(ErrorCode::invalid_argument, "config: steps must be >= 1");
  if (batch_size < 1) fail(ErrorCode::invalid_argument, "config: batch_size must be >= 1");
  if (scfi_pairs < 1) fail(ErrorCode::invalid_argument, "config: scfi_pairs must be >= 1");
  if (hidden_dim < 1 || roi_out < 1) fail(ErrorCode::invalid_argument, "config: bad model dims");
  if (heads < 1 || hidden_dim % heads != 0) {
    fail(ErrorCode::invalid_argument, "config: heads must divide hidden_dim");
  }
  if (anchors.size() != 2) fail(ErrorCode::invalid_argument, "config: need one anchor per class");
  voxel_grid.validate();
}

}  // namespace vf
