#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "vf/geometry.hpp"
#include "vf/image_branch.hpp"
#include "vf/point_branch.hpp"
#include "vf/rng.hpp"
#include "vf/scfi.hpp"
#include "vf/tensor.hpp"

namespace vf {

struct DetectionBox3D {
  Box3D box;
  double score = 0;
};

struct DetectionBox2D {
  Box2D box;
  double score = 0;
};

// Per-term joint loss; undefined tensors mean the component is disabled and
// unlogged. total is always defined.
struct LossBreakdown {
  Tensor l3d_cls, l3d_reg;
  Tensor l2d_rpn_cls, l2d_rpn_reg, l2d_rcnn_cls, l2d_rcnn_reg;
  Tensor l_scfi;
  Tensor total;
};

// ---- 3D head ----------------------------------------------------------------

// Dense per-BEV-cell head: C class logits plus, per class anchor, one
// objectness logit and six residuals (dx, dy, dz, dl, dw, dh) against a fixed
// per-class anchor centered on the cell.
struct Head3dParams {
  Tensor w, b;  // 1x1 conv: c_bev -> C + 7C
  int n_classes = 2;
  std::vector<Box3D> anchors;  // per-class template: size and center z

  static Head3dParams init(int64_t c_bev, std::span<const Box3D> anchors, Rng& rng);
  std::vector<Tensor*> parameters() { return {&w, &b}; }
};

struct Head3dOut {
  Tensor map;  // [(C + 7C) x X x Y]
};

Head3dOut head3d_forward(const Tensor& bev, const Head3dParams& params);

// score = sigmoid(objectness) * softmax(class logits)[class]; residuals are
// applied to the cell anchor, then score threshold and per-class NMS.
std::vector<DetectionBox3D> head3d_decode(const Head3dOut& out, const VoxelGridSpec& spec,
                                          const Head3dParams& params, double score_thresh,
                                          double nms_iou);

// A cell is positive iff its anchor center falls inside a gt box. cls is the
// objectness BCE over all cells plus class cross-entropy at positives; reg is
// smooth-L1 on the positive cells' residuals, normalized by max(1, positives).
std::pair<Tensor, Tensor> loss3d(const Head3dOut& out, std::span<const Box3D> gts,
                                 const VoxelGridSpec& spec, const Head3dParams& params);

// ---- 2D head ----------------------------------------------------------------

struct Head2dParams {
  Tensor rpn_w, rpn_b;  // 1x1 conv: c -> 5 (objectness + 4 deltas)
  Tensor rcnn_w1, rcnn_b1, rcnn_w2, rcnn_b2;
  int n_classes = 2;
  double anchor_size = 24.0;  // square anchor, image pixels
  int top_k = 16;
  int roi_out = 4;

  static Head2dParams init(int64_t c_in, int n_classes, int roi_out, Rng& rng);
  std::vector<Tensor*> parameters();
};

struct Head2dOut {
  Tensor rpn_map;                // [5 x h x w]
  std::vector<Box2D> proposals;  // decoded top-K (values, class_id unset)
  std::vector<double> proposal_scores;
  Tensor rcnn;                   // [K x (C+1+4)]
  int fmap_h = 0, fmap_w = 0, stride = 1;
};

// fixed_proposals, when given, bypasses the stage-1 decode (used by
// finite-difference oracles, where the detached proposal boxes must not move
// with the perturbed parameters).
Head2dOut head2d_forward(const FeatureMap& fmap, const Head2dParams& params,
                         const std::vector<Box2D>* fixed_proposals = nullptr);

struct Loss2d {
  Tensor rpn_cls, rpn_reg, rcnn_cls, rcnn_reg;
};
Loss2d loss2d(const Head2dOut& out, std::span<const Box2D> gts, const Head2dParams& params);

// Final 2D detections from the second stage (per-proposal argmax class).
std::vector<DetectionBox2D> head2d_decode(const Head2dOut& out, const Head2dParams& params,
                                          int image_w, int image_h, double score_thresh,
                                          double nms_iou);

// ---- NMS / AP ----------------------------------------------------------------

// Greedy descending-score suppression (IoU above the threshold suppresses);
// exact ties keep the lower input index.
std::vector<DetectionBox3D> nms_3d(std::vector<DetectionBox3D> boxes, double iou_thresh = 0.5);
std::vector<DetectionBox2D> nms_2d(std::vector<DetectionBox2D> boxes, double iou_thresh = 0.5);

struct EvalPred3D {
  Box3D box;
  double score = 0;
  int scene = 0;
};

// 40-point interpolated AP for one class. Matching is greedy best-IoU-first
// in score order, one match per gt. With no gt boxes the AP is 0 when
// predictions exist and 1 when none do.
double average_precision(std::span<const EvalPred3D> preds,
                         const std::vector<std::vector<Box3D>>& gts_per_scene, int class_id,
                         double iou_thresh, bool bev);

}  // namespace vf
