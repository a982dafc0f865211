#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "vf/geometry.hpp"
#include "vf/image_branch.hpp"
#include "vf/point_branch.hpp"
#include "vf/tensor.hpp"

namespace vf {

struct RoiFeature {
  Tensor grid;  // [out, out, c] (2D) or [out, out, out, c] (3D)
  Tensor flat;  // [1 x numel]
};

// Pools a 2D box (image pixels) from a feature map: the box is divided by the
// map stride, split into out x out cells, and each cell samples its center
// bilinearly. Differentiable w.r.t. the feature map.
RoiFeature roi_align_2d(const FeatureMap& f, const Box2D& b, int out = 4);

// Pools a yaw-0 3D box from a voxel set: out^3 cells, elementwise max over
// feature rows of the voxels whose centers fall inside each cell; empty cells
// are zero.
RoiFeature roi_pool_3d(const VoxelSet& vs, const Tensor& feats, const VoxelGridSpec& spec,
                       const Box3D& b, int out = 4);

// Negative cosine similarity of two vectors (epsilon-floored norms).
double ncs_distance(std::span<const double> p, std::span<const double> q);

// Projector h (in -> hidden -> out) and predictor f (out -> hidden -> out),
// relu between the layers.
struct MlpHead {
  Tensor w1, b1, w2, b2;

  static MlpHead init(int64_t in, int64_t hidden, int64_t out, Rng& rng);
  Tensor forward(const Tensor& x) const;  // x: [n x in]
  std::vector<Tensor*> parameters();
};

// One (h, f) pair per modality; projector outputs must agree in width.
struct ScfiHeads {
  MlpHead proj3d, pred3d;
  MlpHead proj2d, pred2d;

  static ScfiHeads init(int64_t in3d, int64_t in2d, int64_t hidden, int64_t out, Rng& rng);
  std::vector<Tensor*> point_parameters();
  std::vector<Tensor*> image_parameters();
};

enum class ScfiVariant { ncs_pos, symmetric, nce, infonce, ce_pos };

// Value snapshots of the projector outputs (the stop-gradient targets).
// Finite-difference oracles pass these to hold the blocked branches fixed
// while the live branches are perturbed.
struct ScfiTargets {
  Tensor q1;  // h(R3D) rows
  Tensor q2;  // h(R2D) rows
};
ScfiTargets scfi_targets(std::span<const std::pair<Tensor, Tensor>> pairs,
                         const ScfiHeads& heads);

// pairs: per pair the flattened 3D and 2D RoI features ([1 x in] rows).
// All variants except `symmetric` stop gradients through the projector-only
// (q) targets; when frozen is given those targets are replaced by the
// supplied constants instead.
Tensor scfi_loss(std::span<const std::pair<Tensor, Tensor>> pairs, const ScfiHeads& heads,
                 ScfiVariant variant, const ScfiTargets* frozen = nullptr);

struct BoxPair {
  Box3D box3d;
  Box2D box2d;
};

// Takes predictions with score >= score_thresh, pads with ground truth when
// fewer than n remain, samples n without replacement, and pairs each box with
// its camera projection. Boxes with degenerate projections are skipped; an
// empty result means the caller skips the interaction loss this step.
std::vector<BoxPair> sample_pairs(std::span<const Box3D> pred_boxes,
                                  std::span<const double> pred_scores,
                                  std::span<const Box3D> gt_boxes,
                                  const CameraProjection& proj, int image_w, int image_h,
                                  int n, Rng& rng, double score_thresh = 0.3);

}  // namespace vf
