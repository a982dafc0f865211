#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vf/config.hpp"
#include "vf/detect.hpp"
#include "vf/fusion.hpp"
#include "vf/optim.hpp"
#include "vf/scene.hpp"

namespace vf {

// Constant per-scene inputs, computed once and reused across steps.
struct SceneInputs {
  Scene scene;
  VoxelSet voxels;
  Tensor image;  // 3 x H x W, defined only when the config needs images

  static SceneInputs prepare(Scene scene, const RunConfig& cfg);
};

// Structural choices captured at a reference parameter point so that
// finite-difference probes see a smooth function: sampled interaction pairs,
// their stop-gradient targets, and the 2D proposals.
struct FrozenStructure {
  std::vector<BoxPair> pairs;
  std::optional<ScfiTargets> targets;
  std::vector<Box2D> proposals;
};

struct ForwardResult {
  LossBreakdown losses;
  std::vector<DetectionBox3D> detections;
  std::optional<AlignmentMap> align;
  int64_t voxel_count = 0;
};

// The full fusion detector. Components are constructed only when the config
// enables them, so a disabled component contributes no parameters at all.
struct Model {
  RunConfig cfg;
  VoxelEmbedParams embed;
  BevBackboneParams bev;
  Head3dParams head3d;
  CafaParams fusion_params;       // fusion != none
  ImageBackboneParams backbone;   // image branch present
  ReduceDimParams reduce;         // fusion strategies that read the reduced map
  Head2dParams head2d;            // joint_2d
  ScfiHeads scfi_heads;           // scfi != off
  bool has_fusion = false;
  bool has_image = false;
  bool has_reduce = false;
  bool has_head2d = false;
  bool has_scfi = false;

  static Model init(const RunConfig& cfg);

  std::vector<NamedParam> point_side_params();
  std::vector<NamedParam> image_side_params();
  std::vector<NamedParam> all_params();

  // One scene forward. decode_detections controls whether the 3D decode runs
  // (it always runs when SCFI needs prediction boxes). step_rng drives pair
  // sampling and dropout; frozen replaces every sampled structure.
  ForwardResult forward(const SceneInputs& in, bool decode_detections, Rng& step_rng,
                        const FrozenStructure* frozen = nullptr,
                        FrozenStructure* capture = nullptr) const;

  void save_checkpoint(const std::string& dir) const;
  static Model load_checkpoint(const std::string& dir);
};

}  // namespace vf
