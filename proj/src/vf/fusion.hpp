#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "vf/geometry.hpp"
#include "vf/image_branch.hpp"
#include "vf/point_branch.hpp"
#include "vf/tensor.hpp"

namespace vf {

// Row-stochastic J x (h*w) attention weights: how much each voxel attends to
// each image position.
struct AlignmentMap {
  Tensor weights;
  int64_t fmap_h = 0;
  int64_t fmap_w = 0;
};

struct CafaParams {
  Tensor w_q, w_k, w_v;  // d x d_k, d x d_k, d x d_v
  Tensor ffn_w, ffn_b;   // one FC layer d_v -> d
  Tensor mix_w, mix_b;   // concat projection 2d -> d
  int heads = 1;
  bool layer_norm = false;
  double dropout_p = 0.0;

  static CafaParams init(int64_t d, int64_t d_k, int64_t d_v, int heads, Rng& rng);
  // Only the mix projection (the parameter set of the point-projection strategy).
  static CafaParams init_mix_only(int64_t d, Rng& rng);
  std::vector<Tensor*> parameters();
};

struct FusionResult {
  Tensor fused;  // J x d
  std::optional<AlignmentMap> align;
};

// Single-head cross-attention: queries from voxel features, keys/values from
// the flattened image map; attended values pass one FC layer, then the result
// is concatenated with the original voxel feature and projected back to d.
FusionResult cafa_forward(const Tensor& voxel_feats, const Tensor& image_flat,
                          const CafaParams& params, int64_t fmap_h, int64_t fmap_w,
                          Rng* dropout_rng = nullptr);

// Standard channel-split multi-head variant; the reported align map is the
// mean over heads. heads == 1 reproduces cafa_forward bit for bit.
FusionResult multihead_cafa_forward(const Tensor& voxel_feats, const Tensor& image_flat,
                                    const CafaParams& params, int64_t fmap_h, int64_t fmap_w,
                                    Rng* dropout_rng = nullptr);

// Non-local mean: raw dot-product weights, no softmax, scaled by 1/(h*w).
Tensor nonlocal_fusion(const Tensor& voxel_feats, const Tensor& image_flat,
                       const CafaParams& params);

// Deterministic baseline: project each voxel center into the image, bilinear
// sample the reduced map at (u/stride, v/stride); out-of-view voxels get a
// zero image feature. Same concat-mix as cafa_forward.
Tensor point_projection_fusion(const Tensor& voxel_feats, const FeatureMap& image_map,
                               const CameraProjection& proj, const VoxelSet& vs,
                               const VoxelGridSpec& spec, const CafaParams& params);

// One alignment row rendered as a binary 16-bit PGM, linearly rescaled so the
// largest weight maps to 65535.
std::vector<uint8_t> alignment_row_pgm(std::span<const double> row, int64_t fmap_h,
                                       int64_t fmap_w);

// Fraction of the row's attention mass inside a 2D box, counting partial
// feature cells by overlap area. box is in image pixels; cells have extent
// `stride` pixels.
double attention_mass_in_box(std::span<const double> row, int64_t fmap_h, int64_t fmap_w,
                             int stride, const Box2D& box);

}  // namespace vf
