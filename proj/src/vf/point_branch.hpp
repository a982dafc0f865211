#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "vf/rng.hpp"
#include "vf/tensor.hpp"

namespace vf {

struct VoxelGridSpec {
  std::array<double, 3> min{0, -16, -2.5};
  std::array<double, 3> max{40, 16, 1.5};
  std::array<double, 3> voxel_size{0.8, 0.8, 1.0};

  std::array<int64_t, 3> extents() const;
  void validate() const;
  // center of voxel (ix, iy, iz) in meters
  std::array<double, 3> voxel_center(int64_t ix, int64_t iy, int64_t iz) const;
};

// The non-empty voxels of one scene. raw_stats rows hold
// (mean offset xyz, mean intensity, point count, voxel center xyz).
struct VoxelSet {
  std::vector<std::array<int64_t, 3>> coords;  // unique, in-grid
  Tensor raw_stats;                            // J x 8, constant
  Tensor feats;                                // J x d after embed_voxels

  int64_t size() const { return static_cast<int64_t>(coords.size()); }
  std::vector<std::array<int64_t, 2>> bev_cells() const;
};

// Groups points (N x 4 float rows) into non-empty voxels; out-of-range points
// are dropped, points exactly on a max boundary land in the last voxel.
VoxelSet voxelize(std::span<const float> points, const VoxelGridSpec& spec);

// Per-voxel 2-layer perceptron over raw_stats: 8 -> d -> d with relu between.
struct VoxelEmbedParams {
  Tensor w1, b1, w2, b2;

  static VoxelEmbedParams init(int64_t d, Rng& rng);
};
Tensor embed_voxels(const VoxelSet& vs, const VoxelEmbedParams& params);

// Scatter voxel feats to the (x, y) BEV grid with z max-pool, then two
// stride-1 3x3 conv + relu stages.
struct BevBackboneParams {
  Tensor w1, b1, w2, b2;

  static BevBackboneParams init(int64_t d_in, int64_t c_bev, Rng& rng);
};
Tensor bev_backbone(const VoxelSet& vs, const Tensor& feats, const VoxelGridSpec& spec,
                    const BevBackboneParams& params);

// The BEV scatter alone (pre-convolution), exposed for tests.
Tensor bev_scatter(const VoxelSet& vs, const Tensor& feats, const VoxelGridSpec& spec);

}  // namespace vf
