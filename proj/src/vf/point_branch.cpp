#include "vf/point_branch.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace vf {

std::array<int64_t, 3> VoxelGridSpec::extents() const {
  std::array<int64_t, 3> e;
  for (int a = 0; a < 3; ++a) {
    e[static_cast<size_t>(a)] = static_cast<int64_t>(
        std::ceil((max[static_cast<size_t>(a)] - min[static_cast<size_t>(a)]) /
                  voxel_size[static_cast<size_t>(a)] - 1e-9));
  }
  return e;
}

void VoxelGridSpec::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (!(max[static_cast<size_t>(a)] > min[static_cast<size_t>(a)])) {
      fail(ErrorCode::invalid_argument, "voxel grid: max must exceed min on every axis");
    }
    if (!(voxel_size[static_cast<size_t>(a)] > 0)) {
      fail(ErrorCode::invalid_argument, "voxel grid: voxel size must be positive");
    }
  }
  auto e = extents();
  if (e[0] < 1 || e[1] < 1 || e[2] < 1) {
    fail(ErrorCode::invalid_argument, "voxel grid: implied extents must be >= 1");
  }
}

std::array<double, 3> VoxelGridSpec::voxel_center(int64_t ix, int64_t iy, int64_t iz) const {
  return {min[0] + (static_cast<double>(ix) + 0.5) * voxel_size[0],
          min[1] + (static_cast<double>(iy) + 0.5) * voxel_size[1],
          min[2] + (static_cast<double>(iz) + 0.5) * voxel_size[2]};
}

std::vector<std::array<int64_t, 2>> VoxelSet::bev_cells() const {
  std::vector<std::array<int64_t, 2>> cells(coords.size());
  for (size_t j = 0; j < coords.size(); ++j) cells[j] = {coords[j][0], coords[j][1]};
  return cells;
}

VoxelSet voxelize(std::span<const float> points, const VoxelGridSpec& spec) {
  spec.validate();
  if (points.size() % 4 != 0) {
    fail(ErrorCode::shape, "voxelize: point buffer size must be a multiple of 4");
  }
  auto ext = spec.extents();
  struct Acc {
    double sx = 0, sy = 0, sz = 0, si = 0;
    int64_t n = 0;
  };
  std::unordered_map<int64_t, Acc> cells;
  std::vector<int64_t> order;  // first-seen voxel order, deterministic
  int64_t n_points = static_cast<int64_t>(points.size()) / 4;
  for (int64_t p = 0; p < n_points; ++p) {
    double x = points[static_cast<size_t>(4 * p)];
    double y = points[static_cast<size_t>(4 * p + 1)];
    double z = points[static_cast<size_t>(4 * p + 2)];
    double inten = points[static_cast<size_t>(4 * p + 3)];
    double c[3] = {x, y, z};
    int64_t idx[3];
    bool ok = true;
    for (int a = 0; a < 3; ++a) {
      if (c[a] < spec.min[static_cast<size_t>(a)] || c[a] > spec.max[static_cast<size_t>(a)]) {
        ok = false;
        break;
      }
      int64_t i = static_cast<int64_t>(
          std::floor((c[a] - spec.min[static_cast<size_t>(a)]) / spec.voxel_size[static_cast<size_t>(a)]));
      // points on the max boundary belong to the last voxel
      if (i >= ext[static_cast<size_t>(a)]) i = ext[static_cast<size_t>(a)] - 1;
      idx[a] = i;
    }
    if (!ok) continue;
    int64_t key = (idx[0] * ext[1] + idx[1]) * ext[2] + idx[2];
    auto [it, inserted] = cells.try_emplace(key);
    if (inserted) order.push_back(key);
    it->second.sx += x;
    it->second.sy += y;
    it->second.sz += z;
    it->second.si += inten;
    it->second.n += 1;
  }

  VoxelSet vs;
  int64_t J = static_cast<int64_t>(order.size());
  std::vector<double> stats(static_cast<size_t>(J) * 8, 0.0);
  vs.coords.reserve(static_cast<size_t>(J));
  for (int64_t j = 0; j < J; ++j) {
    int64_t key = order[static_cast<size_t>(j)];
    int64_t iz = key % ext[2];
    int64_t iy = (key / ext[2]) % ext[1];
    int64_t ix = key / (ext[1] * ext[2]);
    vs.coords.push_back({ix, iy, iz});
    const Acc& a = cells.at(key);
    auto center = spec.voxel_center(ix, iy, iz);
    double inv = 1.0 / static_cast<double>(a.n);
    double* row = stats.data() + j * 8;
    row[0] = a.sx * inv - center[0];
    row[1] = a.sy * inv - center[1];
    row[2] = a.sz * inv - center[2];
    row[3] = a.si * inv;
    row[4] = static_cast<double>(a.n);
    row[5] = center[0];
    row[6] = center[1];
    row[7] = center[2];
  }
  if (J > 0) {
    vs.raw_stats = Tensor::from_data({J, 8}, std::move(stats), false);
  }
  return vs;
}

VoxelEmbedParams VoxelEmbedParams::init(int64_t d, Rng& rng) {
  VoxelEmbedParams p;
  p.w1 = Tensor::glorot({8, d}, 8, d, rng);
  p.b1 = Tensor::zeros({d}, true);
  p.w2 = Tensor::glorot({d, d}, d, d, rng);
  p.b2 = Tensor::zeros({d}, true);
  return p;
}

Tensor embed_voxels(const VoxelSet& vs, const VoxelEmbedParams& params) {
  if (vs.size() == 0) fail(ErrorCode::invalid_argument, "embed_voxels: empty voxel set");
  if (!vs.raw_stats.defined()) fail(ErrorCode::state, "embed_voxels: raw_stats missing");
  Tensor h = relu(add_row_bias(matmul(vs.raw_stats, params.w1), params.b1));
  return add_row_bias(matmul(h, params.w2), params.b2);
}

BevBackboneParams BevBackboneParams::init(int64_t d_in, int64_t c_bev, Rng& rng) {
  BevBackboneParams p;
  p.w1 = Tensor::glorot({c_bev, d_in, 3, 3}, d_in * 9, c_bev * 9, rng);
  p.b1 = Tensor::zeros({c_bev}, true);
  p.w2 = Tensor::glorot({c_bev, c_bev, 3, 3}, c_bev * 9, c_bev * 9, rng);
  p.b2 = Tensor::zeros({c_bev}, true);
  return p;
}

Tensor bev_scatter(const VoxelSet& vs, const Tensor& feats, const VoxelGridSpec& spec) {
  auto ext = spec.extents();
  return scatter_max_bev(feats, vs.bev_cells(), ext[0], ext[1]);
}

Tensor bev_backbone(const VoxelSet& vs, const Tensor& feats, const VoxelGridSpec& spec,
                    const BevBackboneParams& params) {
  Tensor grid = bev_scatter(vs, feats, spec);
  Tensor h = relu(add_channel_bias(conv2d(grid, params.w1, 1, 1), params.b1));
  return relu(add_channel_bias(conv2d(h, params.w2, 1, 1), params.b2));
}

}  // namespace vf
