#include "vf/fusion.hpp"

#include <algorithm>
#include <cmath>

namespace vf {

CafaParams CafaParams::init(int64_t d, int64_t d_k, int64_t d_v, int heads, Rng& rng) {
  CafaParams p;
  p.w_q = Tensor::glorot({d, d_k}, d, d_k, rng);
  p.w_k = Tensor::glorot({d, d_k}, d, d_k, rng);
  p.w_v = Tensor::glorot({d, d_v}, d, d_v, rng);
  p.ffn_w = Tensor::glorot({d_v, d}, d_v, d, rng);
  p.ffn_b = Tensor::zeros({d}, true);
  p.mix_w = Tensor::glorot({2 * d, d}, 2 * d, d, rng);
  p.mix_b = Tensor::zeros({d}, true);
  p.heads = heads;
  return p;
}

CafaParams CafaParams::init_mix_only(int64_t d, Rng& rng) {
  CafaParams p;
  p.mix_w = Tensor::glorot({2 * d, d}, 2 * d, d, rng);
  p.mix_b = Tensor::zeros({d}, true);
  return p;
}

std::vector<Tensor*> CafaParams::parameters() {
  std::vector<Tensor*> out;
  for (Tensor* t : {&w_q, &w_k, &w_v, &ffn_w, &ffn_b, &mix_w, &mix_b}) {
    if (t->defined()) out.push_back(t);
  }
  return out;
}

namespace {

void check_fusion_inputs(const Tensor& voxel_feats, const Tensor& image_flat,
                         const CafaParams& params) {
  if (voxel_feats.rank() != 2 || image_flat.rank() != 2) {
    fail(ErrorCode::shape, "fusion: need voxel [J x d] and image [hw x d] matrices");
  }
  if (voxel_feats.dim(1) != image_flat.dim(1) || voxel_feats.dim(1) != params.w_q.dim(0)) {
    fail(ErrorCode::shape, "fusion: feature width mismatch, voxels " +
                               shape_str(voxel_feats.shape()) + " vs image " +
                               shape_str(image_flat.shape()));
  }
}

// Concatenate the attended features with the original voxel features and
// project back to d.
Tensor concat_mix(const Tensor& voxel_feats, const Tensor& attended, const CafaParams& params) {
  std::vector<Tensor> parts{voxel_feats, attended};
  return add_row_bias(matmul(concat(parts, 1), params.mix_w), params.mix_b);
}

}  // namespace

FusionResult cafa_forward(const Tensor& voxel_feats, const Tensor& image_flat,
                          const CafaParams& params, int64_t fmap_h, int64_t fmap_w,
                          Rng* dropout_rng) {
  check_fusion_inputs(voxel_feats, image_flat, params);
  int64_t d_k = params.w_q.dim(1);
  Tensor q = matmul(voxel_feats, params.w_q);
  Tensor k = matmul(image_flat, params.w_k);
  Tensor v = matmul(image_flat, params.w_v);
  Tensor logits = scale(matmul(q, transpose2d(k)), 1.0 / std::sqrt(static_cast<double>(d_k)));
  Tensor align = softmax(logits);
  Tensor weights = align;
  if (params.dropout_p > 0.0 && dropout_rng != nullptr) {
    weights = dropout(weights, params.dropout_p, *dropout_rng);
  }
  Tensor attended = matmul(weights, v);
  Tensor f_att = add_row_bias(matmul(attended, params.ffn_w), params.ffn_b);
  if (params.layer_norm) f_att = layer_norm_rows(f_att);
  FusionResult out;
  out.fused = concat_mix(voxel_feats, f_att, params);
  out.align = AlignmentMap{align, fmap_h, fmap_w};
  return out;
}

FusionResult multihead_cafa_forward(const Tensor& voxel_feats, const Tensor& image_flat,
                                    const CafaParams& params, int64_t fmap_h, int64_t fmap_w,
                                    Rng* dropout_rng) {
  check_fusion_inputs(voxel_feats, image_flat, params);
  int heads = params.heads;
  int64_t d_k = params.w_q.dim(1);
  int64_t d_v = params.w_v.dim(1);
  if (heads < 1 || d_k % heads != 0 || d_v % heads != 0) {
    fail(ErrorCode::invalid_argument,
         "multihead: head count " + std::to_string(heads) + " must divide d_k " +
             std::to_string(d_k) + " and d_v " + std::to_string(d_v));
  }
  int64_t hk = d_k / heads;
  int64_t hv = d_v / heads;
  std::vector<Tensor> head_outs;
  Tensor align_sum;
  for (int h = 0; h < heads; ++h) {
    Tensor q = matmul(voxel_feats, slice(params.w_q, 1, h * hk, (h + 1) * hk));
    Tensor k = matmul(image_flat, slice(params.w_k, 1, h * hk, (h + 1) * hk));
    Tensor v = matmul(image_flat, slice(params.w_v, 1, h * hv, (h + 1) * hv));
    Tensor logits = scale(matmul(q, transpose2d(k)), 1.0 / std::sqrt(static_cast<double>(hk)));
    Tensor align = softmax(logits);
    align_sum = h == 0 ? align : add(align_sum, align);
    Tensor weights = align;
    if (params.dropout_p > 0.0 && dropout_rng != nullptr) {
      weights = dropout(weights, params.dropout_p, *dropout_rng);
    }
    head_outs.push_back(matmul(weights, v));
  }
  Tensor attended = heads == 1 ? head_outs[0] : concat(head_outs, 1);
  Tensor f_att = add_row_bias(matmul(attended, params.ffn_w), params.ffn_b);
  if (params.layer_norm) f_att = layer_norm_rows(f_att);
  FusionResult out;
  out.fused = concat_mix(voxel_feats, f_att, params);
  out.align = AlignmentMap{scale(align_sum, 1.0 / heads), fmap_h, fmap_w};
  return out;
}

Tensor nonlocal_fusion(const Tensor& voxel_feats, const Tensor& image_flat,
                       const CafaParams& params) {
  check_fusion_inputs(voxel_feats, image_flat, params);
  int64_t hw = image_flat.dim(0);
  Tensor q = matmul(voxel_feats, params.w_q);
  Tensor k = matmul(image_flat, params.w_k);
  Tensor v = matmul(image_flat, params.w_v);
  Tensor weights = matmul(q, transpose2d(k));  // no scaling, no softmax
  Tensor attended = scale(matmul(weights, v), 1.0 / static_cast<double>(hw));
  Tensor f_att = add_row_bias(matmul(attended, params.ffn_w), params.ffn_b);
  return concat_mix(voxel_feats, f_att, params);
}

Tensor point_projection_fusion(const Tensor& voxel_feats, const FeatureMap& image_map,
                               const CameraProjection& proj, const VoxelSet& vs,
                               const VoxelGridSpec& spec, const CafaParams& params) {
  if (voxel_feats.dim(0) != vs.size()) {
    fail(ErrorCode::shape, "point_projection_fusion: feature rows != voxel count");
  }
  int64_t d = voxel_feats.dim(1);
  if (image_map.channels() != d) {
    fail(ErrorCode::shape, "point_projection_fusion: image map channels " +
                               std::to_string(image_map.channels()) + " != voxel feature width " +
                               std::to_string(d));
  }
  double img_w = static_cast<double>(image_map.width() * image_map.stride);
  double img_h = static_cast<double>(image_map.height() * image_map.stride);
  std::vector<Tensor> rows;
  rows.reserve(static_cast<size_t>(vs.size()));
  for (int64_t j = 0; j < vs.size(); ++j) {
    auto center = spec.voxel_center(vs.coords[static_cast<size_t>(j)][0],
                                    vs.coords[static_cast<size_t>(j)][1],
                                    vs.coords[static_cast<size_t>(j)][2]);
    bool in_view = true;
    PixelPoint p;
    try {
      p = project_point(proj, center[0], center[1], center[2]);
    } catch (const Error&) {
      in_view = false;
    }
    if (in_view && (p.u < 0 || p.u > img_w || p.v < 0 || p.v > img_h)) in_view = false;
    if (in_view) {
      Tensor s = bilinear_sample(image_map.feats, p.u / image_map.stride, p.v / image_map.stride);
      rows.push_back(reshape(s, {1, d}));
    } else {
      rows.push_back(Tensor::zeros({1, d}));
    }
  }
  Tensor sampled = rows.size() == 1 ? rows[0] : concat(rows, 0);
  return concat_mix(voxel_feats, sampled, params);
}

std::vector<uint8_t> alignment_row_pgm(std::span<const double> row, int64_t fmap_h,
                                       int64_t fmap_w) {
  if (static_cast<int64_t>(row.size()) != fmap_h * fmap_w) {
    fail(ErrorCode::shape, "alignment_row_pgm: row length != h*w");
  }
  double mx = 0.0;
  for (double v : row) mx = std::max(mx, v);
  std::vector<uint16_t> samples(row.size(), 0);
  if (mx > 0.0) {
    for (size_t i = 0; i < row.size(); ++i) {
      samples[i] = static_cast<uint16_t>(std::lround(std::clamp(row[i] / mx, 0.0, 1.0) * 65535.0));
    }
  }
  return encode_pgm16(static_cast<int>(fmap_w), static_cast<int>(fmap_h), samples);
}

double attention_mass_in_box(std::span<const double> row, int64_t fmap_h, int64_t fmap_w,
                             int stride, const Box2D& box) {
  if (static_cast<int64_t>(row.size()) != fmap_h * fmap_w) {
    fail(ErrorCode::shape, "attention_mass_in_box: row length != h*w");
  }
  double mass = 0.0;
  double cell = static_cast<double>(stride);
  for (int64_t y = 0; y < fmap_h; ++y) {
    double cv0 = y * cell, cv1 = (y + 1) * cell;
    double oy = std::min(cv1, box.v_max) - std::max(cv0, box.v_min);
    if (oy <= 0) continue;
    for (int64_t x = 0; x < fmap_w; ++x) {
      double cu0 = x * cell, cu1 = (x + 1) * cell;
      double ox = std::min(cu1, box.u_max) - std::max(cu0, box.u_min);
      if (ox <= 0) continue;
      mass += row[static_cast<size_t>(y * fmap_w + x)] * (ox * oy) / (cell * cell);
    }
  }
  return mass;
}

}  // namespace vf
