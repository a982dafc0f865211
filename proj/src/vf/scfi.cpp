#include "vf/scfi.hpp"

#include <algorithm>
#include <cmath>

namespace vf {

RoiFeature roi_align_2d(const FeatureMap& f, const Box2D& b, int out) {
  if (out < 1) fail(ErrorCode::invalid_argument, "roi_align_2d: out must be >= 1");
  double s = static_cast<double>(f.stride);
  double u0 = b.u_min / s, u1 = b.u_max / s;
  double v0 = b.v_min / s, v1 = b.v_max / s;
  if (!(u1 > u0) || !(v1 > v0)) {
    fail(ErrorCode::degenerate_box, "roi_align_2d: box has zero area after stride division");
  }
  double du = (u1 - u0) / out, dv = (v1 - v0) / out;
  int64_t c = f.channels();
  std::vector<Tensor> rows;
  rows.reserve(static_cast<size_t>(out) * out);
  for (int i = 0; i < out; ++i) {
    for (int j = 0; j < out; ++j) {
      double u = u0 + (j + 0.5) * du;
      double v = v0 + (i + 0.5) * dv;
      rows.push_back(reshape(bilinear_sample(f.feats, u, v), {1, c}));
    }
  }
  Tensor stacked = concat(rows, 0);  // [out*out x c]
  RoiFeature r;
  r.grid = reshape(stacked, {out, out, c});
  r.flat = reshape(stacked, {1, static_cast<int64_t>(out) * out * c});
  return r;
}

RoiFeature roi_pool_3d(const VoxelSet& vs, const Tensor& feats, const VoxelGridSpec& spec,
                       const Box3D& b, int out) {
  if (b.yaw != 0.0) {
    fail(ErrorCode::unsupported_rotation, "roi_pool_3d: rotated boxes unsupported");
  }
  if (out < 1) fail(ErrorCode::invalid_argument, "roi_pool_3d: out must be >= 1");
  if (feats.rank() != 2 || feats.dim(0) != vs.size()) {
    fail(ErrorCode::shape, "roi_pool_3d: feature rows != voxel count");
  }
  int64_t d = feats.dim(1);
  int64_t cells = static_cast<int64_t>(out) * out * out;
  std::vector<std::vector<int64_t>> groups(static_cast<size_t>(cells));
  double x0 = b.x - 0.5 * b.l, y0 = b.y - 0.5 * b.w, z0 = b.z - 0.5 * b.h;
  for (int64_t j = 0; j < vs.size(); ++j) {
    auto c = spec.voxel_center(vs.coords[static_cast<size_t>(j)][0],
                               vs.coords[static_cast<size_t>(j)][1],
                               vs.coords[static_cast<size_t>(j)][2]);
    double fx = (c[0] - x0) / b.l, fy = (c[1] - y0) / b.w, fz = (c[2] - z0) / b.h;
    if (fx < 0 || fx > 1 || fy < 0 || fy > 1 || fz < 0 || fz > 1) continue;
    int64_t ix = std::min<int64_t>(static_cast<int64_t>(fx * out), out - 1);
    int64_t iy = std::min<int64_t>(static_cast<int64_t>(fy * out), out - 1);
    int64_t iz = std::min<int64_t>(static_cast<int64_t>(fz * out), out - 1);
    groups[static_cast<size_t>((ix * out + iy) * out + iz)].push_back(j);
  }
  Tensor pooled = group_rows_max(feats, groups, cells);  // [cells x d]
  RoiFeature r;
  r.grid = reshape(pooled, {out, out, out, d});
  r.flat = reshape(pooled, {1, cells * d});
  return r;
}

double ncs_distance(std::span<const double> p, std::span<const double> q) {
  constexpr double kEps = 1e-12;
  if (p.size() != q.size()) fail(ErrorCode::shape, "ncs_distance: length mismatch");
  double pp = 0, qq = 0, pq = 0;
  for (size_t i = 0; i < p.size(); ++i) {
    pp += p[i] * p[i];
    qq += q[i] * q[i];
    pq += p[i] * q[i];
  }
  double np = std::max(std::sqrt(pp), kEps);
  double nq = std::max(std::sqrt(qq), kEps);
  return -pq / (np * nq);
}

MlpHead MlpHead::init(int64_t in, int64_t hidden, int64_t out, Rng& rng) {
  MlpHead h;
  h.w1 = Tensor::glorot({in, hidden}, in, hidden, rng);
  h.b1 = Tensor::zeros({hidden}, true);
  h.w2 = Tensor::glorot({hidden, out}, hidden, out, rng);
  h.b2 = Tensor::zeros({out}, true);
  return h;
}

Tensor MlpHead::forward(const Tensor& x) const {
  Tensor h = relu(add_row_bias(matmul(x, w1), b1));
  return add_row_bias(matmul(h, w2), b2);
}

std::vector<Tensor*> MlpHead::parameters() { return {&w1, &b1, &w2, &b2}; }

ScfiHeads ScfiHeads::init(int64_t in3d, int64_t in2d, int64_t hidden, int64_t out, Rng& rng) {
  ScfiHeads h;
  h.proj3d = MlpHead::init(in3d, hidden, out, rng);
  h.pred3d = MlpHead::init(out, hidden, out, rng);
  h.proj2d = MlpHead::init(in2d, hidden, out, rng);
  h.pred2d = MlpHead::init(out, hidden, out, rng);
  return h;
}

std::vector<Tensor*> ScfiHeads::point_parameters() {
  std::vector<Tensor*> out;
  for (auto* h : {&proj3d, &pred3d}) {
    for (Tensor* t : h->parameters()) out.push_back(t);
  }
  return out;
}

std::vector<Tensor*> ScfiHeads::image_parameters() {
  std::vector<Tensor*> out;
  for (auto* h : {&proj2d, &pred2d}) {
    for (Tensor* t : h->parameters()) out.push_back(t);
  }
  return out;
}

namespace {

// Row-wise cosine similarity matrix between two stacks of vectors.
Tensor cosine_matrix(const Tensor& a, const Tensor& b) {
  return matmul(l2_normalize(a, 1), transpose2d(l2_normalize(b, 1)));
}

// [n x n] -> [n x 1] column holding the diagonal.
Tensor diag_column(const Tensor& m) {
  int64_t n = m.dim(0);
  std::vector<double> eye(static_cast<size_t>(n * n), 0.0);
  for (int64_t i = 0; i < n; ++i) eye[static_cast<size_t>(i * n + i)] = 1.0;
  Tensor mask = Tensor::from_data({n, n}, std::move(eye));
  return matmul(mul(m, mask), Tensor::full({n, 1}, 1.0));
}

Tensor mean_diag_similarity(const Tensor& sim) { return mean(diag_column(sim)); }

// Binary logistic loss on cosine logits: diagonal entries are positives,
// off-diagonal entries negatives; each group averaged separately.
Tensor nce_direction(const Tensor& sim) {
  int64_t n = sim.dim(0);
  std::vector<double> eye(static_cast<size_t>(n * n), 0.0);
  for (int64_t i = 0; i < n; ++i) eye[static_cast<size_t>(i * n + i)] = 1.0;
  Tensor targets = Tensor::from_data({n, n}, eye);
  Tensor losses = bce_with_logits(sim, targets);
  Tensor mask = Tensor::from_data({n, n}, std::move(eye));
  Tensor pos = scale(sum(mul(losses, mask)), 1.0 / static_cast<double>(n));
  if (n == 1) return pos;
  std::vector<double> inv(static_cast<size_t>(n * n), 1.0);
  for (int64_t i = 0; i < n; ++i) inv[static_cast<size_t>(i * n + i)] = 0.0;
  Tensor neg_mask = Tensor::from_data({n, n}, std::move(inv));
  Tensor neg = scale(sum(mul(losses, neg_mask)), 1.0 / static_cast<double>(n * n - n));
  return add(pos, neg);
}

Tensor infonce_direction(const Tensor& sim, double tau) {
  int64_t n = sim.dim(0);
  std::vector<int64_t> targets(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) targets[static_cast<size_t>(i)] = i;
  return mean(cross_entropy_rows(scale(sim, 1.0 / tau), targets));
}

}  // namespace

ScfiTargets scfi_targets(std::span<const std::pair<Tensor, Tensor>> pairs,
                         const ScfiHeads& heads) {
  if (pairs.empty()) fail(ErrorCode::empty_batch, "scfi_targets: no pairs");
  std::vector<Tensor> r3_rows, r2_rows;
  for (const auto& [r3, r2] : pairs) {
    r3_rows.push_back(r3);
    r2_rows.push_back(r2);
  }
  Tensor r3 = r3_rows.size() == 1 ? r3_rows[0] : concat(r3_rows, 0);
  Tensor r2 = r2_rows.size() == 1 ? r2_rows[0] : concat(r2_rows, 0);
  return ScfiTargets{stopgrad(heads.proj3d.forward(r3)), stopgrad(heads.proj2d.forward(r2))};
}

Tensor scfi_loss(std::span<const std::pair<Tensor, Tensor>> pairs, const ScfiHeads& heads,
                 ScfiVariant variant, const ScfiTargets* frozen) {
  if (pairs.empty()) fail(ErrorCode::empty_batch, "scfi_loss: no pairs");
  std::vector<Tensor> r3_rows, r2_rows;
  for (const auto& [r3, r2] : pairs) {
    r3_rows.push_back(r3);
    r2_rows.push_back(r2);
  }
  Tensor r3 = r3_rows.size() == 1 ? r3_rows[0] : concat(r3_rows, 0);
  Tensor r2 = r2_rows.size() == 1 ? r2_rows[0] : concat(r2_rows, 0);

  Tensor q1 = heads.proj3d.forward(r3);   // h(R3D)
  Tensor q2 = heads.proj2d.forward(r2);   // h(R2D)
  Tensor p1 = heads.pred3d.forward(q1);   // f(h(R3D))
  Tensor p2 = heads.pred2d.forward(q2);   // f(h(R2D))
  bool stop = variant != ScfiVariant::symmetric;
  Tensor t2 = stop ? (frozen ? frozen->q2 : stopgrad(q2)) : q2;
  Tensor t1 = stop ? (frozen ? frozen->q1 : stopgrad(q1)) : q1;

  constexpr double kTau = 0.1;
  switch (variant) {
    case ScfiVariant::ncs_pos:
    case ScfiVariant::symmetric: {
      Tensor d1 = mean_diag_similarity(cosine_matrix(p1, t2));
      Tensor d2 = mean_diag_similarity(cosine_matrix(p2, t1));
      return scale(add(d1, d2), -0.5);
    }
    case ScfiVariant::nce: {
      Tensor l1 = nce_direction(cosine_matrix(p1, t2));
      Tensor l2 = nce_direction(cosine_matrix(p2, t1));
      return scale(add(l1, l2), 0.5);
    }
    case ScfiVariant::infonce: {
      Tensor l1 = infonce_direction(cosine_matrix(p1, t2), kTau);
      Tensor l2 = infonce_direction(cosine_matrix(p2, t1), kTau);
      return scale(add(l1, l2), 0.5);
    }
    case ScfiVariant::ce_pos: {
      Tensor d1 = scale(diag_column(cosine_matrix(p1, t2)), 1.0 / kTau);
      Tensor d2 = scale(diag_column(cosine_matrix(p2, t1)), 1.0 / kTau);
      int64_t n = d1.dim(0);
      Tensor ones = Tensor::full({n, 1}, 1.0);
      Tensor l1 = mean(bce_with_logits(d1, ones));
      Tensor l2 = mean(bce_with_logits(d2, ones));
      return scale(add(l1, l2), 0.5);
    }
  }
  fail(ErrorCode::invalid_argument, "scfi_loss: unknown variant");
}

std::vector<BoxPair> sample_pairs(std::span<const Box3D> pred_boxes,
                                  std::span<const double> pred_scores,
                                  std::span<const Box3D> gt_boxes,
                                  const CameraProjection& proj, int image_w, int image_h,
                                  int n, Rng& rng, double score_thresh) {
  if (n < 1) fail(ErrorCode::invalid_argument, "sample_pairs: n must be >= 1");
  if (pred_boxes.size() != pred_scores.size()) {
    fail(ErrorCode::shape, "sample_pairs: scores do not match boxes");
  }
  std::vector<Box3D> candidates;
  for (size_t i = 0; i < pred_boxes.size(); ++i) {
    if (pred_scores[i] >= score_thresh) candidates.push_back(pred_boxes[i]);
  }
  if (static_cast<int>(candidates.size()) < n) {
    candidates.insert(candidates.end(), gt_boxes.begin(), gt_boxes.end());
  }
  // partial Fisher-Yates draw of n without replacement
  std::vector<size_t> idx(candidates.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  size_t take = std::min<size_t>(static_cast<size_t>(n), idx.size());
  for (size_t i = 0; i < take; ++i) {
    size_t j = i + static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(idx.size() - i - 1)));
    std::swap(idx[i], idx[j]);
  }
  std::vector<BoxPair> out;
  for (size_t i = 0; i < take; ++i) {
    const Box3D& b = candidates[idx[i]];
    try {
      Box2D b2 = project_box3d(proj, b, image_w, image_h);
      out.push_back(BoxPair{b, b2});
    } catch (const Error& e) {
      if (e.code() != ErrorCode::behind_camera && e.code() != ErrorCode::degenerate_box) throw;
    }
  }
  return out;
}

}  // namespace vf
