#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "vf/scfi.hpp"

using namespace vf;

namespace {

Tensor random_matrix(int64_t r, int64_t c, Rng& rng, bool requires_grad = false) {
  std::vector<double> d(static_cast<size_t>(r * c));
  for (double& v : d) v = rng.uniform(-1.0, 1.0);
  return Tensor::from_data({r, c}, std::move(d), requires_grad);
}

// h(x) = x and f(x) = x for non-negative inputs: identity weights, zero biases.
MlpHead identity_head(int64_t n) {
  MlpHead h;
  std::vector<double> eye(static_cast<size_t>(n * n), 0.0);
  for (int64_t i = 0; i < n; ++i) eye[static_cast<size_t>(i * n + i)] = 1.0;
  h.w1 = Tensor::from_data({n, n}, eye, true);
  h.b1 = Tensor::zeros({n}, true);
  h.w2 = Tensor::from_data({n, n}, eye, true);
  h.b2 = Tensor::zeros({n}, true);
  return h;
}

ScfiHeads identity_heads(int64_t n) {
  ScfiHeads h;
  h.proj3d = identity_head(n);
  h.pred3d = identity_head(n);
  h.proj2d = identity_head(n);
  h.pred2d = identity_head(n);
  return h;
}

}  // namespace

TEST_CASE("roi_align_2d on a constant map pools that constant everywhere") {
  FeatureMap f{Tensor::full({3, 6, 8}, 2.5), 4};
  Box2D b{3.0, 2.0, 25.0, 19.0, 0};
  auto r = roi_align_2d(f, b, 4);
  REQUIRE(r.grid.shape() == Shape{4, 4, 3});
  for (double v : r.grid.data()) CHECK(v == 2.5);
  REQUIRE(r.flat.shape() == Shape{1, 48});
}

TEST_CASE("roi_align_2d over a lattice-aligned box reproduces the pixels") {
  Rng rng(1);
  std::vector<double> d(static_cast<size_t>(2 * 6 * 6));
  for (double& v : d) v = rng.uniform(-1, 1);
  FeatureMap f{Tensor::from_data({2, 6, 6}, d), 1};
  // stride 1, box [0.5, 4.5]^2: cell centers land exactly on pixels (1..4, 1..4)
  Box2D b{0.5, 0.5, 4.5, 4.5, 0};
  auto r = roi_align_2d(f, b, 4);
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      for (int64_t c = 0; c < 2; ++c) {
        CHECK(r.grid.data()[static_cast<size_t>((i * 4 + j) * 2 + c)] ==
              doctest::Approx(d[static_cast<size_t>(c * 36 + (i + 1) * 6 + (j + 1))]).epsilon(1e-14));
      }
    }
  }
}

TEST_CASE("roi_align_2d rejects boxes with no area after stride division") {
  FeatureMap f{Tensor::full({1, 4, 4}, 1.0), 8};
  Box2D b{5.0, 5.0, 5.0, 9.0, 0};
  try {
    roi_align_2d(f, b, 4);
    FAIL("expected degenerate-box error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::degenerate_box);
  }
}

TEST_CASE("roi_align_2d gradient w.r.t. the feature map") {
  Rng rng(2);
  auto feats = random_matrix(3, 30, rng, true);
  FeatureMap f{reshape(feats, {3, 5, 6}), 2};
  Box2D b{1.0, 1.0, 9.0, 7.0, 0};
  auto fn = [&]() {
    FeatureMap fm{reshape(feats, {3, 5, 6}), 2};
    auto r = roi_align_2d(fm, b, 3);
    return mean(mul(r.flat, r.flat));
  };
  std::vector<Tensor> params{feats};
  CHECK(grad_check(fn, params) < 1e-6);
}

namespace {

VoxelGridSpec unit_grid() {
  VoxelGridSpec spec;
  spec.min = {0, -4, -2};
  spec.max = {8, 4, 2};
  spec.voxel_size = {0.5, 0.5, 0.5};
  return spec;
}

}  // namespace

TEST_CASE("roi_pool_3d: single voxel fills exactly one cell") {
  auto spec = unit_grid();
  std::vector<float> pts{2.2f, 0.2f, 0.2f, 0.5f};
  VoxelSet vs = voxelize(pts, spec);
  REQUIRE(vs.size() == 1);
  Tensor feats = Tensor::from_data({1, 3}, {1.0, -2.0, 0.5});
  // voxel center (2.25, 0.25, 0.25); box centered there
  Box3D b{2.25, 0.25, 0.25, 2.0, 2.0, 2.0, 0, 0};
  auto r = roi_pool_3d(vs, feats, spec, b, 4);
  REQUIRE(r.grid.shape() == Shape{4, 4, 4, 3});
  // center (0.5,0.5,0.5) fraction -> cell (2,2,2)
  int64_t cell = (2 * 4 + 2) * 4 + 2;
  int64_t nonzero_cells = 0;
  for (int64_t g = 0; g < 64; ++g) {
    bool any = false;
    for (int64_t c = 0; c < 3; ++c) {
      double v = r.grid.data()[static_cast<size_t>(g * 3 + c)];
      if (v != 0.0) any = true;
      if (g == cell) CHECK(v == feats.data()[static_cast<size_t>(c)]);
    }
    if (any) ++nonzero_cells;
  }
  CHECK(nonzero_cells == 1);
}

TEST_CASE("roi_pool_3d: empty box pools to zero") {
  auto spec = unit_grid();
  std::vector<float> pts{2.2f, 0.2f, 0.2f, 0.5f};
  VoxelSet vs = voxelize(pts, spec);
  Tensor feats = Tensor::from_data({1, 2}, {1.0, 1.0});
  Box3D b{6.0, 2.0, 0.0, 1.0, 1.0, 1.0, 0, 0};
  auto r = roi_pool_3d(vs, feats, spec, b, 4);
  for (double v : r.flat.data()) CHECK(v == 0.0);
}

TEST_CASE("roi_pool_3d rejects rotated boxes") {
  auto spec = unit_grid();
  std::vector<float> pts{2.2f, 0.2f, 0.2f, 0.5f};
  VoxelSet vs = voxelize(pts, spec);
  Tensor feats = Tensor::from_data({1, 2}, {1.0, 1.0});
  Box3D b{2.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.4, 0};
  try {
    roi_pool_3d(vs, feats, spec, b, 4);
    FAIL("expected unsupported-rotation");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::unsupported_rotation);
  }
}

TEST_CASE("roi_pool_3d matches the cell-assignment oracle on a random scene") {
  auto spec = unit_grid();
  Rng rng(3);
  std::vector<float> pts;
  for (int i = 0; i < 120; ++i) {
    pts.push_back(static_cast<float>(rng.uniform(0.0, 8.0)));
    pts.push_back(static_cast<float>(rng.uniform(-4.0, 4.0)));
    pts.push_back(static_cast<float>(rng.uniform(-2.0, 2.0)));
    pts.push_back(0.5f);
  }
  VoxelSet vs = voxelize(pts, spec);
  Tensor feats = random_matrix(vs.size(), 5, rng);
  Box3D b{4.0, 0.0, 0.0, 3.0, 3.0, 3.0, 0, 0};
  int out = 4;
  auto r = roi_pool_3d(vs, feats, spec, b, out);

  // oracle: assign each voxel center to a cell, take componentwise max
  std::vector<std::vector<double>> want(64);
  for (int64_t j = 0; j < vs.size(); ++j) {
    auto c = spec.voxel_center(vs.coords[static_cast<size_t>(j)][0],
                               vs.coords[static_cast<size_t>(j)][1],
                               vs.coords[static_cast<size_t>(j)][2]);
    double fx = (c[0] - (b.x - 1.5)) / 3.0;
    double fy = (c[1] - (b.y - 1.5)) / 3.0;
    double fz = (c[2] - (b.z - 1.5)) / 3.0;
    if (fx < 0 || fx > 1 || fy < 0 || fy > 1 || fz < 0 || fz > 1) continue;
    int ix = std::min(static_cast<int>(fx * out), out - 1);
    int iy = std::min(static_cast<int>(fy * out), out - 1);
    int iz = std::min(static_cast<int>(fz * out), out - 1);
    auto& cell = want[static_cast<size_t>((ix * out + iy) * out + iz)];
    if (cell.empty()) {
      cell.assign(5, -1e300);
    }
    for (int64_t k = 0; k < 5; ++k) {
      cell[static_cast<size_t>(k)] =
          std::max(cell[static_cast<size_t>(k)], feats.data()[static_cast<size_t>(j * 5 + k)]);
    }
  }
  for (int64_t g = 0; g < 64; ++g) {
    for (int64_t k = 0; k < 5; ++k) {
      double expect = want[static_cast<size_t>(g)].empty() ? 0.0 : want[static_cast<size_t>(g)][static_cast<size_t>(k)];
      CHECK(r.grid.data()[static_cast<size_t>(g * 5 + k)] == expect);
    }
  }
}

TEST_CASE("roi_pool_3d output is invariant to voxel ordering") {
  auto spec = unit_grid();
  Rng rng(4);
  std::vector<float> pts;
  for (int i = 0; i < 60; ++i) {
    pts.push_back(static_cast<float>(rng.uniform(1.0, 5.0)));
    pts.push_back(static_cast<float>(rng.uniform(-2.0, 2.0)));
    pts.push_back(static_cast<float>(rng.uniform(-1.0, 1.0)));
    pts.push_back(0.5f);
  }
  VoxelSet vs = voxelize(pts, spec);
  Tensor feats = random_matrix(vs.size(), 3, rng);
  Box3D b{3.0, 0.0, 0.0, 3.0, 3.0, 3.0, 0, 0};
  auto r1 = roi_pool_3d(vs, feats, spec, b, 4);

  int64_t J = vs.size();
  VoxelSet rev;
  rev.coords.assign(vs.coords.rbegin(), vs.coords.rend());
  std::vector<double> rfeats(static_cast<size_t>(J * 3));
  for (int64_t j = 0; j < J; ++j)
    for (int64_t k = 0; k < 3; ++k)
      rfeats[static_cast<size_t>(j * 3 + k)] = feats.data()[static_cast<size_t>((J - 1 - j) * 3 + k)];
  auto r2 = roi_pool_3d(rev, Tensor::from_data({J, 3}, std::move(rfeats)), spec, b, 4);
  for (size_t i = 0; i < r1.flat.data().size(); ++i) {
    CHECK(r1.flat.data()[i] == r2.flat.data()[i]);
  }
}

TEST_CASE("ncs_distance endpoint values") {
  std::vector<double> p{1.0, 2.0, -1.0};
  std::vector<double> np{-1.0, -2.0, 1.0};
  std::vector<double> orth{2.0, -1.0, 0.0};
  CHECK(ncs_distance(p, p) == doctest::Approx(-1.0).epsilon(1e-14));
  CHECK(ncs_distance(p, np) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(std::abs(ncs_distance(p, orth)) < 1e-14);
}

TEST_CASE("scfi_loss with identity heads on equal pairs is -1") {
  int64_t n = 4;
  auto heads = identity_heads(n);
  // non-negative entries so relu is transparent
  Tensor r = Tensor::from_data({1, n}, {0.5, 1.0, 0.2, 0.8});
  std::vector<std::pair<Tensor, Tensor>> pairs{{r, r}};
  Tensor loss = scfi_loss(pairs, heads, ScfiVariant::ncs_pos);
  CHECK(loss.item() == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("orthogonal pairs: ncs_pos is 0 and infonce matches the hand value") {
  int64_t n = 4;
  auto heads = identity_heads(n);
  Tensor a3 = Tensor::from_data({1, n}, {1.0, 0.0, 0.0, 0.0});
  Tensor a2 = Tensor::from_data({1, n}, {0.0, 1.0, 0.0, 0.0});
  Tensor b3 = Tensor::from_data({1, n}, {0.0, 0.0, 1.0, 0.0});
  Tensor b2 = Tensor::from_data({1, n}, {0.0, 0.0, 0.0, 1.0});
  std::vector<std::pair<Tensor, Tensor>> pairs{{a3, a2}, {b3, b2}};
  CHECK(std::abs(scfi_loss(pairs, heads, ScfiVariant::ncs_pos).item()) < 1e-12);
  // every similarity (positive or negative) is 0, so each InfoNCE row is
  // -log(e^0 / (e^0 + e^0)) = log 2 in both directions
  double want = std::log(2.0);
  CHECK(scfi_loss(pairs, heads, ScfiVariant::infonce).item() == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("stopgrad blocks every path when the predictors are zeroed") {
  Rng rng(5);
  int64_t n = 4;
  auto heads = identity_heads(n);
  // predictors become nonzero constants: outputs no longer depend on inputs,
  // so the RoI features reach the loss only through the q targets
  heads.pred3d.w2 = Tensor::zeros({n, n}, true);
  heads.pred2d.w2 = Tensor::zeros({n, n}, true);
  heads.pred3d.b2 = Tensor::from_data({n}, {1.0, 0.5, 0.25, 0.75}, true);
  heads.pred2d.b2 = Tensor::from_data({n}, {0.3, 0.9, 0.6, 0.2}, true);
  Tensor r3 = Tensor::from_data({1, n}, {0.5, 0.2, 0.9, 0.1}, true);
  Tensor r2 = Tensor::from_data({1, n}, {0.3, 0.8, 0.4, 0.6}, true);
  std::vector<std::pair<Tensor, Tensor>> pairs{{r3, r2}};
  {
    Tape tape;
    Tensor loss = scfi_loss(pairs, heads, ScfiVariant::ncs_pos);
    tape.backward(loss);
    // with the predictor second layers zeroed, the RoI inputs reach the loss
    // only through stopgrad targets: gradient must be absent or exactly zero
    bool r3_zero = !r3.has_grad();
    if (!r3_zero) {
      r3_zero = true;
      for (double g : r3.grad()) r3_zero = r3_zero && g == 0.0;
    }
    CHECK(r3_zero);
    bool r2_zero = !r2.has_grad();
    if (!r2_zero) {
      r2_zero = true;
      for (double g : r2.grad()) r2_zero = r2_zero && g == 0.0;
    }
    CHECK(r2_zero);
    r3.clear_grad();
    r2.clear_grad();
  }
  {
    // the symmetric variant keeps those paths alive
    Tape tape;
    Tensor loss = scfi_loss(pairs, heads, ScfiVariant::symmetric);
    tape.backward(loss);
    REQUIRE(r3.has_grad());
    double mag = 0.0;
    for (double g : r3.grad()) mag += std::abs(g);
    CHECK(mag > 1e-9);
    r3.clear_grad();
    r2.clear_grad();
  }
}

TEST_CASE("scfi_loss errors on an empty pair list") {
  auto heads = identity_heads(4);
  std::vector<std::pair<Tensor, Tensor>> pairs;
  try {
    scfi_loss(pairs, heads, ScfiVariant::ncs_pos);
    FAIL("expected empty-batch error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::empty_batch);
  }
}

TEST_CASE("scfi_loss is bounded in [-1, 1] for the ncs variant") {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    auto heads = ScfiHeads::init(6, 5, 8, 7, rng);
    std::vector<std::pair<Tensor, Tensor>> pairs;
    int n = 1 + trial % 3;
    for (int i = 0; i < n; ++i) {
      pairs.emplace_back(random_matrix(1, 6, rng), random_matrix(1, 5, rng));
    }
    double v = scfi_loss(pairs, heads, ScfiVariant::ncs_pos).item();
    CHECK(v >= -1.0 - 1e-12);
    CHECK(v <= 1.0 + 1e-12);
  }
}

TEST_CASE("scfi_loss is invariant to pair ordering") {
  Rng rng(7);
  auto heads = ScfiHeads::init(6, 5, 8, 7, rng);
  std::vector<std::pair<Tensor, Tensor>> pairs;
  for (int i = 0; i < 3; ++i) {
    pairs.emplace_back(random_matrix(1, 6, rng), random_matrix(1, 5, rng));
  }
  for (auto variant : {ScfiVariant::ncs_pos, ScfiVariant::nce, ScfiVariant::infonce,
                       ScfiVariant::ce_pos}) {
    double a = scfi_loss(pairs, heads, variant).item();
    std::vector<std::pair<Tensor, Tensor>> shuffled{pairs[2], pairs[0], pairs[1]};
    double b = scfi_loss(shuffled, heads, variant).item();
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
  }
}

TEST_CASE("all scfi variants pass gradient checks at micro size") {
  Rng rng(8);
  auto heads = ScfiHeads::init(6, 5, 4, 4, rng);
  std::vector<std::pair<Tensor, Tensor>> pairs;
  for (int i = 0; i < 2; ++i) {
    pairs.emplace_back(random_matrix(1, 6, rng, true), random_matrix(1, 5, rng, true));
  }
  std::vector<Tensor> params;
  for (auto* group : {&heads.proj3d, &heads.pred3d, &heads.proj2d, &heads.pred2d}) {
    for (Tensor* t : group->parameters()) params.push_back(*t);
  }
  for (auto& [a, b] : pairs) {
    params.push_back(a);
    params.push_back(b);
  }
  // Variants with stop-gradients need the numeric oracle to hold the q
  // targets at their unperturbed values; `symmetric` has no blocked branch.
  ScfiTargets frozen = scfi_targets(pairs, heads);
  for (auto variant : {ScfiVariant::ncs_pos, ScfiVariant::symmetric, ScfiVariant::nce,
                       ScfiVariant::infonce, ScfiVariant::ce_pos}) {
    auto f_analytic = [&]() { return scfi_loss(pairs, heads, variant); };
    auto f_numeric = [&]() { return scfi_loss(pairs, heads, variant, &frozen); };
    double err = variant == ScfiVariant::symmetric
                     ? grad_check(f_analytic, params)
                     : grad_check(f_analytic, f_numeric, params);
    INFO("variant " << static_cast<int>(variant) << " err " << err);
    CHECK(err < 1e-5);
  }
}

TEST_CASE("full roi -> heads pathway passes the gradient check") {
  Rng rng(9);
  auto spec = unit_grid();
  std::vector<float> pts;
  for (int i = 0; i < 40; ++i) {
    pts.push_back(static_cast<float>(rng.uniform(1.0, 5.0)));
    pts.push_back(static_cast<float>(rng.uniform(-2.0, 2.0)));
    pts.push_back(static_cast<float>(rng.uniform(-1.0, 1.0)));
    pts.push_back(0.5f);
  }
  VoxelSet vs = voxelize(pts, spec);
  Tensor vfeats = random_matrix(vs.size(), 3, rng, true);
  Tensor ifeats = random_matrix(2, 20, rng, true);
  Box3D b3{3.0, 0.0, 0.0, 3.0, 3.0, 2.0, 0, 0};
  Box2D b2{2.0, 1.0, 14.0, 9.0, 0};
  int out = 2;
  auto heads = ScfiHeads::init(out * out * out * 3, out * out * 2, 4, 4, rng);
  auto make_pairs = [&]() {
    FeatureMap fm{reshape(ifeats, {2, 4, 5}), 4};
    auto r3 = roi_pool_3d(vs, vfeats, spec, b3, out);
    auto r2 = roi_align_2d(fm, b2, out);
    return std::vector<std::pair<Tensor, Tensor>>{{r3.flat, r2.flat}};
  };
  ScfiTargets frozen = scfi_targets(make_pairs(), heads);
  auto f_analytic = [&]() { return scfi_loss(make_pairs(), heads, ScfiVariant::ncs_pos); };
  auto f_numeric = [&]() { return scfi_loss(make_pairs(), heads, ScfiVariant::ncs_pos, &frozen); };
  std::vector<Tensor> params{vfeats, ifeats};
  for (auto* group : {&heads.proj3d, &heads.pred3d, &heads.proj2d, &heads.pred2d}) {
    for (Tensor* t : group->parameters()) params.push_back(*t);
  }
  CHECK(grad_check(f_analytic, f_numeric, params) < 1e-5);
}

TEST_CASE("sample_pairs pads with ground truth when predictions are scarce") {
  Rng rng(10);
  auto proj = CameraProjection::pinhole(48.0, 48.0, 32.0);
  std::vector<Box3D> gts{{10, 0, -0.8, 4, 1.8, 1.5, 0, 0},
                         {15, 2, -0.8, 4, 1.8, 1.5, 0, 0},
                         {20, -2, -0.8, 4, 1.8, 1.5, 0, 0}};
  auto pairs = sample_pairs({}, {}, gts, proj, 96, 64, 2, rng);
  REQUIRE(pairs.size() == 2);
  for (const auto& p : pairs) {
    Box2D want = project_box3d(proj, p.box3d, 96, 64);
    CHECK(p.box2d.u_min == want.u_min);
    CHECK(p.box2d.v_max == want.v_max);
  }
}

TEST_CASE("sample_pairs takes high-score predictions when enough exist") {
  Rng rng(11);
  auto proj = CameraProjection::pinhole(48.0, 48.0, 32.0);
  std::vector<Box3D> preds;
  std::vector<double> scores;
  for (int i = 0; i < 5; ++i) {
    preds.push_back(Box3D{8.0 + 3 * i, 0, -0.8, 3, 1.5, 1.4, 0, 0});
    scores.push_back(0.9);
  }
  std::vector<Box3D> gts{{25, 5, -0.8, 1, 1, 1, 0, 1}};
  auto pairs = sample_pairs(preds, scores, gts, proj, 96, 64, 3, rng);
  REQUIRE(pairs.size() == 3);
  for (const auto& p : pairs) {
    CHECK(p.box3d.l == 3.0);  // all sampled boxes are predictions, not the gt
    Box2D want = project_box3d(proj, p.box3d, 96, 64);
    CHECK(p.box2d.u_min == want.u_min);
  }
}

TEST_CASE("sample_pairs skips low-score predictions") {
  Rng rng(12);
  auto proj = CameraProjection::pinhole(48.0, 48.0, 32.0);
  std::vector<Box3D> preds{{10, 0, -0.8, 3, 1.5, 1.4, 0, 0}};
  std::vector<double> scores{0.1};
  std::vector<Box3D> gts{{15, 0, -0.8, 4, 1.8, 1.5, 0, 0}};
  auto pairs = sample_pairs(preds, scores, gts, proj, 96, 64, 1, rng);
  REQUIRE(pairs.size() == 1);
  CHECK(pairs[0].box3d.l == 4.0);  // the gt box
}

TEST_CASE("sample_pairs returns empty when every box is behind the camera") {
  Rng rng(13);
  auto proj = CameraProjection::pinhole(48.0, 48.0, 32.0);
  std::vector<Box3D> gts{{-10, 0, 0, 1, 1, 1, 0, 0}, {-5, 1, 0, 1, 1, 1, 0, 0}};
  auto pairs = sample_pairs({}, {}, gts, proj, 96, 64, 2, rng);
  CHECK(pairs.empty());
}
