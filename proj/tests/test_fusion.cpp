#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "vf/fusion.hpp"

using namespace vf;

namespace {

Tensor random_matrix(int64_t r, int64_t c, Rng& rng, bool requires_grad = false) {
  std::vector<double> d(static_cast<size_t>(r * c));
  for (double& v : d) v = rng.uniform(-1.0, 1.0);
  return Tensor::from_data({r, c}, std::move(d), requires_grad);
}

// Explicit loop evaluation of the whole attention chain: projections,
// scaled dot products, row softmax, weighted sum, FC layer, concat mix.
struct LoopOracle {
  std::vector<std::vector<double>> align;
  std::vector<std::vector<double>> fused;
};

LoopOracle cafa_loop_oracle(const Tensor& P, const Tensor& F, const CafaParams& prm) {
  int64_t J = P.dim(0), d = P.dim(1), hw = F.dim(0);
  int64_t dk = prm.w_q.dim(1), dv = prm.w_v.dim(1);
  auto matvec = [](const Tensor& m, std::span<const double> x, int64_t rows, int64_t cols) {
    std::vector<double> out(static_cast<size_t>(cols), 0.0);
    for (int64_t i = 0; i < rows; ++i)
      for (int64_t j = 0; j < cols; ++j)
        out[static_cast<size_t>(j)] += x[static_cast<size_t>(i)] * m.data()[static_cast<size_t>(i * cols + j)];
    return out;
  };
  std::vector<std::vector<double>> Q, K, V;
  for (int64_t j = 0; j < J; ++j)
    Q.push_back(matvec(prm.w_q, P.data().subspan(static_cast<size_t>(j * d), static_cast<size_t>(d)), d, dk));
  for (int64_t i = 0; i < hw; ++i) {
    K.push_back(matvec(prm.w_k, F.data().subspan(static_cast<size_t>(i * d), static_cast<size_t>(d)), d, dk));
    V.push_back(matvec(prm.w_v, F.data().subspan(static_cast<size_t>(i * d), static_cast<size_t>(d)), d, dv));
  }
  LoopOracle out;
  for (int64_t j = 0; j < J; ++j) {
    std::vector<double> beta(static_cast<size_t>(hw), 0.0);
    for (int64_t i = 0; i < hw; ++i) {
      double dot = 0.0;
      for (int64_t k = 0; k < dk; ++k) dot += Q[static_cast<size_t>(j)][static_cast<size_t>(k)] * K[static_cast<size_t>(i)][static_cast<size_t>(k)];
      beta[static_cast<size_t>(i)] = dot / std::sqrt(static_cast<double>(dk));
    }
    double mx = *std::max_element(beta.begin(), beta.end());
    double den = 0.0;
    std::vector<double> s(static_cast<size_t>(hw));
    for (int64_t i = 0; i < hw; ++i) {
      s[static_cast<size_t>(i)] = std::exp(beta[static_cast<size_t>(i)] - mx);
      den += s[static_cast<size_t>(i)];
    }
    for (double& v : s) v /= den;
    std::vector<double> attended(static_cast<size_t>(dv), 0.0);
    for (int64_t i = 0; i < hw; ++i)
      for (int64_t k = 0; k < dv; ++k)
        attended[static_cast<size_t>(k)] += s[static_cast<size_t>(i)] * V[static_cast<size_t>(i)][static_cast<size_t>(k)];
    std::vector<double> f_att = matvec(prm.ffn_w, attended, dv, d);
    for (int64_t k = 0; k < d; ++k) f_att[static_cast<size_t>(k)] += prm.ffn_b.data()[static_cast<size_t>(k)];
    std::vector<double> cat(static_cast<size_t>(2 * d));
    for (int64_t k = 0; k < d; ++k) {
      cat[static_cast<size_t>(k)] = P.data()[static_cast<size_t>(j * d + k)];
      cat[static_cast<size_t>(d + k)] = f_att[static_cast<size_t>(k)];
    }
    std::vector<double> fused = matvec(prm.mix_w, cat, 2 * d, d);
    for (int64_t k = 0; k < d; ++k) fused[static_cast<size_t>(k)] += prm.mix_b.data()[static_cast<size_t>(k)];
    out.align.push_back(std::move(s));
    out.fused.push_back(std::move(fused));
  }
  return out;
}

}  // namespace

TEST_CASE("single image position: align is all ones, attended row is V0") {
  Rng rng(1);
  int64_t d = 6;
  auto prm = CafaParams::init(d, d, d, 1, rng);
  auto P = random_matrix(4, d, rng);
  auto F = random_matrix(1, d, rng);
  auto out = cafa_forward(P, F, prm, 1, 1);
  REQUIRE(out.align.has_value());
  REQUIRE(out.align->weights.shape() == Shape{4, 1});
  for (double v : out.align->weights.data()) CHECK(v == 1.0);
  // attended == V0 for every voxel means fused rows only differ through P
  auto oracle = cafa_loop_oracle(P, F, prm);
  for (int64_t j = 0; j < 4; ++j)
    for (int64_t k = 0; k < d; ++k)
      CHECK(std::abs(out.fused.data()[static_cast<size_t>(j * d + k)] -
                     oracle.fused[static_cast<size_t>(j)][static_cast<size_t>(k)]) < 1e-12);
}

TEST_CASE("zero query weights give uniform attention and a V column mean") {
  Rng rng(2);
  int64_t d = 5, hw = 7, J = 3;
  auto prm = CafaParams::init(d, d, d, 1, rng);
  prm.w_q = Tensor::zeros({d, d}, true);
  auto P = random_matrix(J, d, rng);
  auto F = random_matrix(hw, d, rng);
  auto out = cafa_forward(P, F, prm, 1, hw);
  for (double v : out.align->weights.data()) CHECK(v == doctest::Approx(1.0 / hw).epsilon(1e-12));
}

TEST_CASE("J=2 hw=3 random case matches the loop oracle within 1e-10") {
  Rng rng(3);
  int64_t d = 8;
  auto prm = CafaParams::init(d, d, d, 1, rng);
  auto P = random_matrix(2, d, rng);
  auto F = random_matrix(3, d, rng);
  auto out = cafa_forward(P, F, prm, 1, 3);
  auto oracle = cafa_loop_oracle(P, F, prm);
  for (int64_t j = 0; j < 2; ++j) {
    for (int64_t i = 0; i < 3; ++i)
      CHECK(std::abs(out.align->weights.data()[static_cast<size_t>(j * 3 + i)] -
                     oracle.align[static_cast<size_t>(j)][static_cast<size_t>(i)]) < 1e-10);
    for (int64_t k = 0; k < d; ++k)
      CHECK(std::abs(out.fused.data()[static_cast<size_t>(j * d + k)] -
                     oracle.fused[static_cast<size_t>(j)][static_cast<size_t>(k)]) < 1e-10);
  }
}

TEST_CASE("alignment rows sum to one over random passes") {
  Rng rng(4);
  for (int trial = 0; trial < 25; ++trial) {
    int64_t d = 4 + trial % 3;
    int64_t J = 1 + trial % 5;
    int64_t hw = 2 + trial % 6;
    auto prm = CafaParams::init(d, d, d, 1, rng);
    auto P = random_matrix(J, d, rng);
    auto F = random_matrix(hw, d, rng);
    auto out = cafa_forward(P, F, prm, 1, hw);
    for (int64_t j = 0; j < J; ++j) {
      double s = 0.0;
      for (int64_t i = 0; i < hw; ++i) {
        double v = out.align->weights.data()[static_cast<size_t>(j * hw + i)];
        CHECK(v >= 0.0);
        s += v;
      }
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("permuting voxel rows permutes fused and align rows bitwise") {
  Rng rng(5);
  int64_t d = 6, J = 5, hw = 4;
  auto prm = CafaParams::init(d, d, d, 1, rng);
  auto P = random_matrix(J, d, rng);
  std::vector<double> rev(static_cast<size_t>(J * d));
  for (int64_t j = 0; j < J; ++j)
    for (int64_t k = 0; k < d; ++k)
      rev[static_cast<size_t>(j * d + k)] = P.data()[static_cast<size_t>((J - 1 - j) * d + k)];
  auto Pr = Tensor::from_data({J, d}, std::move(rev));
  auto F = random_matrix(hw, d, rng);
  auto a = cafa_forward(P, F, prm, 1, hw);
  auto b = cafa_forward(Pr, F, prm, 1, hw);
  for (int64_t j = 0; j < J; ++j) {
    for (int64_t k = 0; k < d; ++k)
      CHECK(a.fused.data()[static_cast<size_t>(j * d + k)] ==
            b.fused.data()[static_cast<size_t>((J - 1 - j) * d + k)]);
    for (int64_t i = 0; i < hw; ++i)
      CHECK(a.align->weights.data()[static_cast<size_t>(j * hw + i)] ==
            b.align->weights.data()[static_cast<size_t>((J - 1 - j) * hw + i)]);
  }
}

TEST_CASE("permuting image positions permutes align columns identically") {
  Rng rng(6);
  int64_t d = 5, J = 3, hw = 4;
  auto prm = CafaParams::init(d, d, d, 1, rng);
  auto P = random_matrix(J, d, rng);
  auto F = random_matrix(hw, d, rng);
  std::vector<double> rev(static_cast<size_t>(hw * d));
  for (int64_t i = 0; i < hw; ++i)
    for (int64_t k = 0; k < d; ++k)
      rev[static_cast<size_t>(i * d + k)] = F.data()[static_cast<size_t>((hw - 1 - i) * d + k)];
  auto Fr = Tensor::from_data({hw, d}, std::move(rev));
  auto a = cafa_forward(P, F, prm, 1, hw);
  auto b = cafa_forward(P, Fr, prm, 1, hw);
  // equal up to summation order inside the softmax denominator
  for (int64_t j = 0; j < J; ++j)
    for (int64_t i = 0; i < hw; ++i)
      CHECK(a.align->weights.data()[static_cast<size_t>(j * hw + i)] ==
            doctest::Approx(b.align->weights.data()[static_cast<size_t>(j * hw + hw - 1 - i)])
                .epsilon(1e-14));
}

TEST_CASE("cafa gradient passes the finite-difference check at J=3 hw=6") {
  Rng rng(7);
  int64_t d = 4;
  auto prm = CafaParams::init(d, d, d, 1, rng);
  auto P = random_matrix(3, d, rng, true);
  auto F = random_matrix(6, d, rng, true);
  auto f = [&]() {
    auto out = cafa_forward(P, F, prm, 2, 3);
    return mean(mul(out.fused, out.fused));
  };
  std::vector<Tensor> params{prm.w_q, prm.w_k, prm.w_v, prm.ffn_w, prm.ffn_b,
                             prm.mix_w, prm.mix_b, P, F};
  CHECK(grad_check(f, params) < 1e-6);
}

TEST_CASE("point projection fusion samples the exact lattice pixel") {
  Rng rng(8);
  int64_t d = 4;
  VoxelGridSpec spec;
  spec.min = {0, -8, -4};
  spec.max = {16, 8, 4};
  spec.voxel_size = {1.0, 1.0, 1.0};
  // one voxel whose center projects exactly onto feature-map lattice point (1, 1)
  // with stride 4 and pinhole(8, 8, 8): u = 8 - 8*y/x, v = 8 - 8*z/x
  // voxel center (8.5, 4.5, 4.5): hmm pick center so u=4, v=4 exactly:
  // u = 4 -> y = x/2; v = 4 -> z = x/2. center (8.5, 4.25, 4.25) is not a
  // voxel center; use focal chosen to hit it: take center (8.5, 3.5, 3.5),
  // u = 8 - f*3.5/8.5, want 4 -> f = 4*8.5/3.5
  double f = 4.0 * 8.5 / 3.5;
  auto proj = CameraProjection::pinhole(f, 8.0, 8.0);
  std::vector<float> pts{8.5f, 3.5f, 3.5f, 0.5f};
  VoxelSet vs = voxelize(pts, spec);
  REQUIRE(vs.size() == 1);
  auto prm = CafaParams::init_mix_only(d, rng);
  auto P = random_matrix(1, d, rng);
  FeatureMap fmap{random_matrix(1, 1, rng), 4};
  std::vector<double> fdata(static_cast<size_t>(d * 4 * 4));
  for (double& v : fdata) v = rng.uniform(-1, 1);
  fmap.feats = Tensor::from_data({d, 4, 4}, std::move(fdata));
  auto fused = point_projection_fusion(P, fmap, proj, vs, spec, prm);
  // oracle: mix(concat(P_row, fmap[:, 1, 1]))
  std::vector<double> cat(static_cast<size_t>(2 * d));
  for (int64_t k = 0; k < d; ++k) {
    cat[static_cast<size_t>(k)] = P.data()[static_cast<size_t>(k)];
    cat[static_cast<size_t>(d + k)] = fmap.feats.data()[static_cast<size_t>((k * 4 + 1) * 4 + 1)];
  }
  for (int64_t k = 0; k < d; ++k) {
    double want = prm.mix_b.data()[static_cast<size_t>(k)];
    for (int64_t i = 0; i < 2 * d; ++i)
      want += cat[static_cast<size_t>(i)] * prm.mix_w.data()[static_cast<size_t>(i * d + k)];
    CHECK(std::abs(fused.data()[static_cast<size_t>(k)] - want) < 1e-12);
  }
}

TEST_CASE("voxels behind the camera contribute a zero image feature") {
  Rng rng(9);
  int64_t d = 3;
  VoxelGridSpec spec;
  spec.min = {-16, -4, -4};
  spec.max = {0, 4, 4};
  spec.voxel_size = {1.0, 1.0, 1.0};
  std::vector<float> pts{-8.5f, 0.5f, 0.5f, 0.5f};
  VoxelSet vs = voxelize(pts, spec);
  REQUIRE(vs.size() == 1);
  auto proj = CameraProjection::pinhole(8.0, 8.0, 8.0);
  auto prm = CafaParams::init_mix_only(d, rng);
  auto P = random_matrix(1, d, rng);
  std::vector<double> fdata(static_cast<size_t>(d * 4 * 4), 7.0);
  FeatureMap fmap{Tensor::from_data({d, 4, 4}, std::move(fdata)), 4};
  auto fused = point_projection_fusion(P, fmap, proj, vs, spec, prm);
  // oracle with zero image part
  for (int64_t k = 0; k < d; ++k) {
    double want = prm.mix_b.data()[static_cast<size_t>(k)];
    for (int64_t i = 0; i < d; ++i)
      want += P.data()[static_cast<size_t>(i)] * prm.mix_w.data()[static_cast<size_t>(i * d + k)];
    CHECK(std::abs(fused.data()[static_cast<size_t>(k)] - want) < 1e-12);
  }
}

TEST_CASE("point projection matches the project-then-bilinear oracle") {
  Rng rng(10);
  int64_t d = 3;
  VoxelGridSpec spec;
  spec.min = {0, -8, -4};
  spec.max = {16, 8, 4};
  spec.voxel_size = {2.0, 2.0, 2.0};
  std::vector<float> pts;
  for (int i = 0; i < 40; ++i) {
    pts.push_back(static_cast<float>(rng.uniform(0.5, 15.5)));
    pts.push_back(static_cast<float>(rng.uniform(-7.5, 7.5)));
    pts.push_back(static_cast<float>(rng.uniform(-3.5, 3.5)));
    pts.push_back(0.5f);
  }
  VoxelSet vs = voxelize(pts, spec);
  REQUIRE(vs.size() >= 2);
  auto proj = CameraProjection::pinhole(12.0, 12.0, 8.0);
  auto prm = CafaParams::init_mix_only(d, rng);
  auto P = random_matrix(vs.size(), d, rng);
  std::vector<double> fdata(static_cast<size_t>(d * 4 * 6));
  for (double& v : fdata) v = rng.uniform(-1, 1);
  FeatureMap fmap{Tensor::from_data({d, 4, 6}, std::move(fdata)), 4};
  auto fused = point_projection_fusion(P, fmap, proj, vs, spec, prm);

  for (int64_t j = 0; j < vs.size(); ++j) {
    auto c = spec.voxel_center(vs.coords[static_cast<size_t>(j)][0],
                               vs.coords[static_cast<size_t>(j)][1],
                               vs.coords[static_cast<size_t>(j)][2]);
    std::vector<double> img_part(static_cast<size_t>(d), 0.0);
    bool in_view = true;
    PixelPoint p{};
    try {
      p = project_point(proj, c[0], c[1], c[2]);
    } catch (const Error&) {
      in_view = false;
    }
    if (in_view && (p.u < 0 || p.u > 24 || p.v < 0 || p.v > 16)) in_view = false;
    if (in_view) {
      auto s = bilinear_sample(fmap.feats, p.u / 4.0, p.v / 4.0);
      for (int64_t k = 0; k < d; ++k) img_part[static_cast<size_t>(k)] = s.data()[static_cast<size_t>(k)];
    }
    for (int64_t k = 0; k < d; ++k) {
      double want = prm.mix_b.data()[static_cast<size_t>(k)];
      for (int64_t i = 0; i < d; ++i) {
        want += P.data()[static_cast<size_t>(j * d + i)] * prm.mix_w.data()[static_cast<size_t>(i * d + k)];
        want += img_part[static_cast<size_t>(i)] * prm.mix_w.data()[static_cast<size_t>((d + i) * d + k)];
      }
      CHECK(std::abs(fused.data()[static_cast<size_t>(j * d + k)] - want) < 1e-12);
    }
  }
}

TEST_CASE("nonlocal fusion with zero values depends only on voxel features") {
  Rng rng(11);
  int64_t d = 4;
  auto prm = CafaParams::init(d, d, d, 1, rng);
  prm.w_v = Tensor::zeros({d, d}, true);
  auto P = random_matrix(3, d, rng);
  auto F1 = random_matrix(5, d, rng);
  auto F2 = random_matrix(5, d, rng);
  auto a = nonlocal_fusion(P, F1, prm);
  auto b = nonlocal_fusion(P, F2, prm);
  for (size_t i = 0; i < a.data().size(); ++i) CHECK(a.data()[i] == doctest::Approx(b.data()[i]));
}

TEST_CASE("nonlocal hw=2 hand case matches the explicit formula") {
  Rng rng(12);
  int64_t d = 3;
  auto prm = CafaParams::init(d, d, d, 1, rng);
  auto P = random_matrix(2, d, rng);
  auto F = random_matrix(2, d, rng);
  auto out = nonlocal_fusion(P, F, prm);
  auto matvec = [&](const Tensor& m, std::span<const double> x) {
    std::vector<double> r(static_cast<size_t>(m.dim(1)), 0.0);
    for (int64_t i = 0; i < m.dim(0); ++i)
      for (int64_t j = 0; j < m.dim(1); ++j)
        r[static_cast<size_t>(j)] += x[static_cast<size_t>(i)] * m.data()[static_cast<size_t>(i * m.dim(1) + j)];
    return r;
  };
  for (int64_t j = 0; j < 2; ++j) {
    auto q = matvec(prm.w_q, P.data().subspan(static_cast<size_t>(j * d), static_cast<size_t>(d)));
    std::vector<double> attended(static_cast<size_t>(d), 0.0);
    for (int64_t i = 0; i < 2; ++i) {
      auto k = matvec(prm.w_k, F.data().subspan(static_cast<size_t>(i * d), static_cast<size_t>(d)));
      auto v = matvec(prm.w_v, F.data().subspan(static_cast<size_t>(i * d), static_cast<size_t>(d)));
      double w = 0.0;
      for (int64_t c = 0; c < d; ++c) w += q[static_cast<size_t>(c)] * k[static_cast<size_t>(c)];
      for (int64_t c = 0; c < d; ++c) attended[static_cast<size_t>(c)] += w * v[static_cast<size_t>(c)] / 2.0;
    }
    auto f_att = matvec(prm.ffn_w, attended);
    for (int64_t c = 0; c < d; ++c) f_att[static_cast<size_t>(c)] += prm.ffn_b.data()[static_cast<size_t>(c)];
    std::vector<double> cat(static_cast<size_t>(2 * d));
    for (int64_t c = 0; c < d; ++c) {
      cat[static_cast<size_t>(c)] = P.data()[static_cast<size_t>(j * d + c)];
      cat[static_cast<size_t>(d + c)] = f_att[static_cast<size_t>(c)];
    }
    auto fused = matvec(prm.mix_w, cat);
    for (int64_t c = 0; c < d; ++c) {
      fused[static_cast<size_t>(c)] += prm.mix_b.data()[static_cast<size_t>(c)];
      CHECK(std::abs(out.data()[static_cast<size_t>(j * d + c)] - fused[static_cast<size_t>(c)]) < 1e-10);
    }
  }
}

TEST_CASE("nonlocal and cross-attention outputs differ on random inputs") {
  Rng rng(13);
  int64_t d = 4;
  auto prm = CafaParams::init(d, d, d, 1, rng);
  auto P = random_matrix(2, d, rng);
  auto F = random_matrix(3, d, rng);
  auto a = cafa_forward(P, F, prm, 1, 3).fused;
  auto b = nonlocal_fusion(P, F, prm);
  double diff = 0.0;
  for (size_t i = 0; i < a.data().size(); ++i) diff += std::abs(a.data()[i] - b.data()[i]);
  CHECK(diff > 1e-6);
}

TEST_CASE("multihead with one head is bitwise identical to single-head") {
  Rng rng(14);
  int64_t d = 6;
  auto prm = CafaParams::init(d, d, d, 1, rng);
  auto P = random_matrix(4, d, rng);
  auto F = random_matrix(5, d, rng);
  auto a = cafa_forward(P, F, prm, 1, 5);
  auto b = multihead_cafa_forward(P, F, prm, 1, 5);
  for (size_t i = 0; i < a.fused.data().size(); ++i)
    CHECK(a.fused.data()[i] == b.fused.data()[i]);
  for (size_t i = 0; i < a.align->weights.data().size(); ++i)
    CHECK(a.align->weights.data()[i] == b.align->weights.data()[i]);
}

TEST_CASE("multihead with second head zeroed equals a half-width single head") {
  Rng rng(15);
  int64_t d = 6, hk = 3;
  auto prm = CafaParams::init(d, d, d, 2, rng);
  // zero the second head's slices of W_Q / W_K / W_V
  for (Tensor* t : {&prm.w_q, &prm.w_k, &prm.w_v}) {
    auto data = t->mutable_data();
    for (int64_t r = 0; r < d; ++r)
      for (int64_t c = hk; c < d; ++c) data[static_cast<size_t>(r * d + c)] = 0.0;
  }
  auto P = random_matrix(3, d, rng);
  auto F = random_matrix(4, d, rng);
  auto out = multihead_cafa_forward(P, F, prm, 1, 4);

  // expected: head-0 attends with the first hk columns; head-1 value output
  // is exactly zero, so the FFN sees [attended0, 0]
  Tensor q = matmul(P, slice(prm.w_q, 1, 0, hk));
  Tensor k = matmul(F, slice(prm.w_k, 1, 0, hk));
  Tensor v = matmul(F, slice(prm.w_v, 1, 0, hk));
  Tensor align0 = softmax(scale(matmul(q, transpose2d(k)), 1.0 / std::sqrt(3.0)));
  Tensor att0 = matmul(align0, v);
  std::vector<Tensor> both{att0, Tensor::zeros({3, hk})};
  Tensor f_att = add_row_bias(matmul(concat(both, 1), prm.ffn_w), prm.ffn_b);
  std::vector<Tensor> cat{P, f_att};
  Tensor want = add_row_bias(matmul(concat(cat, 1), prm.mix_w), prm.mix_b);
  for (size_t i = 0; i < want.data().size(); ++i)
    CHECK(out.fused.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-12));
}

TEST_CASE("multihead mean alignment rows sum to one") {
  Rng rng(16);
  int64_t d = 8;
  auto prm = CafaParams::init(d, d, d, 4, rng);
  auto P = random_matrix(3, d, rng);
  auto F = random_matrix(6, d, rng);
  auto out = multihead_cafa_forward(P, F, prm, 2, 3);
  for (int64_t j = 0; j < 3; ++j) {
    double s = 0.0;
    for (int64_t i = 0; i < 6; ++i) s += out.align->weights.data()[static_cast<size_t>(j * 6 + i)];
    CHECK(std::abs(s - 1.0) < 1e-9);
  }
  CHECK_THROWS_AS(multihead_cafa_forward(P, F, CafaParams::init(d, 6, 6, 4, rng), 2, 3), Error);
}

TEST_CASE("attention mass of uniform attention equals box area over image area") {
  int64_t h = 4, w = 6;
  int stride = 8;  // image 48 x 32
  std::vector<double> row(static_cast<size_t>(h * w), 1.0 / static_cast<double>(h * w));
  Box2D box{5.0, 3.0, 29.0, 19.0, 0};
  double mass = attention_mass_in_box(row, h, w, stride, box);
  double want = box.area() / (48.0 * 32.0);
  CHECK(std::abs(mass - want) < 1e-6);
}

TEST_CASE("alignment PGM rescales the max weight to 65535") {
  std::vector<double> row{0.1, 0.2, 0.4, 0.3};
  auto pgm = alignment_row_pgm(row, 2, 2);
  // header "P5\n2 2\n65535\n" then 8 bytes big-endian
  std::string header(pgm.begin(), pgm.begin() + 12);
  CHECK(header == "P5\n2 2\n65535");
  size_t off = 13;
  auto sample = [&](size_t i) {
    return (static_cast<uint16_t>(pgm[off + 2 * i]) << 8) | pgm[off + 2 * i + 1];
  };
  CHECK(sample(2) == 65535);  // 0.4 is the max
  CHECK(sample(0) == static_cast<uint16_t>(std::lround(0.1 / 0.4 * 65535.0)));
}
