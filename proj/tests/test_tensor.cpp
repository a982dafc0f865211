#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "vf/tensor.hpp"

using namespace vf;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = true, double amp = 1.0) {
  std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
  for (double& v : d) v = rng.uniform(-amp, amp);
  return Tensor::from_data(std::move(shape), std::move(d), requires_grad);
}

// Independent triple-loop product used as the matmul oracle.
std::vector<double> matmul_oracle(const Tensor& a, const Tensor& b) {
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j)
      for (int64_t l = 0; l < k; ++l)
        out[static_cast<size_t>(i * n + j)] +=
            a.data()[static_cast<size_t>(i * k + l)] * b.data()[static_cast<size_t>(l * n + j)];
  return out;
}

// Direct 6-nested-loop cross-correlation oracle.
std::vector<double> conv2d_oracle(const Tensor& x, const Tensor& w, int stride, int pad,
                                  int64_t& Ho, int64_t& Wo) {
  int64_t cin = x.dim(0), H = x.dim(1), W = x.dim(2);
  int64_t cout = w.dim(0), k = w.dim(2);
  Ho = (H + 2 * pad - k) / stride + 1;
  Wo = (W + 2 * pad - k) / stride + 1;
  std::vector<double> out(static_cast<size_t>(cout * Ho * Wo), 0.0);
  for (int64_t co = 0; co < cout; ++co)
    for (int64_t oy = 0; oy < Ho; ++oy)
      for (int64_t ox = 0; ox < Wo; ++ox)
        for (int64_t ci = 0; ci < cin; ++ci)
          for (int64_t ky = 0; ky < k; ++ky)
            for (int64_t kx = 0; kx < k; ++kx) {
              int64_t iy = oy * stride - pad + ky;
              int64_t ix = ox * stride - pad + kx;
              if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
              out[static_cast<size_t>((co * Ho + oy) * Wo + ox)] +=
                  x.data()[static_cast<size_t>((ci * H + iy) * W + ix)] *
                  w.data()[static_cast<size_t>(((co * cin + ci) * k + ky) * k + kx)];
            }
  return out;
}

}  // namespace

TEST_CASE("matmul identity and hand cases") {
  auto eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  auto b = Tensor::from_data({2, 2}, {3, 4, 5, 6});
  auto r = matmul(eye, b);
  for (size_t i = 0; i < 4; ++i) CHECK(r.data()[i] == b.data()[i]);

  auto a12 = Tensor::from_data({1, 2}, {1, 2});
  auto b21 = Tensor::from_data({2, 1}, {3, 4});
  CHECK(matmul(a12, b21).item() == 11.0);
}

TEST_CASE("matmul random 4x5 * 5x3 matches triple-loop oracle") {
  Rng rng(42);
  auto a = random_tensor({4, 5}, rng, false);
  auto b = random_tensor({5, 3}, rng, false);
  auto r = matmul(a, b);
  auto want = matmul_oracle(a, b);
  for (size_t i = 0; i < want.size(); ++i) CHECK(std::abs(r.data()[i] - want[i]) < 1e-12);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected shape error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::shape);
    std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("softmax uniform logits") {
  auto x = Tensor::zeros({4});
  auto s = softmax(x);
  for (double v : s.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("softmax is shift-stable") {
  auto x = Tensor::from_data({2}, {1000.0, 0.0});
  auto s = softmax(x);
  CHECK(std::abs(s.data()[0] - 1.0) < 1e-12);
  CHECK(std::abs(s.data()[1] - 0.0) < 1e-12);
}

TEST_CASE("softmax matches high-precision direct evaluation") {
  auto x = Tensor::from_data({3}, {1.0, 2.0, 3.0});
  auto s = softmax(x);
  long double den = expl(1.0L) + expl(2.0L) + expl(3.0L);
  for (int i = 0; i < 3; ++i) {
    long double want = expl(static_cast<long double>(i + 1)) / den;
    CHECK(std::abs(s.data()[static_cast<size_t>(i)] - static_cast<double>(want)) < 1e-15);
  }
}

TEST_CASE("softmax rows sum to one and are non-negative") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({5, 9}, rng, false, 30.0);
    auto s = softmax(x);
    for (int64_t r = 0; r < 5; ++r) {
      double sum = 0.0;
      for (int64_t c = 0; c < 9; ++c) {
        double v = s.data()[static_cast<size_t>(r * 9 + c)];
        CHECK(v >= 0.0);
        sum += v;
      }
      CHECK(std::abs(sum - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("softmax rejects non-finite input") {
  auto x = Tensor::from_data({2}, {std::nan(""), 0.0});
  CHECK_THROWS_AS(softmax(x), Error);
}

TEST_CASE("elementwise basics") {
  auto r = relu(Tensor::from_data({2}, {-1.0, 2.0}));
  CHECK(r.data()[0] == 0.0);
  CHECK(r.data()[1] == 2.0);

  auto n = l2_normalize(Tensor::from_data({2}, {3.0, 4.0}), 0);
  CHECK(n.data()[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(n.data()[1] == doctest::Approx(0.8).epsilon(1e-15));

  // l2_normalize of a zero vector hits the epsilon floor instead of dividing by 0.
  auto z = l2_normalize(Tensor::zeros({3}), 0);
  for (double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("concat along axis 0 matches stacked copy oracle") {
  Rng rng(3);
  auto a = random_tensor({2, 3}, rng, false);
  auto b = random_tensor({2, 3}, rng, false);
  std::vector<Tensor> xs{a, b};
  auto c = concat(xs, 0);
  REQUIRE(c.shape() == Shape{4, 3});
  for (int64_t i = 0; i < 2; ++i)
    for (int64_t j = 0; j < 3; ++j) {
      CHECK(c.data()[static_cast<size_t>(i * 3 + j)] == a.data()[static_cast<size_t>(i * 3 + j)]);
      CHECK(c.data()[static_cast<size_t>((i + 2) * 3 + j)] == b.data()[static_cast<size_t>(i * 3 + j)]);
    }
}

TEST_CASE("concat along axis 1 and axis errors") {
  auto a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  auto b = Tensor::from_data({2, 1}, {9, 8});
  std::vector<Tensor> xs{a, b};
  auto c = concat(xs, 1);
  REQUIRE(c.shape() == Shape{2, 3});
  CHECK(c.data()[2] == 9);
  CHECK(c.data()[5] == 8);
  CHECK_THROWS_AS(concat(xs, 5), Error);
}

TEST_CASE("reshape round trip and slice") {
  Rng rng(9);
  auto a = random_tensor({3, 4}, rng, false);
  auto b = reshape(reshape(a, {12}), {3, 4});
  for (size_t i = 0; i < 12; ++i) CHECK(a.data()[i] == b.data()[i]);

  auto s = slice(a, 1, 1, 3);
  REQUIRE(s.shape() == Shape{3, 2});
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 2; ++j)
      CHECK(s.data()[static_cast<size_t>(i * 2 + j)] == a.data()[static_cast<size_t>(i * 4 + j + 1)]);
}

TEST_CASE("conv2d 1x1 identity weight reproduces input") {
  Rng rng(11);
  auto x = random_tensor({1, 4, 5}, rng, false);
  auto w = Tensor::from_data({1, 1, 1, 1}, {1.0});
  auto y = conv2d(x, w, 1, 0);
  REQUIRE(y.shape() == x.shape());
  for (size_t i = 0; i < x.data().size(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d all-ones 3x3 kernel counts overlap") {
  auto x = Tensor::full({1, 5, 5}, 1.0);
  auto w = Tensor::full({1, 1, 3, 3}, 1.0);
  auto y = conv2d(x, w, 1, 1);
  REQUIRE(y.shape() == Shape{1, 5, 5});
  CHECK(y.data()[static_cast<size_t>(2 * 5 + 2)] == 9.0);
  CHECK(y.data()[0] == 4.0);
  CHECK(y.data()[24] == 4.0);
}

TEST_CASE("conv2d random case matches nested-loop oracle") {
  Rng rng(13);
  auto x = random_tensor({3, 7, 6}, rng, false);
  auto w = random_tensor({4, 3, 3, 3}, rng, false);
  for (int stride : {1, 2}) {
    for (int pad : {0, 1}) {
      int64_t Ho, Wo;
      auto want = conv2d_oracle(x, w, stride, pad, Ho, Wo);
      auto y = conv2d(x, w, stride, pad);
      REQUIRE(y.shape() == Shape{4, Ho, Wo});
      for (size_t i = 0; i < want.size(); ++i) CHECK(std::abs(y.data()[i] - want[i]) < 1e-10);
    }
  }
}

TEST_CASE("conv2d error paths") {
  auto x = Tensor::zeros({1, 2, 2});
  CHECK_THROWS_AS(conv2d(x, Tensor::zeros({1, 1, 2, 2}), 1, 0), Error);  // even kernel
  CHECK_THROWS_AS(conv2d(x, Tensor::zeros({1, 1, 5, 5}), 1, 0), Error);  // empty output
}

TEST_CASE("bilinear_sample on-lattice and midpoint") {
  auto f = Tensor::from_data({1, 2, 2}, {0.0, 0.0, 4.0, 4.0});
  CHECK(bilinear_sample(f, 1.0, 0.0).item() == 0.0);
  CHECK(bilinear_sample(f, 0.5, 0.5).item() == doctest::Approx(2.0).epsilon(1e-15));
  // clamp to border
  CHECK(bilinear_sample(f, -3.0, 5.0).item() == 4.0);
}

TEST_CASE("bilinear_sample matches 4-term closed form") {
  Rng rng(17);
  auto f = random_tensor({2, 5, 6}, rng, false);
  for (int trial = 0; trial < 10; ++trial) {
    double u = rng.uniform(0.0, 5.0);
    double v = rng.uniform(0.0, 4.0);
    auto s = bilinear_sample(f, u, v);
    int64_t x0 = static_cast<int64_t>(std::floor(u)), y0 = static_cast<int64_t>(std::floor(v));
    int64_t x1 = std::min<int64_t>(x0 + 1, 5), y1 = std::min<int64_t>(y0 + 1, 4);
    double fx = u - static_cast<double>(x0), fy = v - static_cast<double>(y0);
    for (int64_t c = 0; c < 2; ++c) {
      auto at = [&](int64_t y, int64_t x) { return f.data()[static_cast<size_t>((c * 5 + y) * 6 + x)]; };
      double want = (1 - fx) * (1 - fy) * at(y0, x0) + fx * (1 - fy) * at(y0, x1) +
                    (1 - fx) * fy * at(y1, x0) + fx * fy * at(y1, x1);
      CHECK(std::abs(s.data()[static_cast<size_t>(c)] - want) < 1e-12);
    }
  }
}

TEST_CASE("stopgrad value equality and zero gradient") {
  Rng rng(19);
  auto x = random_tensor({3}, rng, true);
  auto sg = stopgrad(x);
  for (size_t i = 0; i < 3; ++i) CHECK(sg.data()[i] == x.data()[i]);

  {
    Tape tape;
    auto loss = sum(stopgrad(x));
    tape.backward(loss);
    CHECK_FALSE(x.has_grad());
  }
  {
    Tape tape;
    auto loss = sum(mul(x, stopgrad(x)));
    tape.backward(loss);
    REQUIRE(x.has_grad());
    for (size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == doctest::Approx(x.data()[i]).epsilon(1e-14));
    x.clear_grad();
  }
  // Finite differences cannot see through a live stopgrad (they would measure
  // the identity path), so the oracle freezes the blocked branch: the analytic
  // gradient of x * stopgrad(x) must match d/dx of x * const.
  auto frozen = stopgrad(x);
  auto f = [&]() { return sum(mul(x, frozen)); };
  std::vector<Tensor> params{x};
  CHECK(grad_check(f, params) < 1e-6);
}

TEST_CASE("backward populates gradients") {
  auto x = Tensor::from_data({3}, {5.0, -1.0, 2.0}, true);
  {
    Tape tape;
    auto loss = sum(x);
    tape.backward(loss);
    REQUIRE(x.has_grad());
    for (size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == 1.0);
    x.clear_grad();
  }
  auto y = Tensor::from_data({2}, {1.0, 2.0}, true);
  {
    Tape tape;
    auto loss = sum(mul(y, y));
    tape.backward(loss);
    CHECK(y.grad()[0] == doctest::Approx(2.0));
    CHECK(y.grad()[1] == doctest::Approx(4.0));
    y.clear_grad();
  }
}

TEST_CASE("backward errors: non-scalar loss and double backward") {
  auto x = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tape tape;
  auto y = mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), Error);
  tape.reset();
  auto loss = sum(mul(x, x));
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), Error);
  tape.reset();
  x.clear_grad();
  // after reset the tape is usable again
  auto loss2 = sum(x);
  tape.backward(loss2);
  CHECK(x.has_grad());
}

TEST_CASE("tensors off the loss path keep no gradient") {
  auto x = Tensor::from_data({2}, {1.0, 2.0}, true);
  auto y = Tensor::from_data({2}, {3.0, 4.0}, true);
  Tape tape;
  auto unused = mul(y, y);
  auto loss = sum(x);
  tape.backward(loss);
  CHECK(x.has_grad());
  CHECK_FALSE(y.has_grad());
}

TEST_CASE("grad_check: quadratic is exact to roundoff") {
  auto x = Tensor::from_data({3}, {0.5, -1.25, 2.0}, true);
  auto f = [&]() { return sum(mul(x, x)); };
  std::vector<Tensor> params{x};
  CHECK(grad_check(f, params) < 1e-10);
}

TEST_CASE("grad_check: softmax attention block") {
  Rng rng(23);
  auto q = random_tensor({2, 4}, rng, true);
  auto k = random_tensor({3, 4}, rng, true);
  auto v = random_tensor({3, 4}, rng, true);
  auto f = [&]() {
    auto att = softmax(scale(matmul(q, transpose2d(k)), 0.5));
    auto out = matmul(att, v);
    return mean(mul(out, out));
  };
  std::vector<Tensor> params{q, k, v};
  CHECK(grad_check(f, params) < 1e-6);
}

TEST_CASE("all primitives pass finite-difference checks on random inputs") {
  Rng rng(29);
  auto check = [&](const char* name, const std::function<Tensor()>& f, std::vector<Tensor> params) {
    double err = grad_check(f, params);
    INFO(name << " max relative error " << err);
    CHECK(err < 1e-6);
  };

  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({3, 4}, rng);
  check("add", [&]() { return mean(mul(add(a, b), add(a, b))); }, {a, b});
  check("sub", [&]() { return mean(mul(sub(a, b), sub(a, b))); }, {a, b});
  check("mul", [&]() { return mean(mul(a, b)); }, {a, b});
  check("scale", [&]() { return sum(scale(a, -2.5)); }, {a});
  check("relu_smooth_region", [&]() { return sum(relu(add_scalar(mul(a, a), 0.1))); }, {a});
  check("sigmoid", [&]() { return mean(sigmoid(a)); }, {a});
  check("exp", [&]() { return mean(exp_op(a)); }, {a});
  check("log", [&]() { return mean(log_op(add_scalar(mul(a, a), 1.0))); }, {a});

  auto m = random_tensor({4, 3}, rng);
  auto n = random_tensor({3, 5}, rng);
  check("matmul", [&]() { return mean(mul(matmul(m, n), matmul(m, n))); }, {m, n});
  check("transpose", [&]() { return mean(mul(transpose2d(m), transpose2d(m))); }, {m});
  check("softmax", [&]() { return mean(mul(softmax(m), softmax(m))); }, {m});
  check("l2_normalize", [&]() { return mean(mul(l2_normalize(m, 1), add_scalar(m, 1.0))); }, {m});
  check("layer_norm", [&]() { return mean(mul(layer_norm_rows(m), add_scalar(m, 0.5))); }, {m});

  auto c1 = random_tensor({2, 3}, rng);
  auto c2 = random_tensor({2, 3}, rng);
  check("concat",
        [&]() {
          std::vector<Tensor> xs{c1, c2};
          auto c = concat(xs, 0);
          return mean(mul(c, c));
        },
        {c1, c2});
  check("slice", [&]() { return mean(mul(slice(m, 0, 1, 3), slice(m, 0, 1, 3))); }, {m});
  check("reshape", [&]() { return mean(mul(reshape(m, {12}), reshape(m, {12}))); }, {m});
  check("row_bias", [&]() { return mean(mul(add_row_bias(m, Tensor::from_data({3}, {1, 2, 3})),
                                            add_row_bias(m, Tensor::from_data({3}, {1, 2, 3})))); },
        {m});

  auto x = random_tensor({2, 5, 5}, rng);
  auto w = random_tensor({3, 2, 3, 3}, rng);
  check("conv2d", [&]() { return mean(mul(conv2d(x, w, 2, 1), conv2d(x, w, 2, 1))); }, {x, w});
  auto cb = random_tensor({2}, rng);
  check("channel_bias", [&]() { return mean(mul(add_channel_bias(x, cb), x)); }, {x, cb});
  check("bilinear", [&]() { return sum(bilinear_sample(x, 1.3, 2.7)); }, {x});

  auto pred = random_tensor({4}, rng);
  auto tgt = random_tensor({4}, rng, false);
  check("smooth_l1", [&]() { return mean(smooth_l1(pred, scale(tgt, 3.0))); }, {pred});
  auto logits = random_tensor({4}, rng);
  auto targets01 = Tensor::from_data({4}, {1, 0, 1, 0});
  check("bce", [&]() { return mean(bce_with_logits(logits, targets01)); }, {logits});
  auto cls = random_tensor({3, 4}, rng);
  check("cross_entropy", [&]() { return mean(cross_entropy_rows(cls, {0, 3, 2})); }, {cls});

  auto feats = random_tensor({5, 3}, rng);
  std::vector<std::array<int64_t, 2>> cells{{0, 0}, {1, 1}, {0, 0}, {2, 1}, {1, 0}};
  check("scatter_max_bev",
        [&]() { return mean(mul(scatter_max_bev(feats, cells, 3, 2), scatter_max_bev(feats, cells, 3, 2))); },
        {feats});
  auto bev = random_tensor({3, 3, 2}, rng);
  check("gather_cells", [&]() { return mean(mul(gather_cells(bev, cells), gather_cells(bev, cells))); },
        {bev});
  std::vector<std::vector<int64_t>> groups{{0, 2}, {}, {1, 3, 4}};
  check("group_rows_max", [&]() { return mean(mul(group_rows_max(feats, groups, 3),
                                                  group_rows_max(feats, groups, 3))); },
        {feats});
}

TEST_CASE("serialization round trip preserves bits") {
  Rng rng(31);
  auto t = random_tensor({3, 2, 4}, rng, false);
  auto bytes = tensor_to_bytes(t);
  CHECK(bytes[0] == 'A');
  CHECK(bytes[3] == 'N');
  auto u = tensor_from_bytes(bytes);
  REQUIRE(u.shape() == t.shape());
  for (size_t i = 0; i < t.data().size(); ++i) CHECK(u.data()[i] == t.data()[i]);

  auto path = std::filesystem::temp_directory_path() / "vf_test_tensor.aatn";
  save_tensor(t, path.string());
  auto v = load_tensor(path.string());
  for (size_t i = 0; i < t.data().size(); ++i) CHECK(v.data()[i] == t.data()[i]);
  std::filesystem::remove(path);

  bytes[1] = 'X';
  CHECK_THROWS_AS(tensor_from_bytes(bytes), Error);
  auto good = tensor_to_bytes(t);
  good.pop_back();
  CHECK_THROWS_AS(tensor_from_bytes(good), Error);
}

TEST_CASE("dropout scales kept entries and zeroes dropped ones") {
  Rng rng(37);
  auto x = Tensor::full({1000}, 1.0);
  auto y = dropout(x, 0.25, rng);
  int dropped = 0;
  for (double v : y.data()) {
    if (v == 0.0) {
      ++dropped;
    } else {
      CHECK(v == doctest::Approx(1.0 / 0.75));
    }
  }
  CHECK(dropped > 150);
  CHECK(dropped < 350);
}
