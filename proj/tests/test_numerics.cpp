#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "egnlq/gradcheck.hpp"
#include "egnlq/ops.hpp"
#include "egnlq/ref_kernels.hpp"

using egnlq::GradCheckReport;
using egnlq::Mask;
using egnlq::Tensor;
namespace ops = egnlq::ops;
namespace ref = egnlq::ref;

namespace {

template <class Real>
Tensor<Real> rand_tensor(std::vector<int> shape, std::mt19937_64& rng, bool rg = false) {
  return Tensor<Real>::randn(std::move(shape), rng, Real(1), rg);
}

}  // namespace

TEST_CASE("matmul: identity and scalar cases") {
  auto a = Tensor<float>::from({2, 2}, {1, 2, 3, 4});
  auto eye = Tensor<float>::from({2, 2}, {1, 0, 0, 1});
  auto out = ops::matmul(a, eye);
  for (int i = 0; i < 4; ++i) CHECK(out.values()[i] == doctest::Approx(a.values()[i]));

  auto x = Tensor<float>::from({1, 1}, {2});
  auto y = Tensor<float>::from({1, 1}, {3});
  CHECK(ops::matmul(x, y).at(0, 0) == doctest::Approx(6.0f));
}

TEST_CASE("matmul: matches triple-loop oracle") {
  std::mt19937_64 rng(7);
  for (int it = 0; it < 5; ++it) {
    auto a = rand_tensor<float>({3, 4}, rng);
    auto b = rand_tensor<float>({4, 2}, rng);
    auto out = ops::matmul(a, b);
    auto expect = ref::matmul(a.values(), b.values(), 3, 4, 2);
    for (std::size_t i = 0; i < expect.size(); ++i)
      CHECK(out.values()[i] == doctest::Approx(expect[i]).epsilon(1e-6));
  }
}

TEST_CASE("matmul: shape mismatch names both shapes") {
  auto a = Tensor<float>::zeros({2, 3});
  auto b = Tensor<float>::zeros({4, 2});
  CHECK_THROWS_WITH_AS(ops::matmul(a, b), doctest::Contains("[2x3]"), std::invalid_argument);
}

TEST_CASE("softmax_lastdim: uniform, stability, hand values") {
  auto u = ops::softmax_lastdim(Tensor<float>::from({1, 3}, {0, 0, 0}));
  for (int j = 0; j < 3; ++j) CHECK(u.at(0, j) == doctest::Approx(1.0f / 3.0f));

  auto s = ops::softmax_lastdim(Tensor<float>::from({1, 2}, {1000, 0}));
  CHECK(s.at(0, 0) == doctest::Approx(1.0f));
  CHECK(s.at(0, 1) == doctest::Approx(0.0f));
  CHECK(s.all_finite());

  auto h = ops::softmax_lastdim(Tensor<float>::from({1, 3}, {1, 2, 3}));
  CHECK(h.at(0, 0) == doctest::Approx(0.0900306f).epsilon(1e-4));
  CHECK(h.at(0, 1) == doctest::Approx(0.2447285f).epsilon(1e-4));
  CHECK(h.at(0, 2) == doctest::Approx(0.6652410f).epsilon(1e-4));
}

TEST_CASE("softmax_lastdim: masked entries exactly zero, valid entries sum to 1") {
  std::mt19937_64 rng(11);
  for (int it = 0; it < 5; ++it) {
    auto x = rand_tensor<float>({4, 6}, rng);
    Mask mask = {1, 0, 1, 1, 0, 1};
    auto y = ops::softmax_lastdim(x, mask);
    for (int r = 0; r < 4; ++r) {
      float s = 0;
      for (int j = 0; j < 6; ++j) {
        if (!mask[j]) CHECK(y.at(r, j) == 0.0f);
        s += y.at(r, j);
      }
      CHECK(s == doctest::Approx(1.0f).epsilon(1e-6));
    }
  }
  Mask all_masked = {0, 0, 0};
  CHECK_THROWS_AS(ops::softmax_lastdim(Tensor<float>::zeros({2, 3}), all_masked),
                  std::invalid_argument);
}

TEST_CASE("layer_norm: constant row, two-point row, zero gain") {
  auto g1 = Tensor<float>::full({4}, 1.0f);
  auto b0 = Tensor<float>::zeros({4});
  auto c = ops::layer_norm(Tensor<float>::full({2, 4}, 5.0f), g1, b0, 1e-5f);
  for (auto v : c.values()) CHECK(v == doctest::Approx(0.0f));

  auto g2 = Tensor<float>::full({2}, 1.0f);
  auto z2 = Tensor<float>::zeros({2});
  auto two = ops::layer_norm(Tensor<float>::from({1, 2}, {1, 3}), g2, z2, 1e-9f);
  CHECK(two.at(0, 0) == doctest::Approx(-1.0f).epsilon(1e-3));
  CHECK(two.at(0, 1) == doctest::Approx(1.0f).epsilon(1e-3));

  std::mt19937_64 rng(3);
  auto x = rand_tensor<float>({3, 4}, rng);
  auto bias = Tensor<float>::from({4}, {1, 2, 3, 4});
  auto out = ops::layer_norm(x, Tensor<float>::zeros({4}), bias, 1e-5f);
  for (int r = 0; r < 3; ++r)
    for (int j = 0; j < 4; ++j) CHECK(out.at(r, j) == doctest::Approx(bias.at(j)));
}

TEST_CASE("conv1d: identity kernel, hand case, oracle") {
  // kernel [1], stride 1, depthwise: identity
  auto x = Tensor<float>::from({4, 1}, {1, 2, 3, 4});
  auto w1 = Tensor<float>::from({1, 1}, {1});
  auto out = ops::conv1d(x, w1, Tensor<float>::zeros({1}), 1, true);
  for (int i = 0; i < 4; ++i) CHECK(out.at(i, 0) == doctest::Approx(x.at(i, 0)));

  // [1,2,3,4], kernel [1,1,1], stride 2, depthwise -> [3, 9]
  auto w3 = Tensor<float>::from({1, 3}, {1, 1, 1});
  auto down = ops::conv1d(x, w3, Tensor<float>::zeros({1}), 2, true);
  CHECK(down.dim(0) == 2);
  CHECK(down.at(0, 0) == doctest::Approx(3.0f));
  CHECK(down.at(1, 0) == doctest::Approx(9.0f));

  std::mt19937_64 rng(13);
  for (int it = 0; it < 5; ++it) {
    const int t = 9, ci = 3, co = 2, k = 3;
    auto xr = rand_tensor<float>({t, ci}, rng);
    auto wr = rand_tensor<float>({co, ci, k}, rng);
    auto br = rand_tensor<float>({co}, rng);
    Mask mask(t, 1);
    mask[7] = mask[8] = 0;
    for (int stride : {1, 2}) {
      auto got = ops::conv1d(xr, wr, br, stride, false, mask);
      auto expect =
          ref::conv1d(xr.values(), wr.values(), br.values(), t, ci, co, k, stride, false, mask);
      REQUIRE(got.numel() == expect.size());
      for (std::size_t i = 0; i < expect.size(); ++i)
        CHECK(got.values()[i] == doctest::Approx(expect[i]).epsilon(1e-6));
    }
  }
}

TEST_CASE("windowed_attention: full-window equals dense oracle") {
  std::mt19937_64 rng(17);
  for (int it = 0; it < 5; ++it) {
    const int t = 6, h = 2, d = 4;
    auto q = rand_tensor<float>({t, h, d}, rng);
    auto k = rand_tensor<float>({t, h, d}, rng);
    auto v = rand_tensor<float>({t, h, d}, rng);
    Mask mask(t, 1);
    mask[5] = 0;
    const int window = 2 * t - 1;
    auto got = ops::windowed_attention(q, k, v, window, mask);
    auto expect = ref::windowed_attention(q.values(), k.values(), v.values(), t, h, d, window, mask);
    for (std::size_t i = 0; i < expect.size(); ++i)
      CHECK(got.values()[i] == doctest::Approx(expect[i]).epsilon(1e-5));
  }
}

TEST_CASE("windowed_attention: window=1 returns v, window=3 locality") {
  std::mt19937_64 rng(19);
  const int t = 4, h = 1, d = 2;
  auto q = rand_tensor<float>({t, h, d}, rng);
  auto k = rand_tensor<float>({t, h, d}, rng);
  auto v = rand_tensor<float>({t, h, d}, rng);
  auto out1 = ops::windowed_attention(q, k, v, 1);
  for (std::size_t i = 0; i < v.numel(); ++i)
    CHECK(out1.values()[i] == doctest::Approx(v.values()[i]));

  // position 0 with window 3 attends {0,1} only: perturbing v[2] and v[3]
  // leaves out[0] unchanged
  auto base = ops::windowed_attention(q, k, v, 3);
  auto v2 = Tensor<float>::from({t, h, d}, v.values());
  v2.at(2, 0, 0) += 10.0f;
  v2.at(3, 0, 1) -= 10.0f;
  auto pert = ops::windowed_attention(q, k, v2, 3);
  for (int e = 0; e < d; ++e) CHECK(base.at(0, 0, e) == pert.at(0, 0, e));
  CHECK(base.at(2, 0, 0) != pert.at(2, 0, 0));

  CHECK_THROWS_AS(ops::windowed_attention(q, k, v, 0), std::invalid_argument);
  CHECK_THROWS_AS(ops::windowed_attention(q, k, v, 4), std::invalid_argument);
}

TEST_CASE("grad_check: x squared at x=3") {
  auto fn = [](const std::vector<Tensor<double>>& in) { return ops::mul(in[0], in[0]); };
  auto x = Tensor<double>::from({1}, {3.0}, true);
  auto report = egnlq::grad_check("square", fn, {x});
  CHECK(report.ok(1e-8));

  // and the analytic value itself: d(x^2)/dx = 6
  auto x2 = Tensor<double>::from({1}, {3.0}, true);
  auto y = ops::mul(x2, x2);
  y.backward();
  CHECK(x2.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("grad_check: every differentiable op under 1e-6 on 5 random instances") {
  std::mt19937_64 rng(23);
  for (int it = 0; it < 5; ++it) {
    const std::uint64_t seed = 100 + it;

    auto a = rand_tensor<double>({3, 4}, rng, true);
    auto b = rand_tensor<double>({4, 2}, rng, true);
    auto r1 = egnlq::grad_check(
        "matmul", [](const auto& in) { return ops::matmul(in[0], in[1]); }, {a, b}, 16, seed);
    CHECK_MESSAGE(r1.ok(1e-6), r1.op, " err=", r1.max_rel_error);

    auto c = rand_tensor<double>({3, 4}, rng, true);
    auto d = rand_tensor<double>({5, 4}, rng, true);
    auto r2 = egnlq::grad_check(
        "matmul_nt", [](const auto& in) { return ops::matmul_nt(in[0], in[1]); }, {c, d}, 16, seed);
    CHECK_MESSAGE(r2.ok(1e-6), r2.op, " err=", r2.max_rel_error);

    auto x = rand_tensor<double>({4, 8}, rng, true);
    auto gain = rand_tensor<double>({8}, rng, true);
    auto bias = rand_tensor<double>({8}, rng, true);
    auto r3 = egnlq::grad_check(
        "layer_norm",
        [](const auto& in) { return ops::layer_norm(in[0], in[1], in[2], 1e-5); },
        {x, gain, bias}, 24, seed);
    CHECK_MESSAGE(r3.ok(1e-6), r3.op, " err=", r3.max_rel_error);

    Mask smask = {1, 1, 0, 1, 1, 1};
    auto sx = rand_tensor<double>({3, 6}, rng, true);
    auto r4 = egnlq::grad_check(
        "softmax_lastdim",
        [smask](const auto& in) { return ops::softmax_lastdim(in[0], smask); }, {sx}, 18, seed);
    CHECK_MESSAGE(r4.ok(1e-6), r4.op, " err=", r4.max_rel_error);

    Mask cmask(9, 1);
    cmask[8] = 0;
    auto cx = rand_tensor<double>({9, 3}, rng, true);
    auto cw = rand_tensor<double>({2, 3, 3}, rng, true);
    auto cb = rand_tensor<double>({2}, rng, true);
    for (int stride : {1, 2}) {
      auto r5 = egnlq::grad_check(
          "conv1d",
          [stride, cmask](const auto& in) {
            return ops::conv1d(in[0], in[1], in[2], stride, false, cmask);
          },
          {cx, cw, cb}, 16, seed);
      CHECK_MESSAGE(r5.ok(1e-6), r5.op, " stride=", stride, " err=", r5.max_rel_error);
    }

    auto dx = rand_tensor<double>({8, 3}, rng, true);
    auto dw = rand_tensor<double>({3, 3}, rng, true);
    auto db = rand_tensor<double>({3}, rng, true);
    auto r6 = egnlq::grad_check(
        "conv1d_depthwise",
        [](const auto& in) { return ops::conv1d(in[0], in[1], in[2], 2, true); }, {dx, dw, db},
        16, seed);
    CHECK_MESSAGE(r6.ok(1e-6), r6.op, " err=", r6.max_rel_error);

    Mask amask(6, 1);
    amask[4] = 0;
    auto aq = rand_tensor<double>({6, 2, 4}, rng, true);
    auto ak = rand_tensor<double>({6, 2, 4}, rng, true);
    auto av = rand_tensor<double>({6, 2, 4}, rng, true);
    auto r7 = egnlq::grad_check(
        "windowed_attention",
        [amask](const auto& in) {
          return ops::windowed_attention(in[0], in[1], in[2], 3, amask);
        },
        {aq, ak, av}, 20, seed);
    CHECK_MESSAGE(r7.ok(1e-6), r7.op, " err=", r7.max_rel_error);

    auto gx = rand_tensor<double>({4, 5}, rng, true);
    auto r8 = egnlq::grad_check(
        "gelu", [](const auto& in) { return ops::gelu(in[0]); }, {gx}, 16, seed);
    CHECK_MESSAGE(r8.ok(1e-6), r8.op, " err=", r8.max_rel_error);

    auto qx = rand_tensor<double>({3, 3}, rng, true);
    for (auto& v : qx.values()) v = std::abs(v) + 0.1;  // keep away from the clamp kink
    auto r9 = egnlq::grad_check(
        "sqrt_clamp", [](const auto& in) { return ops::sqrt_clamp(in[0], 1e-5); }, {qx}, 9, seed);
    CHECK_MESSAGE(r9.ok(1e-6), r9.op, " err=", r9.max_rel_error);

    Mask mmask = {1, 0, 1, 1};
    auto mx = rand_tensor<double>({4, 3}, rng, true);
    auto r10 = egnlq::grad_check(
        "masked_mean_rows",
        [mmask](const auto& in) { return ops::masked_mean_rows(in[0], mmask); }, {mx}, 12, seed);
    CHECK_MESSAGE(r10.ok(1e-6), r10.op, " err=", r10.max_rel_error);
  }
}

TEST_CASE("determinism: identical inputs give bitwise identical outputs") {
  std::mt19937_64 rng(31);
  auto a = rand_tensor<float>({5, 7}, rng);
  auto b = rand_tensor<float>({7, 4}, rng);
  auto o1 = ops::matmul(a, b);
  auto o2 = ops::matmul(a, b);
  CHECK(o1.values() == o2.values());

  auto q = rand_tensor<float>({8, 2, 4}, rng);
  auto w1 = ops::windowed_attention(q, q, q, 5);
  auto w2 = ops::windowed_attention(q, q, q, 5);
  CHECK(w1.values() == w2.values());
}
