#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "egnlq/model.hpp"
#include "egnlq/points.hpp"

using egnlq::GroundingModel;
using egnlq::Mask;
using egnlq::ModelConfig;
using egnlq::Tensor;
namespace ops = egnlq::ops;

namespace {

ModelConfig small_config(int input_dim = 8, int text_dim = 6) {
  ModelConfig cfg;
  cfg.embed_dim = 16;
  cfg.num_heads = 4;
  cfg.local_window = 5;
  cfg.mlp_expansion = 2;
  cfg.input_dim = input_dim;
  cfg.text_dim = text_dim;
  return cfg;
}

template <class Real>
Tensor<Real> rand_tensor(std::vector<int> shape, std::mt19937_64& rng) {
  return Tensor<Real>::randn(std::move(shape), rng);
}

}  // namespace

TEST_CASE("pyramid shape law for several input lengths") {
  egnlq::NoGradGuard ng;
  GroundingModel<float> model(small_config(), 3);
  std::mt19937_64 rng(11);
  for (int t0 : {32, 64, 224}) {
    auto fwd = model.forward(rand_tensor<float>({t0, 8}, rng), {},
                             rand_tensor<float>({4, 6}, rng), {});
    REQUIRE(fwd.pyramid.size() == 6);
    int expect_stride = 1;
    for (int l = 0; l < 6; ++l) {
      CHECK(fwd.pyramid[l].feats.dim(0) == t0 / expect_stride);
      CHECK(fwd.pyramid[l].stride == expect_stride);
      CHECK(static_cast<int>(fwd.pyramid[l].mask.size()) == t0 / expect_stride);
      expect_stride *= 2;
    }
  }
}

TEST_CASE("point count for T0=64 is the sum of level lengths") {
  egnlq::NoGradGuard ng;
  GroundingModel<float> model(small_config(), 3);
  std::mt19937_64 rng(12);
  auto fwd = model.forward(rand_tensor<float>({64, 8}, rng), {},
                           rand_tensor<float>({4, 6}, rng), {});
  std::vector<int> lengths, strides;
  std::vector<Mask> masks;
  for (const auto& lvl : fwd.pyramid) {
    lengths.push_back(lvl.feats.dim(0));
    strides.push_back(lvl.stride);
    masks.push_back(lvl.mask);
  }
  CHECK(egnlq::generate_points(lengths, masks, strides, 1.0).size() == 126);
}

TEST_CASE("embed_video pads to the next multiple of 32") {
  egnlq::NoGradGuard ng;
  GroundingModel<float> model(small_config(), 3);
  std::mt19937_64 rng(13);

  Mask mask;
  auto out = model.embed_video(rand_tensor<float>({50, 8}, rng), mask);
  CHECK(out.dim(0) == 64);
  CHECK(out.dim(1) == 16);
  REQUIRE(mask.size() == 64);
  for (int t = 0; t < 50; ++t) CHECK(mask[t] == 1);
  for (int t = 50; t < 64; ++t) CHECK(mask[t] == 0);

  Mask mask64;
  auto exact = model.embed_video(rand_tensor<float>({64, 8}, rng), mask64);
  CHECK(exact.dim(0) == 64);

  Mask mz;
  auto zero_out = model.embed_video(Tensor<float>::zeros({40, 8}), mz);
  CHECK(zero_out.all_finite());

  CHECK_THROWS(model.embed_video(rand_tensor<float>({40, 5}, rng), mz));
}

TEST_CASE("encode_text preserves length and pools over valid tokens") {
  egnlq::NoGradGuard ng;
  GroundingModel<float> model(small_config(), 3);
  std::mt19937_64 rng(14);

  for (int l : {1, 3, 8, 17}) {
    auto out = model.encode_text(rand_tensor<float>({l, 6}, rng), {});
    CHECK(out.tokens.dim(0) == l);
    CHECK(out.tokens.dim(1) == 16);
  }

  // single token: the pooled vector is that token
  auto single = model.encode_text(rand_tensor<float>({1, 6}, rng), {});
  for (int j = 0; j < 16; ++j)
    CHECK(single.pooled.at(j) == doctest::Approx(single.tokens.at(0, j)));

  // 8 tokens, 3 padded: pooled averages only the 5 valid ones
  Mask tmask = {1, 1, 0, 1, 0, 1, 0, 1};
  auto masked = model.encode_text(rand_tensor<float>({8, 6}, rng), tmask);
  for (int j = 0; j < 16; ++j) {
    double mean = 0;
    for (int t = 0; t < 8; ++t)
      if (tmask[t]) mean += masked.tokens.at(t, j);
    mean /= 5.0;
    CHECK(masked.pooled.at(j) == doctest::Approx(mean).epsilon(1e-5));
  }

  Mask all_off(4, 0);
  CHECK_THROWS(model.encode_text(rand_tensor<float>({4, 6}, rng), all_off));
}

TEST_CASE("ada_attn_fuse: single-token closed form at every position") {
  egnlq::NoGradGuard ng;
  auto cfg = small_config();
  GroundingModel<double> model(cfg, 5);
  std::mt19937_64 rng(15);
  const int t_len = 12, c = cfg.embed_dim, heads = cfg.num_heads, d = c / heads;

  auto video = rand_tensor<double>({t_len, c}, rng);
  auto text = model.encode_text(rand_tensor<double>({1, 6}, rng), {});
  auto fused = model.ada_attn_fuse(video, text);

  // with one token A=1, M=V, Var=0, S=sqrt(eps)
  auto& ps = model.params();
  auto v = ops::linear(text.tokens, ps.at("fuse.v.w"), ps.at("fuse.v.b"));
  const double s = std::sqrt(cfg.fusion_eps);
  Tensor<double> expected_heads = Tensor<double>::zeros({t_len, c});
  for (int t = 0; t < t_len; ++t)
    for (int h = 0; h < heads; ++h) {
      double mean = 0, var = 0;
      for (int e = 0; e < d; ++e) mean += video.at(t, h * d + e);
      mean /= d;
      for (int e = 0; e < d; ++e) {
        const double dv = video.at(t, h * d + e) - mean;
        var += dv * dv;
      }
      var /= d;
      const double inv = 1.0 / std::sqrt(var + cfg.fusion_eps);
      for (int e = 0; e < d; ++e)
        expected_heads.at(t, h * d + e) =
            s * (video.at(t, h * d + e) - mean) * inv + v.at(0, h * d + e);
    }
  auto expected =
      ops::add(video, ops::linear(expected_heads, ps.at("fuse.out.w"), ps.at("fuse.out.b")));
  for (int t = 0; t < t_len; ++t)
    for (int j = 0; j < c; ++j)
      CHECK(fused.at(t, j) == doctest::Approx(expected.at(t, j)).epsilon(1e-5));
}

TEST_CASE("ada_attn_fuse: variance clamp keeps slightly negative variance finite") {
  // the clamp itself: sqrt(max(var,0)+eps) on a tiny negative input
  auto v = Tensor<double>::from({1, 1}, {-1e-9});
  auto s = ops::sqrt_clamp(v, 1e-5);
  CHECK(s.at(0, 0) == doctest::Approx(std::sqrt(1e-5)));
  CHECK(s.all_finite());
}

TEST_CASE("ada_attn_fuse matches a dense per-position oracle") {
  egnlq::NoGradGuard ng;
  auto cfg = small_config();
  GroundingModel<double> model(cfg, 7);
  std::mt19937_64 rng(16);
  const int t_len = 9, l_len = 5, c = cfg.embed_dim, heads = cfg.num_heads, d = c / heads;

  auto video = rand_tensor<double>({t_len, c}, rng);
  Mask tmask = {1, 1, 0, 1, 1};
  auto text = model.encode_text(rand_tensor<double>({l_len, 6}, rng), tmask);
  auto fused = model.ada_attn_fuse(video, text);

  auto& ps = model.params();
  auto q = ops::linear(video, ps.at("fuse.q.w"), ps.at("fuse.q.b"));
  auto k = ops::linear(text.tokens, ps.at("fuse.k.w"), ps.at("fuse.k.b"));
  auto v = ops::linear(text.tokens, ps.at("fuse.v.w"), ps.at("fuse.v.b"));

  Tensor<double> oracle_heads = Tensor<double>::zeros({t_len, c});
  for (int t = 0; t < t_len; ++t)
    for (int h = 0; h < heads; ++h) {
      std::vector<double> a(l_len, 0.0);
      double z = 0;
      for (int l = 0; l < l_len; ++l) {
        if (!tmask[l]) continue;
        double score = 0;
        for (int e = 0; e < d; ++e) score += q.at(t, h * d + e) * k.at(l, h * d + e);
        a[l] = std::exp(score / std::sqrt(static_cast<double>(d)));
        z += a[l];
      }
      for (auto& av : a) av /= z;
      double mean_x = 0, var_x = 0;
      for (int e = 0; e < d; ++e) mean_x += video.at(t, h * d + e);
      mean_x /= d;
      for (int e = 0; e < d; ++e) {
        const double dv = video.at(t, h * d + e) - mean_x;
        var_x += dv * dv;
      }
      var_x /= d;
      const double inv = 1.0 / std::sqrt(var_x + cfg.fusion_eps);
      for (int e = 0; e < d; ++e) {
        double m = 0, second = 0;
        for (int l = 0; l < l_len; ++l) {
          m += a[l] * v.at(l, h * d + e);
          second += a[l] * v.at(l, h * d + e) * v.at(l, h * d + e);
        }
        const double var = second - m * m;
        const double s = std::sqrt(std::max(var, 0.0) + cfg.fusion_eps);
        oracle_heads.at(t, h * d + e) = s * (video.at(t, h * d + e) - mean_x) * inv + m;
      }
    }
  auto oracle =
      ops::add(video, ops::linear(oracle_heads, ps.at("fuse.out.w"), ps.at("fuse.out.b")));
  for (int t = 0; t < t_len; ++t)
    for (int j = 0; j < c; ++j)
      CHECK(fused.at(t, j) == doctest::Approx(oracle.at(t, j)).epsilon(1e-5));
}

TEST_CASE("heads: non-negative offsets, preserved lengths, per-level independence") {
  egnlq::NoGradGuard ng;
  GroundingModel<float> model(small_config(), 9);
  std::mt19937_64 rng(17);
  auto fwd = model.forward(rand_tensor<float>({64, 8}, rng), {},
                           rand_tensor<float>({4, 6}, rng), {});
  REQUIRE(fwd.heads.cls_logits.size() == 6);
  for (int l = 0; l < 6; ++l) {
    CHECK(fwd.heads.cls_logits[l].dim(0) == fwd.pyramid[l].feats.dim(0));
    CHECK(fwd.heads.offsets[l].dim(0) == fwd.pyramid[l].feats.dim(0));
    for (float o : fwd.heads.offsets[l].values()) CHECK(o >= 0.0f);
  }

  // perturbing level 5 must not move level 0 outputs
  std::vector<Mask> masks;
  for (const auto& lvl : fwd.pyramid) masks.push_back(lvl.mask);
  auto fused2 = fwd.fused;
  for (auto& v : fused2[5].values()) v += 1.5f;
  auto heads2 = model.run_heads(fused2, masks);
  for (std::size_t i = 0; i < fwd.heads.cls_logits[0].numel(); ++i)
    CHECK(heads2.cls_logits[0].values()[i] == fwd.heads.cls_logits[0].values()[i]);
  bool changed = false;
  for (std::size_t i = 0; i < fwd.heads.cls_logits[5].numel(); ++i)
    changed = changed || heads2.cls_logits[5].values()[i] != fwd.heads.cls_logits[5].values()[i];
  CHECK(changed);
}

TEST_CASE("interior translation equivariance under a 32-step shift") {
  egnlq::NoGradGuard ng;
  GroundingModel<float> model(small_config(), 21);
  std::mt19937_64 rng(18);
  auto base = rand_tensor<float>({288, 8}, rng);
  auto text = rand_tensor<float>({4, 6}, rng);

  auto slice_rows = [&](int lo, int n) {
    auto out = Tensor<float>::zeros({n, 8});
    for (int t = 0; t < n; ++t)
      for (int j = 0; j < 8; ++j) out.at(t, j) = base.at(lo + t, j);
    return out;
  };
  auto fa = model.forward(slice_rows(0, 256), {}, text, {});
  auto fb = model.forward(slice_rows(32, 256), {}, text, {});

  // per-level receptive-field radius in base units (window 5) plus slack
  const int margins[6] = {16, 24, 40, 64, 128, 224};
  int checked = 0;
  for (int l = 0; l < 6; ++l) {
    const int stride = 1 << l;
    const int len = 256 / stride;
    const int shift = 32 / stride;
    const int lo = (margins[l] + stride - 1) / stride;
    for (int p = lo; p + shift < len - lo; ++p) {
      CHECK(std::abs(fb.heads.cls_logits[l].at(p) - fa.heads.cls_logits[l].at(p + shift)) <=
            1e-4);
      for (int j = 0; j < 2; ++j)
        CHECK(std::abs(fb.heads.offsets[l].at(p, j) - fa.heads.offsets[l].at(p + shift, j)) <=
              1e-4);
      ++checked;
    }
  }
  CHECK(checked > 50);
}
