#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "egnlq/ops.hpp"
#include "egnlq/tensor.hpp"

namespace egnlq {

struct ModelConfig {
  int embed_dim = 512;
  int num_heads = 16;
  int transformer_blocks = 7;
  int downsample_blocks = 5;   // the last N blocks downsample 2x
  int local_window = 19;       // grid units, odd
  int text_layers = 2;
  int head_conv_layers = 3;
  int mlp_expansion = 4;
  int input_dim = 0;
  int text_dim = 0;
  double layer_norm_eps = 1e-5;
  double fusion_eps = 1e-5;
  double nce_temperature = 0.07;

  int levels() const { return downsample_blocks + 1; }
  int max_stride() const { return 1 << downsample_blocks; }
  // T0 must be a multiple of this so every level halves exactly
  int pad_multiple() const { return max_stride(); }

  void validate() const {
    using ops::detail::require;
    require(embed_dim > 0 && embed_dim % num_heads == 0,
            "ModelConfig: embed_dim must be a positive multiple of num_heads");
    require(local_window >= 1 && local_window % 2 == 1, "ModelConfig: local_window must be odd");
    require(downsample_blocks < transformer_blocks,
            "ModelConfig: downsample_blocks must be < transformer_blocks");
    require(input_dim > 0 && text_dim > 0, "ModelConfig: input_dim and text_dim required");
    require(text_layers >= 1 && head_conv_layers >= 1 && mlp_expansion >= 1,
            "ModelConfig: depths must be >= 1");
    require(layer_norm_eps > 0 && fusion_eps > 0 && nce_temperature > 0,
            "ModelConfig: eps and temperature must be positive");
  }
};

// Named parameter set. Iteration order (std::map) is deterministic; creation
// order fixes the RNG draw sequence at init.
template <class Real>
class ParamStore {
 public:
  Tensor<Real>& def(const std::string& name, std::vector<int> shape, std::mt19937_64& rng,
                    double stddev) {
    auto t = stddev == 0.0 ? Tensor<Real>::zeros(shape, true)
                           : Tensor<Real>::randn(std::move(shape), rng, Real(stddev), true);
    auto [it, inserted] = params_.emplace(name, std::move(t));
    if (!inserted) throw std::logic_error("ParamStore: duplicate parameter " + name);
    return it->second;
  }

  Tensor<Real>& def_const(const std::string& name, std::vector<int> shape, Real value) {
    auto t = Tensor<Real>::full(std::move(shape), value, true);
    auto [it, inserted] = params_.emplace(name, std::move(t));
    if (!inserted) throw std::logic_error("ParamStore: duplicate parameter " + name);
    return it->second;
  }

  Tensor<Real>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("ParamStore: unknown parameter " + name);
    return it->second;
  }
  const Tensor<Real>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("ParamStore: unknown parameter " + name);
    return it->second;
  }

  std::map<std::string, Tensor<Real>>& all() { return params_; }
  const std::map<std::string, Tensor<Real>>& all() const { return params_; }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

 private:
  std::map<std::string, Tensor<Real>> params_;
};

template <class Real>
class GroundingModel {
 public:
  struct Level {
    Tensor<Real> feats;  // [T_l x C]
    Mask mask;
    int stride = 1;
  };
  struct TextOut {
    Tensor<Real> tokens;  // [L x C]
    Mask mask;
    Tensor<Real> pooled;  // [C], masked mean of tokens
  };
  struct HeadOut {
    std::vector<Tensor<Real>> cls_logits;  // per level, [T_l]
    std::vector<Tensor<Real>> offsets;     // per level, [T_l x 2], >= 0
  };
  struct ForwardOut {
    std::vector<Level> pyramid;        // post-encoder, pre-fusion
    std::vector<Tensor<Real>> fused;   // per level, [T_l x C]
    TextOut text;
    HeadOut heads;
  };

  explicit GroundingModel(ModelConfig cfg, std::uint64_t seed = 1) : cfg_(cfg) {
    cfg_.validate();
    init_params(seed);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<Real>& params() { return params_; }
  const ParamStore<Real>& params() const { return params_; }

  // Two conv+LN+ReLU embedding stages; pads T to a multiple of 32 first.
  // `mask` is extended in place for the padded tail.
  Tensor<Real> embed_video(const Tensor<Real>& features, Mask& mask) const {
    ops::detail::require(features.rank() == 2 && features.dim(1) == cfg_.input_dim,
                         "embed_video: expected T x " + std::to_string(cfg_.input_dim) +
                             ", got " + features.shape_str());
    const int t_in = features.dim(0);
    const int mult = cfg_.pad_multiple();
    const int t_pad = ((t_in + mult - 1) / mult) * mult;
    if (mask.empty()) mask.assign(static_cast<std::size_t>(t_in), 1);
    ops::detail::require(static_cast<int>(mask.size()) == t_in,
                         "embed_video: mask length mismatch");
    Tensor<Real> x = features;
    if (t_pad != t_in) {
      x = Tensor<Real>::zeros({t_pad, cfg_.input_dim});
      for (int t = 0; t < t_in; ++t)
        for (int j = 0; j < cfg_.input_dim; ++j) x.at(t, j) = features.at(t, j);
      if (track_grad(features)) {
        x.set_node({features}, [t_in](Tensor<Real>& o) {
          auto& p = o.node()->parents[0];
          const int c = p.shape().back();
          for (int t = 0; t < t_in; ++t)
            for (int j = 0; j < c; ++j) p.grad()[t * c + j] += o.grad()[t * c + j];
        });
      }
      mask.resize(static_cast<std::size_t>(t_pad), 0);
    }
    const Real eps = Real(cfg_.layer_norm_eps);
    auto h = ops::conv1d(x, params_.at("embed.conv1.w"), params_.at("embed.conv1.b"), 1, false,
                         mask);
    h = ops::relu(ops::layer_norm(h, params_.at("embed.ln1.g"), params_.at("embed.ln1.b"), eps));
    h = ops::conv1d(h, params_.at("embed.conv2.w"), params_.at("embed.conv2.b"), 1, false, mask);
    h = ops::relu(ops::layer_norm(h, params_.at("embed.ln2.g"), params_.at("embed.ln2.b"), eps));
    return h;
  }

  std::vector<Level> encode_video(const Tensor<Real>& embedded, const Mask& mask) const {
    ops::detail::require(embedded.dim(0) % cfg_.pad_multiple() == 0,
                         "encode_video: length must be a multiple of " +
                             std::to_string(cfg_.pad_multiple()));
    std::vector<Level> levels;
    Tensor<Real> x = embedded;
    Mask m = mask.empty() ? Mask(static_cast<std::size_t>(embedded.dim(0)), 1) : mask;
    const int plain_blocks = cfg_.transformer_blocks - cfg_.downsample_blocks;
    int stride = 1;
    for (int b = 0; b < cfg_.transformer_blocks; ++b) {
      x = transformer_block("vid.block" + std::to_string(b), x, m, cfg_.local_window);
      if (b >= plain_blocks) {
        const std::string pfx = "vid.block" + std::to_string(b) + ".down";
        x = ops::conv1d(x, params_.at(pfx + ".w"), params_.at(pfx + ".b"), 2, true, m);
        m = downsample_mask(m);
        stride *= 2;
      }
      if (b >= plain_blocks - 1) levels.push_back({x, m, stride});
    }
    return levels;
  }

  TextOut encode_text(const Tensor<Real>& raw, const Mask& mask) const {
    ops::detail::require(raw.rank() == 2 && raw.dim(1) == cfg_.text_dim,
                         "encode_text: expected L x " + std::to_string(cfg_.text_dim) + ", got " +
                             raw.shape_str());
    const int l = raw.dim(0);
    Mask m = mask.empty() ? Mask(static_cast<std::size_t>(l), 1) : mask;
    bool any = false;
    for (auto v : m) any = any || v != 0;
    ops::detail::require(any, "encode_text: all tokens masked");
    auto x = ops::linear(raw, params_.at("txt.proj.w"), params_.at("txt.proj.b"));
    const int full_window = 2 * l + 1;  // covers every pair; attention stays masked
    for (int b = 0; b < cfg_.text_layers; ++b)
      x = transformer_block("txt.block" + std::to_string(b), x, m, full_window);
    TextOut out;
    out.tokens = x;
    out.mask = m;
    out.pooled = ops::masked_mean_rows(x, m);
    return out;
  }

  // AdaAttN: per-head attention statistics of the text values modulate the
  // channel-normalized video features; result is added back to the input.
  Tensor<Real> ada_attn_fuse(const Tensor<Real>& video, const TextOut& text) const {
    const int c = cfg_.embed_dim, heads = cfg_.num_heads, d = c / heads;
    ops::detail::require(video.rank() == 2 && video.dim(1) == c,
                         "ada_attn_fuse: expected T x " + std::to_string(c));
    const Real eps = Real(cfg_.fusion_eps);
    auto q = ops::linear(video, params_.at("fuse.q.w"), params_.at("fuse.q.b"));
    auto k = ops::linear(text.tokens, params_.at("fuse.k.w"), params_.at("fuse.k.b"));
    auto v = ops::linear(text.tokens, params_.at("fuse.v.w"), params_.at("fuse.v.b"));
    std::vector<Tensor<Real>> head_outs;
    head_outs.reserve(static_cast<std::size_t>(heads));
    const Real inv_sqrt_d = Real(1) / std::sqrt(Real(d));
    for (int h = 0; h < heads; ++h) {
      auto qh = ops::slice_lastdim(q, h * d, d);
      auto kh = ops::slice_lastdim(k, h * d, d);
      auto vh = ops::slice_lastdim(v, h * d, d);
      auto xh = ops::slice_lastdim(video, h * d, d);
      auto scores = ops::scale(ops::matmul_nt(qh, kh), inv_sqrt_d);
      auto attn = ops::softmax_lastdim(scores, text.mask);  // [T x L]
      auto mean = ops::matmul(attn, vh);                    // [T x d]
      auto second = ops::matmul(attn, ops::mul(vh, vh));
      auto variance = ops::sub(second, ops::mul(mean, mean));
      auto stddev = ops::sqrt_clamp(variance, eps);
      auto normed = ops::channel_norm(xh, eps);
      head_outs.push_back(ops::add(ops::mul(stddev, normed), mean));
    }
    auto merged = ops::concat_lastdim(head_outs);
    auto projected = ops::linear(merged, params_.at("fuse.out.w"), params_.at("fuse.out.b"));
    return ops::add(video, projected);
  }

  HeadOut run_heads(const std::vector<Tensor<Real>>& fused,
                    const std::vector<Mask>& masks) const {
    HeadOut out;
    for (std::size_t l = 0; l < fused.size(); ++l) {
      auto cls = head_tower("head.cls", fused[l], masks[l]);
      auto cls_final = ops::conv1d(cls, params_.at("head.cls.final.w"),
                                   params_.at("head.cls.final.b"), 1, false, masks[l]);
      out.cls_logits.push_back(ops::reshape(cls_final, {fused[l].dim(0)}));
      auto reg = head_tower("head.reg", fused[l], masks[l]);
      auto reg_final = ops::conv1d(reg, params_.at("head.reg.final.w"),
                                   params_.at("head.reg.final.b"), 1, false, masks[l]);
      out.offsets.push_back(ops::relu(reg_final));
    }
    return out;
  }

  ForwardOut forward(const Tensor<Real>& features, Mask video_mask, const Tensor<Real>& text_raw,
                     const Mask& text_mask) const {
    ForwardOut out;
    auto embedded = embed_video(features, video_mask);
    out.pyramid = encode_video(embedded, video_mask);
    out.text = encode_text(text_raw, text_mask);
    std::vector<Mask> masks;
    for (const auto& lvl : out.pyramid) {
      out.fused.push_back(ada_attn_fuse(lvl.feats, out.text));
      masks.push_back(lvl.mask);
    }
    out.heads = run_heads(out.fused, masks);
    return out;
  }

 private:
  Tensor<Real> transformer_block(const std::string& pfx, const Tensor<Real>& x, const Mask& mask,
                                 int window) const {
    const int c = cfg_.embed_dim, heads = cfg_.num_heads, d = c / heads;
    const int t_len = x.dim(0);
    const Real eps = Real(cfg_.layer_norm_eps);
    auto normed = ops::layer_norm(x, params_.at(pfx + ".ln1.g"), params_.at(pfx + ".ln1.b"), eps);
    auto qkv = ops::linear(normed, params_.at(pfx + ".qkv.w"), params_.at(pfx + ".qkv.b"));
    auto q = ops::reshape(ops::slice_lastdim(qkv, 0, c), {t_len, heads, d});
    auto k = ops::reshape(ops::slice_lastdim(qkv, c, c), {t_len, heads, d});
    auto v = ops::reshape(ops::slice_lastdim(qkv, 2 * c, c), {t_len, heads, d});
    auto attn = ops::windowed_attention(q, k, v, window, mask);
    auto proj = ops::linear(ops::reshape(attn, {t_len, c}), params_.at(pfx + ".proj.w"),
                            params_.at(pfx + ".proj.b"));
    auto h = ops::add(x, proj);
    auto normed2 =
        ops::layer_norm(h, params_.at(pfx + ".ln2.g"), params_.at(pfx + ".ln2.b"), eps);
    auto mid = ops::gelu(ops::linear(normed2, params_.at(pfx + ".mlp1.w"),
                                     params_.at(pfx + ".mlp1.b")));
    auto mlp = ops::linear(mid, params_.at(pfx + ".mlp2.w"), params_.at(pfx + ".mlp2.b"));
    return ops::add(h, mlp);
  }

  Tensor<Real> head_tower(const std::string& pfx, const Tensor<Real>& x, const Mask& mask) const {
    const Real eps = Real(cfg_.layer_norm_eps);
    Tensor<Real> h = x;
    for (int j = 0; j < cfg_.head_conv_layers; ++j) {
      const std::string name = pfx + ".conv" + std::to_string(j);
      h = ops::conv1d(h, params_.at(name + ".w"), params_.at(name + ".b"), 1, false, mask);
      h = ops::relu(ops::layer_norm(h, params_.at(pfx + ".ln" + std::to_string(j) + ".g"),
                                    params_.at(pfx + ".ln" + std::to_string(j) + ".b"), eps));
    }
    return h;
  }

  // "any valid in the stride-2 window"
  static Mask downsample_mask(const Mask& m) {
    Mask out((m.size() + 1) / 2, 0);
    for (std::size_t t = 0; t < out.size(); ++t) {
      const bool a = m[2 * t] != 0;
      const bool b = 2 * t + 1 < m.size() && m[2 * t + 1] != 0;
      out[t] = (a || b) ? 1 : 0;
    }
    return out;
  }

  void init_params(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const int c = cfg_.embed_dim;
    auto fan = [](int n) { return 1.0 / std::sqrt(static_cast<double>(n)); };

    params_.def("embed.conv1.w", {c, cfg_.input_dim, 3}, rng, fan(3 * cfg_.input_dim));
    params_.def_const("embed.conv1.b", {c}, Real(0));
    params_.def_const("embed.ln1.g", {c}, Real(1));
    params_.def_const("embed.ln1.b", {c}, Real(0));
    params_.def("embed.conv2.w", {c, c, 3}, rng, fan(3 * c));
    params_.def_const("embed.conv2.b", {c}, Real(0));
    params_.def_const("embed.ln2.g", {c}, Real(1));
    params_.def_const("embed.ln2.b", {c}, Real(0));

    auto def_block = [&](const std::string& pfx) {
      params_.def_const(pfx + ".ln1.g", {c}, Real(1));
      params_.def_const(pfx + ".ln1.b", {c}, Real(0));
      params_.def(pfx + ".qkv.w", {c, 3 * c}, rng, fan(c));
      params_.def_const(pfx + ".qkv.b", {3 * c}, Real(0));
      params_.def(pfx + ".proj.w", {c, c}, rng, fan(c));
      params_.def_const(pfx + ".proj.b", {c}, Real(0));
      params_.def_const(pfx + ".ln2.g", {c}, Real(1));
      params_.def_const(pfx + ".ln2.b", {c}, Real(0));
      params_.def(pfx + ".mlp1.w", {c, cfg_.mlp_expansion * c}, rng, fan(c));
      params_.def_const(pfx + ".mlp1.b", {cfg_.mlp_expansion * c}, Real(0));
      params_.def(pfx + ".mlp2.w", {cfg_.mlp_expansion * c, c}, rng, fan(cfg_.mlp_expansion * c));
      params_.def_const(pfx + ".mlp2.b", {c}, Real(0));
    };

    const int plain_blocks = cfg_.transformer_blocks - cfg_.downsample_blocks;
    for (int b = 0; b < cfg_.transformer_blocks; ++b) {
      const std::string pfx = "vid.block" + std::to_string(b);
      def_block(pfx);
      if (b >= plain_blocks) {
        params_.def(pfx + ".down.w", {c, 3}, rng, fan(3));
        params_.def_const(pfx + ".down.b", {c}, Real(0));
      }
    }

    params_.def("txt.proj.w", {cfg_.text_dim, c}, rng, fan(cfg_.text_dim));
    params_.def_const("txt.proj.b", {c}, Real(0));
    for (int b = 0; b < cfg_.text_layers; ++b) def_block("txt.block" + std::to_string(b));

    for (const char* side : {"q", "k", "v", "out"}) {
      params_.def(std::string("fuse.") + side + ".w", {c, c}, rng, fan(c));
      params_.def_const(std::string("fuse.") + side + ".b", {c}, Real(0));
    }

    for (const char* head : {"head.cls", "head.reg"}) {
      for (int j = 0; j < cfg_.head_conv_layers; ++j) {
        params_.def(std::string(head) + ".conv" + std::to_string(j) + ".w", {c, c, 3}, rng,
                    fan(3 * c));
        params_.def_const(std::string(head) + ".conv" + std::to_string(j) + ".b", {c}, Real(0));
        params_.def_const(std::string(head) + ".ln" + std::to_string(j) + ".g", {c}, Real(1));
        params_.def_const(std::string(head) + ".ln" + std::to_string(j) + ".b", {c}, Real(0));
      }
    }
    params_.def("head.cls.final.w", {1, c, 3}, rng, fan(3 * c));
    // bias toward background so early focal loss is dominated by easy negatives
    params_.def_const("head.cls.final.b", {1}, Real(-2.19));
    params_.def("head.reg.final.w", {2, c, 3}, rng, fan(3 * c));
    params_.def_const("head.reg.final.b", {2}, Real(0));
  }

  ModelConfig cfg_;
  ParamStore<Real> params_;
};

}  // namespace egnlq
