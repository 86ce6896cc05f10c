#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "egnlq/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

// Differentiable dense ops. Each op computes its forward value and, when
// gradient tracking is on, records a vector-Jacobian product closure.
// Parallel loops are always over disjoint output (or gathered input)
// coordinates with a fixed per-element summation order, so results are
// bitwise identical at any thread count.

namespace egnlq::ops {

template <class Real>
using T = Tensor<Real>;

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class Real>
T<Real> add(const T<Real>& a, const T<Real>& b) {
  detail::require(a.shape() == b.shape(),
                  "add: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  T<Real> out = T<Real>::zeros(a.shape());
  const auto n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] + b.values()[i];
  if (track_grad(a) || track_grad(b)) {
    out.set_node({a, b}, [](T<Real>& o) {
      auto& pa = o.node()->parents[0];
      auto& pb = o.node()->parents[1];
      for (std::size_t i = 0; i < o.numel(); ++i) {
        if (pa.requires_grad()) pa.grad()[i] += o.grad()[i];
        if (pb.requires_grad()) pb.grad()[i] += o.grad()[i];
      }
    });
  }
  return out;
}

template <class Real>
T<Real> sub(const T<Real>& a, const T<Real>& b) {
  detail::require(a.shape() == b.shape(),
                  "sub: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  T<Real> out = T<Real>::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.values()[i] = a.values()[i] - b.values()[i];
  if (track_grad(a) || track_grad(b)) {
    out.set_node({a, b}, [](T<Real>& o) {
      auto& pa = o.node()->parents[0];
      auto& pb = o.node()->parents[1];
      for (std::size_t i = 0; i < o.numel(); ++i) {
        if (pa.requires_grad()) pa.grad()[i] += o.grad()[i];
        if (pb.requires_grad()) pb.grad()[i] -= o.grad()[i];
      }
    });
  }
  return out;
}

template <class Real>
T<Real> mul(const T<Real>& a, const T<Real>& b) {
  detail::require(a.shape() == b.shape(),
                  "mul: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  T<Real> out = T<Real>::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.values()[i] = a.values()[i] * b.values()[i];
  if (track_grad(a) || track_grad(b)) {
    out.set_node({a, b}, [](T<Real>& o) {
      auto& pa = o.node()->parents[0];
      auto& pb = o.node()->parents[1];
      for (std::size_t i = 0; i < o.numel(); ++i) {
        if (pa.requires_grad()) pa.grad()[i] += o.grad()[i] * pb.values()[i];
        if (pb.requires_grad()) pb.grad()[i] += o.grad()[i] * pa.values()[i];
      }
    });
  }
  return out;
}

template <class Real>
T<Real> scale(const T<Real>& a, Real c) {
  T<Real> out = T<Real>::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.values()[i] = a.values()[i] * c;
  if (track_grad(a)) {
    out.set_node({a}, [c](T<Real>& o) {
      auto& pa = o.node()->parents[0];
      for (std::size_t i = 0; i < o.numel(); ++i) pa.grad()[i] += o.grad()[i] * c;
    });
  }
  return out;
}

template <class Real>
T<Real> relu(const T<Real>& a) {
  T<Real> out = T<Real>::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.values()[i] = std::max(a.values()[i], Real(0));
  if (track_grad(a)) {
    out.set_node({a}, [](T<Real>& o) {
      auto& pa = o.node()->parents[0];
      for (std::size_t i = 0; i < o.numel(); ++i)
        if (pa.values()[i] > Real(0)) pa.grad()[i] += o.grad()[i];
    });
  }
  return out;
}

template <class Real>
T<Real> gelu(const T<Real>& a) {
  // tanh approximation
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  T<Real> out = T<Real>::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double x = static_cast<double>(a.values()[i]);
    out.values()[i] = Real(0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x))));
  }
  if (track_grad(a)) {
    out.set_node({a}, [](T<Real>& o) {
      constexpr double kC = 0.7978845608028654;
      constexpr double kA = 0.044715;
      auto& pa = o.node()->parents[0];
      for (std::size_t i = 0; i < o.numel(); ++i) {
        const double x = static_cast<double>(pa.values()[i]);
        const double u = kC * (x + kA * x * x * x);
        const double th = std::tanh(u);
        const double du = kC * (1.0 + 3.0 * kA * x * x);
        const double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
        pa.grad()[i] += o.grad()[i] * Real(d);
      }
    });
  }
  return out;
}

// sqrt(max(x,0)+eps); subgradient 0 where the clamp is active.
template <class Real>
T<Real> sqrt_clamp(const T<Real>& a, Real eps) {
  T<Real> out = T<Real>::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i)
    out.values()[i] = std::sqrt(std::max(a.values()[i], Real(0)) + eps);
  if (track_grad(a)) {
    out.set_node({a, out}, [eps](T<Real>& o) {
      auto& pa = o.node()->parents[0];
      auto& saved = o.node()->parents[1];
      for (std::size_t i = 0; i < o.numel(); ++i)
        if (pa.values()[i] > Real(0))
          pa.grad()[i] += o.grad()[i] / (Real(2) * saved.values()[i]);
    });
  }
  return out;
}

template <class Real>
T<Real> sum(const T<Real>& a) {
  Real s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a.values()[i];
  T<Real> out = T<Real>::scalar(s);
  if (track_grad(a)) {
    out.set_node({a}, [](T<Real>& o) {
      auto& pa = o.node()->parents[0];
      for (std::size_t i = 0; i < pa.numel(); ++i) pa.grad()[i] += o.grad()[0];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape plumbing

template <class Real>
T<Real> reshape(const T<Real>& a, std::vector<int> shape) {
  T<Real> out = T<Real>::from(std::move(shape), a.values());
  detail::require(out.numel() == a.numel(), "reshape: element count mismatch");
  if (track_grad(a)) {
    out.set_node({a}, [](T<Real>& o) {
      auto& pa = o.node()->parents[0];
      for (std::size_t i = 0; i < o.numel(); ++i) pa.grad()[i] += o.grad()[i];
    });
  }
  return out;
}

template <class Real>
T<Real> slice_lastdim(const T<Real>& a, int offset, int length) {
  const int d = a.shape().back();
  detail::require(offset >= 0 && length > 0 && offset + length <= d,
                  "slice_lastdim: invalid slice");
  std::vector<int> shape = a.shape();
  shape.back() = length;
  T<Real> out = T<Real>::zeros(shape);
  const std::size_t outer = a.numel() / static_cast<std::size_t>(d);
  for (std::size_t o = 0; o < outer; ++o)
    for (int i = 0; i < length; ++i)
      out.values()[o * length + i] = a.values()[o * d + offset + i];
  if (track_grad(a)) {
    out.set_node({a}, [offset, length, d](T<Real>& o) {
      auto& pa = o.node()->parents[0];
      const std::size_t outer2 = o.numel() / static_cast<std::size_t>(length);
      for (std::size_t ou = 0; ou < outer2; ++ou)
        for (int i = 0; i < length; ++i)
          pa.grad()[ou * d + offset + i] += o.grad()[ou * length + i];
    });
  }
  return out;
}

template <class Real>
T<Real> concat_lastdim(const std::vector<T<Real>>& parts) {
  detail::require(!parts.empty(), "concat_lastdim: empty input");
  std::vector<int> shape = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    auto s = p.shape();
    s.back() = 0;
    auto s0 = shape;
    s0.back() = 0;
    detail::require(s == s0, "concat_lastdim: leading shape mismatch");
    total += p.shape().back();
  }
  shape.back() = total;
  T<Real> out = T<Real>::zeros(shape);
  const std::size_t outer = out.numel() / static_cast<std::size_t>(total);
  int off = 0;
  bool needs = false;
  for (const auto& p : parts) {
    const int d = p.shape().back();
    for (std::size_t o = 0; o < outer; ++o)
      for (int i = 0; i < d; ++i)
        out.values()[o * total + off + i] = p.values()[o * d + i];
    off += d;
    needs = needs || track_grad(p);
  }
  if (needs) {
    out.set_node(parts, [total](T<Real>& o) {
      const std::size_t outer2 = o.numel() / static_cast<std::size_t>(total);
      int off2 = 0;
      for (auto& p : o.node()->parents) {
        const int d = p.shape().back();
        if (p.requires_grad())
          for (std::size_t ou = 0; ou < outer2; ++ou)
            for (int i = 0; i < d; ++i)
              p.grad()[ou * d + i] += o.grad()[ou * total + off2 + i];
        off2 += d;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class Real>
T<Real> matmul(const T<Real>& a, const T<Real>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                  "matmul: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  T<Real> out = T<Real>::zeros({m, n});
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      const Real av = a.at(i, p);
      for (int j = 0; j < n; ++j) out.at(i, j) += av * b.at(p, j);
    }
  }
  if (track_grad(a) || track_grad(b)) {
    out.set_node({a, b}, [m, k, n](T<Real>& o) {
      auto& pa = o.node()->parents[0];
      auto& pb = o.node()->parents[1];
      if (pa.requires_grad()) {
#pragma omp parallel for schedule(static)
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) {
            const Real g = o.grad()[i * n + j];
            for (int p = 0; p < k; ++p) pa.grad()[i * k + p] += g * pb.at(p, j);
          }
      }
      if (pb.requires_grad()) {
#pragma omp parallel for schedule(static)
        for (int p = 0; p < k; ++p)
          for (int i = 0; i < m; ++i) {
            const Real av = pa.at(i, p);
            for (int j = 0; j < n; ++j) pb.grad()[p * n + j] += av * o.grad()[i * n + j];
          }
      }
    });
  }
  return out;
}

// a [M x K] times b^T where b is [N x K].
template <class Real>
T<Real> matmul_nt(const T<Real>& a, const T<Real>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
                  "matmul_nt: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  T<Real> out = T<Real>::zeros({m, n});
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      Real s = 0;
      for (int p = 0; p < k; ++p) s += a.at(i, p) * b.at(j, p);
      out.at(i, j) = s;
    }
  if (track_grad(a) || track_grad(b)) {
    out.set_node({a, b}, [m, k, n](T<Real>& o) {
      auto& pa = o.node()->parents[0];
      auto& pb = o.node()->parents[1];
      if (pa.requires_grad()) {
#pragma omp parallel for schedule(static)
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) {
            const Real g = o.grad()[i * n + j];
            for (int p = 0; p < k; ++p) pa.grad()[i * k + p] += g * pb.at(j, p);
          }
      }
      if (pb.requires_grad()) {
#pragma omp parallel for schedule(static)
        for (int j = 0; j < n; ++j)
          for (int i = 0; i < m; ++i) {
            const Real g = o.grad()[i * n + j];
            for (int p = 0; p < k; ++p) pb.grad()[j * k + p] += g * pa.at(i, p);
          }
      }
    });
  }
  return out;
}

template <class Real>
T<Real> add_bias(const T<Real>& x, const T<Real>& b) {
  detail::require(x.rank() == 2 && b.rank() == 1 && x.dim(1) == b.dim(0),
                  "add_bias: shape mismatch " + x.shape_str() + " vs " + b.shape_str());
  const int t = x.dim(0), c = x.dim(1);
  T<Real> out = T<Real>::zeros({t, c});
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < c; ++j) out.at(i, j) = x.at(i, j) + b.at(j);
  if (track_grad(x) || track_grad(b)) {
    out.set_node({x, b}, [t, c](T<Real>& o) {
      auto& px = o.node()->parents[0];
      auto& pb = o.node()->parents[1];
      for (int i = 0; i < t; ++i)
        for (int j = 0; j < c; ++j) {
          if (px.requires_grad()) px.grad()[i * c + j] += o.grad()[i * c + j];
          if (pb.requires_grad()) pb.grad()[j] += o.grad()[i * c + j];
        }
    });
  }
  return out;
}

template <class Real>
T<Real> linear(const T<Real>& x, const T<Real>& w, const T<Real>& b) {
  return add_bias(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Normalization

template <class Real>
T<Real> layer_norm(const T<Real>& x, const T<Real>& gain, const T<Real>& bias, Real eps) {
  const int c = x.shape().back();
  detail::require(c >= 1 && eps > Real(0), "layer_norm: need C >= 1 and eps > 0");
  detail::require(gain.rank() == 1 && gain.dim(0) == c && bias.rank() == 1 && bias.dim(0) == c,
                  "layer_norm: affine shape mismatch");
  const std::size_t rows = x.numel() / static_cast<std::size_t>(c);
  T<Real> out = T<Real>::zeros(x.shape());
  // per-row (mean, inv-std) saved for backward
  T<Real> stats = T<Real>::zeros({static_cast<int>(rows), 2});
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
    const Real* xr = x.values().data() + r * c;
    Real mean = 0;
    for (int j = 0; j < c; ++j) mean += xr[j];
    mean /= Real(c);
    Real var = 0;
    for (int j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= Real(c);
    const Real inv = Real(1) / std::sqrt(var + eps);
    stats.at(static_cast<int>(r), 0) = mean;
    stats.at(static_cast<int>(r), 1) = inv;
    for (int j = 0; j < c; ++j)
      out.values()[r * c + j] = (xr[j] - mean) * inv * gain.at(j) + bias.at(j);
  }
  if (track_grad(x) || track_grad(gain) || track_grad(bias)) {
    out.set_node({x, gain, bias, stats}, [c, rows](T<Real>& o) {
      auto& px = o.node()->parents[0];
      auto& pg = o.node()->parents[1];
      auto& pb = o.node()->parents[2];
      auto& st = o.node()->parents[3];
      if (px.requires_grad()) {
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
          const Real mean = st.at(static_cast<int>(r), 0);
          const Real inv = st.at(static_cast<int>(r), 1);
          const Real* xr = px.values().data() + r * c;
          const Real* gr = o.grad().data() + r * c;
          Real sum_g = 0, sum_gx = 0;
          for (int j = 0; j < c; ++j) {
            const Real gj = gr[j] * pg.at(j);
            const Real xh = (xr[j] - mean) * inv;
            sum_g += gj;
            sum_gx += gj * xh;
          }
          for (int j = 0; j < c; ++j) {
            const Real gj = gr[j] * pg.at(j);
            const Real xh = (xr[j] - mean) * inv;
            px.grad()[r * c + j] += inv * (gj - (sum_g + xh * sum_gx) / Real(c));
          }
        }
      }
      if (pg.requires_grad() || pb.requires_grad()) {
        for (std::size_t r = 0; r < rows; ++r) {
          const Real mean = st.at(static_cast<int>(r), 0);
          const Real inv = st.at(static_cast<int>(r), 1);
          for (int j = 0; j < c; ++j) {
            const Real g = o.grad()[r * c + j];
            if (pg.requires_grad())
              pg.grad()[j] += g * (px.values()[r * c + j] - mean) * inv;
            if (pb.requires_grad()) pb.grad()[j] += g;
          }
        }
      }
    });
  }
  return out;
}

// Per-position zero-mean/unit-variance over the last dim, no affine.
template <class Real>
T<Real> channel_norm(const T<Real>& x, Real eps) {
  const int c = x.shape().back();
  T<Real> ones = T<Real>::full({c}, Real(1));
  T<Real> zero = T<Real>::zeros({c});
  return layer_norm(x, ones, zero, eps);
}

// ---------------------------------------------------------------------------
// Softmax

// Softmax over the last dim. `mask` marks valid last-dim positions (shared by
// every row); masked entries come out exactly 0.
template <class Real>
T<Real> softmax_lastdim(const T<Real>& x, const Mask& mask = {}) {
  const int c = x.shape().back();
  detail::require(mask.empty() || static_cast<int>(mask.size()) == c,
                  "softmax_lastdim: mask length mismatch");
  bool any_valid = mask.empty();
  for (auto m : mask) any_valid = any_valid || m != 0;
  detail::require(any_valid, "softmax_lastdim: fully masked row");
  const std::size_t rows = x.numel() / static_cast<std::size_t>(c);
  T<Real> out = T<Real>::zeros(x.shape());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
    const Real* xr = x.values().data() + r * c;
    Real* orow = out.values().data() + r * c;
    Real mx = -std::numeric_limits<Real>::infinity();
    for (int j = 0; j < c; ++j)
      if (mask_at(mask, j)) mx = std::max(mx, xr[j]);
    Real z = 0;
    for (int j = 0; j < c; ++j)
      if (mask_at(mask, j)) {
        orow[j] = std::exp(xr[j] - mx);
        z += orow[j];
      }
    for (int j = 0; j < c; ++j) orow[j] = mask_at(mask, j) ? orow[j] / z : Real(0);
  }
  if (track_grad(x)) {
    out.set_node({x}, [c, rows](T<Real>& o) {
      auto& px = o.node()->parents[0];
#pragma omp parallel for schedule(static)
      for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
        const Real* y = o.values().data() + r * c;
        const Real* g = o.grad().data() + r * c;
        Real dot = 0;
        for (int j = 0; j < c; ++j) dot += y[j] * g[j];
        for (int j = 0; j < c; ++j) px.grad()[r * c + j] += y[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Conv1d

// x: [T x Cin], "same" zero padding, T' = ceil(T/stride). Invalid input
// positions contribute zero. Weights: depthwise [C x K], else [Cout x Cin x K].
template <class Real>
T<Real> conv1d(const T<Real>& x, const T<Real>& w, const T<Real>& b, int stride, bool depthwise,
               const Mask& mask = {}) {
  detail::require(x.rank() == 2, "conv1d: input must be T x C");
  detail::require(stride == 1 || stride == 2, "conv1d: stride must be 1 or 2");
  const int t_in = x.dim(0), c_in = x.dim(1);
  int k, c_out;
  if (depthwise) {
    detail::require(w.rank() == 2 && w.dim(0) == c_in, "conv1d: depthwise weight must be C x K");
    k = w.dim(1);
    c_out = c_in;
  } else {
    detail::require(w.rank() == 3 && w.dim(1) == c_in, "conv1d: weight must be Cout x Cin x K");
    k = w.dim(2);
    c_out = w.dim(0);
  }
  detail::require(b.rank() == 1 && b.dim(0) == c_out, "conv1d: bias shape mismatch");
  const int pad = k / 2;
  detail::require(k <= t_in + 2 * pad, "conv1d: kernel wider than padded input");
  detail::require(mask.empty() || static_cast<int>(mask.size()) == t_in,
                  "conv1d: mask length mismatch");
  const int t_out = (t_in + stride - 1) / stride;
  T<Real> out = T<Real>::zeros({t_out, c_out});

  const Real* xp = x.values().data();
  const Real* wp = w.values().data();
  const Real* bp = b.values().data();
  Real* op = out.values().data();
  auto in_val = [&](int t, int c) -> Real {
    if (t < 0 || t >= t_in || !mask_at(mask, static_cast<std::size_t>(t))) return Real(0);
    return xp[t * c_in + c];
  };

#pragma omp parallel for schedule(static)
  for (int to = 0; to < t_out; ++to) {
    const int t0 = to * stride - pad;
    bool interior = t0 >= 0 && t0 + k <= t_in;
    if (interior && !mask.empty())
      for (int kk = 0; kk < k && interior; ++kk) interior = mask[t0 + kk] != 0;
    for (int co = 0; co < c_out; ++co) {
      Real s = bp[co];
      if (depthwise) {
        if (interior) {
          for (int kk = 0; kk < k; ++kk) s += wp[co * k + kk] * xp[(t0 + kk) * c_in + co];
        } else {
          for (int kk = 0; kk < k; ++kk) s += wp[co * k + kk] * in_val(t0 + kk, co);
        }
      } else if (interior) {
        for (int ci = 0; ci < c_in; ++ci)
          for (int kk = 0; kk < k; ++kk)
            s += wp[(co * c_in + ci) * k + kk] * xp[(t0 + kk) * c_in + ci];
      } else {
        for (int ci = 0; ci < c_in; ++ci)
          for (int kk = 0; kk < k; ++kk) s += wp[(co * c_in + ci) * k + kk] * in_val(t0 + kk, ci);
      }
      op[to * c_out + co] = s;
    }
  }

  if (track_grad(x) || track_grad(w) || track_grad(b)) {
    Mask mask_copy = mask;
    out.set_node({x, w, b}, [t_in, c_in, t_out, c_out, k, pad, stride, depthwise,
                             mask_copy](T<Real>& o) {
      auto& px = o.node()->parents[0];
      auto& pw = o.node()->parents[1];
      auto& pb = o.node()->parents[2];
      auto valid_in = [&](int t) {
        return t >= 0 && t < t_in && mask_at(mask_copy, static_cast<std::size_t>(t));
      };
      if (px.requires_grad()) {
        // gather over input positions: t = to*stride + kk - pad
#pragma omp parallel for schedule(static)
        for (int t = 0; t < t_in; ++t) {
          if (!valid_in(t)) continue;
          for (int kk = 0; kk < k; ++kk) {
            const int num = t + pad - kk;
            if (num % stride != 0) continue;
            const int to = num / stride;
            if (to < 0 || to >= t_out) continue;
            if (depthwise) {
              for (int c = 0; c < c_in; ++c)
                px.grad()[t * c_in + c] += pw.at(c, kk) * o.grad()[to * c_out + c];
            } else {
              for (int ci = 0; ci < c_in; ++ci) {
                Real s = 0;
                for (int co = 0; co < c_out; ++co)
                  s += pw.at(co, ci, kk) * o.grad()[to * c_out + co];
                px.grad()[t * c_in + ci] += s;
              }
            }
          }
        }
      }
      if (pw.requires_grad()) {
        auto in_v = [&](int t, int c) -> Real {
          return valid_in(t) ? px.at(t, c) : Real(0);
        };
        if (depthwise) {
#pragma omp parallel for schedule(static)
          for (int c = 0; c < c_in; ++c)
            for (int kk = 0; kk < k; ++kk) {
              Real s = 0;
              for (int to = 0; to < t_out; ++to)
                s += o.grad()[to * c_out + c] * in_v(to * stride + kk - pad, c);
              pw.grad()[c * k + kk] += s;
            }
        } else {
#pragma omp parallel for schedule(static)
          for (int co = 0; co < c_out; ++co)
            for (int ci = 0; ci < c_in; ++ci)
              for (int kk = 0; kk < k; ++kk) {
                Real s = 0;
                for (int to = 0; to < t_out; ++to)
                  s += o.grad()[to * c_out + co] * in_v(to * stride + kk - pad, ci);
                pw.grad()[(co * c_in + ci) * k + kk] += s;
              }
        }
      }
      if (pb.requires_grad()) {
        for (int to = 0; to < t_out; ++to)
          for (int co = 0; co < c_out; ++co) pb.grad()[co] += o.grad()[to * c_out + co];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Windowed attention

// q,k,v: [T x H x d]. Each query position attends keys within +/-(window-1)/2,
// intersected with the validity mask. Scale 1/sqrt(d).
template <class Real>
T<Real> windowed_attention(const T<Real>& q, const T<Real>& k, const T<Real>& v, int window,
                           const Mask& mask = {}) {
  detail::require(window >= 1, "windowed_attention: window must be >= 1");
  detail::require(window % 2 == 1, "windowed_attention: window must be odd");
  detail::require(q.rank() == 3 && q.shape() == k.shape() && q.shape() == v.shape(),
                  "windowed_attention: q/k/v shapes must match, got " + q.shape_str());
  const int t_len = q.dim(0), h = q.dim(1), d = q.dim(2);
  detail::require(mask.empty() || static_cast<int>(mask.size()) == t_len,
                  "windowed_attention: mask length mismatch");
  const int r = (window - 1) / 2;
  const Real inv_sqrt_d = Real(1) / std::sqrt(Real(d));
  T<Real> out = T<Real>::zeros({t_len, h, d});
  // attention weights, [T x H x window], padded slots zero
  T<Real> attn = T<Real>::zeros({t_len, h, window});

#pragma omp parallel for schedule(static)
  for (int t = 0; t < t_len; ++t) {
    if (!mask_at(mask, static_cast<std::size_t>(t))) continue;
    const int j0 = std::max(0, t - r), j1 = std::min(t_len - 1, t + r);
    for (int hh = 0; hh < h; ++hh) {
      Real mx = -std::numeric_limits<Real>::infinity();
      for (int j = j0; j <= j1; ++j) {
        if (!mask_at(mask, static_cast<std::size_t>(j))) continue;
        Real s = 0;
        for (int e = 0; e < d; ++e) s += q.at(t, hh, e) * k.at(j, hh, e);
        s *= inv_sqrt_d;
        attn.at(t, hh, j - t + r) = s;
        mx = std::max(mx, s);
      }
      Real z = 0;
      for (int j = j0; j <= j1; ++j) {
        if (!mask_at(mask, static_cast<std::size_t>(j))) continue;
        const Real e = std::exp(attn.at(t, hh, j - t + r) - mx);
        attn.at(t, hh, j - t + r) = e;
        z += e;
      }
      for (int j = j0; j <= j1; ++j) {
        const int w = j - t + r;
        if (!mask_at(mask, static_cast<std::size_t>(j))) {
          attn.at(t, hh, w) = 0;
          continue;
        }
        attn.at(t, hh, w) /= z;
        const Real a = attn.at(t, hh, w);
        for (int e = 0; e < d; ++e) out.at(t, hh, e) += a * v.at(j, hh, e);
      }
    }
  }

  if (track_grad(q) || track_grad(k) || track_grad(v)) {
    Mask mask_copy = mask;
    out.set_node({q, k, v, attn}, [t_len, h, d, r, inv_sqrt_d, mask_copy](T<Real>& o) {
      auto& pq = o.node()->parents[0];
      auto& pk = o.node()->parents[1];
      auto& pv = o.node()->parents[2];
      auto& at = o.node()->parents[3];
      const int window = 2 * r + 1;
      auto valid = [&](int t) { return mask_at(mask_copy, static_cast<std::size_t>(t)); };
      // ds[t,h,w]: gradient w.r.t. pre-softmax score via softmax VJP
      T<Real> ds = T<Real>::zeros({t_len, h, window});
#pragma omp parallel for schedule(static)
      for (int t = 0; t < t_len; ++t) {
        if (!valid(t)) continue;
        const int j0 = std::max(0, t - r), j1 = std::min(t_len - 1, t + r);
        for (int hh = 0; hh < h; ++hh) {
          Real dot = 0;
          for (int j = j0; j <= j1; ++j) {
            const int w = j - t + r;
            const Real a = at.at(t, hh, w);
            if (a == Real(0)) continue;
            Real da = 0;
            for (int e = 0; e < d; ++e) da += o.grad()[(t * h + hh) * d + e] * pv.at(j, hh, e);
            ds.at(t, hh, w) = da;
            dot += a * da;
          }
          for (int j = j0; j <= j1; ++j) {
            const int w = j - t + r;
            const Real a = at.at(t, hh, w);
            ds.at(t, hh, w) = a * (ds.at(t, hh, w) - dot);
          }
        }
      }
      if (pq.requires_grad()) {
#pragma omp parallel for schedule(static)
        for (int t = 0; t < t_len; ++t) {
          if (!valid(t)) continue;
          const int j0 = std::max(0, t - r), j1 = std::min(t_len - 1, t + r);
          for (int hh = 0; hh < h; ++hh)
            for (int j = j0; j <= j1; ++j) {
              const Real g = ds.at(t, hh, j - t + r) * inv_sqrt_d;
              if (g == Real(0)) continue;
              for (int e = 0; e < d; ++e)
                pq.grad()[(t * h + hh) * d + e] += g * pk.at(j, hh, e);
            }
        }
      }
      if (pk.requires_grad() || pv.requires_grad()) {
        // gather over key positions
#pragma omp parallel for schedule(static)
        for (int j = 0; j < t_len; ++j) {
          if (!valid(j)) continue;
          const int t0 = std::max(0, j - r), t1 = std::min(t_len - 1, j + r);
          for (int hh = 0; hh < h; ++hh)
            for (int t = t0; t <= t1; ++t) {
              if (!valid(t)) continue;
              const int w = j - t + r;
              if (pk.requires_grad()) {
                const Real g = ds.at(t, hh, w) * inv_sqrt_d;
                if (g != Real(0))
                  for (int e = 0; e < d; ++e)
                    pk.grad()[(j * h + hh) * d + e] += g * pq.at(t, hh, e);
              }
              if (pv.requires_grad()) {
                const Real a = at.at(t, hh, w);
                if (a != Real(0))
                  for (int e = 0; e < d; ++e)
                    pv.grad()[(j * h + hh) * d + e] += a * o.grad()[(t * h + hh) * d + e];
              }
            }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Masked reductions

// Mean of valid rows of x [T x C] -> [C]. Rejects fully-masked input.
template <class Real>
T<Real> masked_mean_rows(const T<Real>& x, const Mask& mask = {}) {
  detail::require(x.rank() == 2, "masked_mean_rows: input must be T x C");
  const int t_len = x.dim(0), c = x.dim(1);
  detail::require(mask.empty() || static_cast<int>(mask.size()) == t_len,
                  "masked_mean_rows: mask length mismatch");
  int n_valid = 0;
  for (int t = 0; t < t_len; ++t)
    if (mask_at(mask, static_cast<std::size_t>(t))) ++n_valid;
  detail::require(n_valid > 0, "masked_mean_rows: all rows masked");
  T<Real> out = T<Real>::zeros({c});
  for (int t = 0; t < t_len; ++t) {
    if (!mask_at(mask, static_cast<std::size_t>(t))) continue;
    for (int j = 0; j < c; ++j) out.at(j) += x.at(t, j);
  }
  for (int j = 0; j < c; ++j) out.at(j) /= Real(n_valid);
  if (track_grad(x)) {
    Mask mask_copy = mask;
    out.set_node({x}, [t_len, c, n_valid, mask_copy](T<Real>& o) {
      auto& px = o.node()->parents[0];
      for (int t = 0; t < t_len; ++t) {
        if (!mask_at(mask_copy, static_cast<std::size_t>(t))) continue;
        for (int j = 0; j < c; ++j) px.grad()[t * c + j] += o.grad()[j] / Real(n_valid);
      }
    });
  }
  return out;
}

// Stack [N_i x C] blocks vertically -> [sum N_i x C].
template <class Real>
T<Real> concat_rows(const std::vector<T<Real>>& parts) {
  detail::require(!parts.empty(), "concat_rows: empty input");
  const int c = parts[0].shape().back();
  int total = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == 2 && p.dim(1) == c, "concat_rows: column count mismatch");
    total += p.dim(0);
  }
  T<Real> out = T<Real>::zeros({total, c});
  int row = 0;
  bool needs = false;
  for (const auto& p : parts) {
    for (int i = 0; i < p.dim(0); ++i)
      for (int j = 0; j < c; ++j) out.at(row + i, j) = p.at(i, j);
    row += p.dim(0);
    needs = needs || track_grad(p);
  }
  if (needs) {
    out.set_node(parts, [c](T<Real>& o) {
      int row2 = 0;
      for (auto& p : o.node()->parents) {
        if (p.requires_grad())
          for (int i = 0; i < p.dim(0); ++i)
            for (int j = 0; j < c; ++j) p.grad()[i * c + j] += o.grad()[(row2 + i) * c + j];
        row2 += p.dim(0);
      }
    });
  }
  return out;
}

// Select rows of x [T x C] by index -> [N x C]. Backward scatter-adds.
template <class Real>
T<Real> gather_rows(const T<Real>& x, const std::vector<int>& indices) {
  detail::require(x.rank() == 2, "gather_rows: input must be T x C");
  const int t_len = x.dim(0), c = x.dim(1);
  const int n = static_cast<int>(indices.size());
  detail::require(n > 0, "gather_rows: empty index list");
  for (int i : indices)
    detail::require(i >= 0 && i < t_len, "gather_rows: index out of range");
  T<Real> out = T<Real>::zeros({n, c});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) out.at(i, j) = x.at(indices[i], j);
  if (track_grad(x)) {
    std::vector<int> idx = indices;
    out.set_node({x}, [idx, c](T<Real>& o) {
      auto& px = o.node()->parents[0];
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (int j = 0; j < c; ++j)
          px.grad()[idx[i] * c + j] += o.grad()[i * c + j];
    });
  }
  return out;
}

// Zero out invalid rows (keeps masked positions from leaking into later ops).
template <class Real>
T<Real> mask_rows(const T<Real>& x, const Mask& mask) {
  if (mask.empty()) return x;
  detail::require(x.rank() == 2 && static_cast<int>(mask.size()) == x.dim(0),
                  "mask_rows: mask length mismatch");
  const int t_len = x.dim(0), c = x.dim(1);
  T<Real> out = T<Real>::zeros({t_len, c});
  for (int t = 0; t < t_len; ++t)
    if (mask[static_cast<std::size_t>(t)])
      for (int j = 0; j < c; ++j) out.at(t, j) = x.at(t, j);
  if (track_grad(x)) {
    Mask mask_copy = mask;
    out.set_node({x}, [t_len, c, mask_copy](T<Real>& o) {
      auto& px = o.node()->parents[0];
      for (int t = 0; t < t_len; ++t)
        if (mask_copy[static_cast<std::size_t>(t)])
          for (int j = 0; j < c; ++j) px.grad()[t * c + j] += o.grad()[t * c + j];
    });
  }
  return out;
}

}  // namespace egnlq::ops
