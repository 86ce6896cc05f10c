#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "egnlq/tensor.hpp"

// Naive single-threaded reference kernels. Tests use these as independent
// oracles for the parallel ops; the benchmark tool compares against them.

namespace egnlq::ref {

template <class Real>
std::vector<Real> matmul(const std::vector<Real>& a, const std::vector<Real>& b, int m, int k,
                         int n) {
  std::vector<Real> out(static_cast<std::size_t>(m) * n, Real(0));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      for (int p = 0; p < k; ++p) out[i * n + j] += a[i * k + p] * b[p * n + j];
  return out;
}

template <class Real>
std::vector<Real> conv1d(const std::vector<Real>& x, const std::vector<Real>& w,
                         const std::vector<Real>& b, int t_in, int c_in, int c_out, int k,
                         int stride, bool depthwise, const Mask& mask = {}) {
  const int pad = k / 2;
  const int t_out = (t_in + stride - 1) / stride;
  std::vector<Real> out(static_cast<std::size_t>(t_out) * c_out, Real(0));
  auto xv = [&](int t, int c) -> Real {
    if (t < 0 || t >= t_in || !mask_at(mask, static_cast<std::size_t>(t))) return Real(0);
    return x[t * c_in + c];
  };
  for (int to = 0; to < t_out; ++to)
    for (int co = 0; co < c_out; ++co) {
      Real s = b[co];
      if (depthwise) {
        for (int kk = 0; kk < k; ++kk) s += w[co * k + kk] * xv(to * stride + kk - pad, co);
      } else {
        for (int ci = 0; ci < c_in; ++ci)
          for (int kk = 0; kk < k; ++kk)
            s += w[(co * c_in + ci) * k + kk] * xv(to * stride + kk - pad, ci);
      }
      out[to * c_out + co] = s;
    }
  return out;
}

// Dense attention with an explicit band mask; q,k,v are [T x H x d].
template <class Real>
std::vector<Real> windowed_attention(const std::vector<Real>& q, const std::vector<Real>& k,
                                     const std::vector<Real>& v, int t_len, int h, int d,
                                     int window, const Mask& mask = {}) {
  const int r = (window - 1) / 2;
  const Real scale = Real(1) / std::sqrt(Real(d));
  std::vector<Real> out(static_cast<std::size_t>(t_len) * h * d, Real(0));
  std::vector<Real> score(static_cast<std::size_t>(t_len));
  for (int t = 0; t < t_len; ++t) {
    if (!mask_at(mask, static_cast<std::size_t>(t))) continue;
    for (int hh = 0; hh < h; ++hh) {
      Real mx = -std::numeric_limits<Real>::infinity();
      for (int j = 0; j < t_len; ++j) {
        score[j] = -std::numeric_limits<Real>::infinity();
        if (std::abs(j - t) > r || !mask_at(mask, static_cast<std::size_t>(j))) continue;
        Real s = 0;
        for (int e = 0; e < d; ++e) s += q[(t * h + hh) * d + e] * k[(j * h + hh) * d + e];
        score[j] = s * scale;
        mx = std::max(mx, score[j]);
      }
      Real z = 0;
      for (int j = 0; j < t_len; ++j) {
        if (score[j] == -std::numeric_limits<Real>::infinity()) {
          score[j] = 0;
          continue;
        }
        score[j] = std::exp(score[j] - mx);
        z += score[j];
      }
      for (int j = 0; j < t_len; ++j) {
        const Real a = score[j] / z;
        for (int e = 0; e < d; ++e) out[(t * h + hh) * d + e] += a * v[(j * h + hh) * d + e];
      }
    }
  }
  return out;
}

template <class Real>
std::vector<Real> softmax(const std::vector<Real>& x) {
  Real mx = -std::numeric_limits<Real>::infinity();
  for (Real v : x) mx = std::max(mx, v);
  std::vector<Real> out(x.size());
  Real z = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - mx);
    z += out[i];
  }
  for (auto& v : out) v /= z;
  return out;
}

}  // namespace egnlq::ref
