#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "egnlq/ops.hpp"
#include "egnlq/points.hpp"
#include "egnlq/tensor.hpp"

// The three training terms: sigmoid focal classification, DIoU boundary
// regression, and an InfoNCE term contrasting fused in-event moments against
// the rest. Each is a custom op with a hand-derived VJP; the gradient suite
// checks all of them against finite differences.

namespace egnlq::losses {

template <class Real>
using T = Tensor<Real>;

constexpr double kFocalAlpha = 0.25;
constexpr double kFocalGamma = 2.0;

namespace detail {

inline double softplus(double x) {
  return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0);
}
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace detail

// Sigmoid focal loss summed over points, divided by max(n_pos, 1).
template <class Real>
T<Real> focal_loss(const T<Real>& logits, const std::vector<std::uint8_t>& labels, int n_pos) {
  ops::detail::require(logits.numel() == labels.size(), "focal_loss: label count mismatch");
  const double norm = 1.0 / std::max(n_pos, 1);
  double total = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double l = static_cast<double>(logits.values()[i]);
    const double p = detail::sigmoid(l);
    if (labels[i]) {
      total += kFocalAlpha * std::pow(1.0 - p, kFocalGamma) * detail::softplus(-l);
    } else {
      total += (1.0 - kFocalAlpha) * std::pow(p, kFocalGamma) * detail::softplus(l);
    }
  }
  T<Real> out = T<Real>::scalar(Real(total * norm));
  if (track_grad(logits)) {
    std::vector<std::uint8_t> lab = labels;
    out.set_node({logits}, [lab, norm](T<Real>& o) {
      auto& pl = o.node()->parents[0];
      const double g = static_cast<double>(o.grad()[0]) * norm;
      for (std::size_t i = 0; i < lab.size(); ++i) {
        const double l = static_cast<double>(pl.values()[i]);
        const double p = detail::sigmoid(l);
        double d;
        if (lab[i]) {
          const double q = 1.0 - p;
          d = -kFocalAlpha * std::pow(q, kFocalGamma) *
              (kFocalGamma * p * detail::softplus(-l) + q);
        } else {
          d = (1.0 - kFocalAlpha) * std::pow(p, kFocalGamma) *
              (kFocalGamma * (1.0 - p) * detail::softplus(l) + p);
        }
        pl.grad()[i] += Real(g * d);
      }
    });
  }
  return out;
}

// DIoU of two segments: 1 - IoU + (center gap / enclosing length)^2.
inline double diou_pair(double ps, double pe, double gs, double ge) {
  const double inter = std::max(0.0, std::min(pe, ge) - std::max(ps, gs));
  const double uni = (pe - ps) + (ge - gs) - inter;
  const double iou = uni > 0 ? inter / uni : 0.0;
  const double enclose = std::max(pe, ge) - std::min(ps, gs);
  const double gap = 0.5 * ((ps + pe) - (gs + ge));
  const double penalty = enclose > 0 ? (gap * gap) / (enclose * enclose) : 0.0;
  return 1.0 - iou + penalty;
}

// Mean DIoU over positives. `pred` is [P x 2] non-negative offsets in grid
// units; targets likewise. Zero (no gradient) when P = 0.
template <class Real>
T<Real> diou_loss(const T<Real>& pred, const std::vector<std::array<double, 2>>& target) {
  if (target.empty()) return T<Real>::scalar(Real(0));
  ops::detail::require(pred.rank() == 2 && pred.dim(1) == 2 &&
                           pred.dim(0) == static_cast<int>(target.size()),
                       "diou_loss: expected P x 2 predictions");
  const int n = static_cast<int>(target.size());
  double total = 0;
  for (int i = 0; i < n; ++i) {
    const double ol = pred.at(i, 0), orr = pred.at(i, 1);
    total += diou_pair(-ol, orr, -target[i][0], target[i][1]);
  }
  T<Real> out = T<Real>::scalar(Real(total / n));
  if (track_grad(pred)) {
    std::vector<std::array<double, 2>> tgt = target;
    out.set_node({pred}, [tgt, n](T<Real>& o) {
      auto& pp = o.node()->parents[0];
      const double g = static_cast<double>(o.grad()[0]) / n;
      for (int i = 0; i < n; ++i) {
        const double ol = pp.at(i, 0), orr = pp.at(i, 1);
        const double gl = tgt[i][0], gr = tgt[i][1];
        const double ps = -ol, pe = orr, gs = -gl, ge = gr;
        const double inter = std::max(0.0, std::min(pe, ge) - std::max(ps, gs));
        const double uni = (pe - ps) + (ge - gs) - inter;
        const double enclose = std::max(pe, ge) - std::min(ps, gs);
        const double gap = 0.5 * ((ps + pe) - (gs + ge));
        // d inter / d ps and d inter / d pe (subgradients at ties)
        const double di_dps = (inter > 0 && ps > gs) ? -1.0 : 0.0;
        const double di_dpe = (inter > 0 && pe < ge) ? 1.0 : 0.0;
        const double du_dps = -1.0 - di_dps;
        const double du_dpe = 1.0 - di_dpe;
        double diou_dps = 0, diou_dpe = 0;
        if (uni > 0) {
          diou_dps = (di_dps * uni - inter * du_dps) / (uni * uni);
          diou_dpe = (di_dpe * uni - inter * du_dpe) / (uni * uni);
        }
        const double de_dps = (ps < gs) ? -1.0 : 0.0;
        const double de_dpe = (pe > ge) ? 1.0 : 0.0;
        double dpen_dps = 0, dpen_dpe = 0;
        if (enclose > 0) {
          const double e2 = enclose * enclose;
          dpen_dps = (gap * 0.5 * 2.0) / e2 - (gap * gap) * 2.0 * de_dps / (e2 * enclose);
          dpen_dpe = (gap * 0.5 * 2.0) / e2 - (gap * gap) * 2.0 * de_dpe / (e2 * enclose);
        }
        const double dl_dps = -diou_dps + dpen_dps;
        const double dl_dpe = -diou_dpe + dpen_dpe;
        // ps = -ol, pe = orr
        pp.grad()[i * 2 + 0] += Real(g * (-dl_dps));
        pp.grad()[i * 2 + 1] += Real(g * dl_dpe);
      }
    });
  }
  return out;
}

// InfoNCE over fused point features: s_t = cos(z_t, q) / tau; loss is
// -log(sum_pos e^s / sum_all e^s). Zero-norm vectors are guarded by eps in
// the denominators, so the cosine of a zero vector is 0.
template <class Real>
T<Real> nce_loss(const T<Real>& z, const std::vector<std::uint8_t>& positive, const T<Real>& q,
                 double tau) {
  ops::detail::require(tau > 0, "nce_loss: tau must be positive");
  ops::detail::require(z.rank() == 2 && q.rank() == 1 && z.dim(1) == q.dim(0),
                       "nce_loss: shape mismatch " + z.shape_str() + " vs " + q.shape_str());
  ops::detail::require(z.numel() / z.dim(1) == positive.size(),
                       "nce_loss: positive flag count mismatch");
  const int n = z.dim(0), c = z.dim(1);
  int n_pos = 0;
  for (auto f : positive) n_pos += f ? 1 : 0;
  if (n_pos == 0) return T<Real>::scalar(Real(0));

  constexpr double kEps = 1e-8;
  double qn = 0;
  for (int j = 0; j < c; ++j) qn += double(q.at(j)) * double(q.at(j));
  qn = std::max(std::sqrt(qn), kEps);

  std::vector<double> sim(n), zn(n);
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    double dot = 0, nz = 0;
    for (int j = 0; j < c; ++j) {
      dot += double(z.at(i, j)) * double(q.at(j));
      nz += double(z.at(i, j)) * double(z.at(i, j));
    }
    zn[i] = std::max(std::sqrt(nz), kEps);
    sim[i] = dot / (zn[i] * qn * tau);
    mx = std::max(mx, sim[i]);
  }
  double z_all = 0, z_pos = 0;
  for (int i = 0; i < n; ++i) {
    const double e = std::exp(sim[i] - mx);
    z_all += e;
    if (positive[i]) z_pos += e;
  }
  const double loss = std::log(z_all) - std::log(z_pos);
  T<Real> out = T<Real>::scalar(Real(loss));
  if (track_grad(z) || track_grad(q)) {
    std::vector<std::uint8_t> pos = positive;
    out.set_node({z, q}, [pos, tau, n, c](T<Real>& o) {
      constexpr double kEps = 1e-8;
      auto& pz = o.node()->parents[0];
      auto& pq = o.node()->parents[1];
      const double g = static_cast<double>(o.grad()[0]);
      double qn2 = 0;
      for (int j = 0; j < c; ++j) qn2 += double(pq.at(j)) * double(pq.at(j));
      const double qn = std::max(std::sqrt(qn2), kEps);
      std::vector<double> sim(n), zn(n), dot(n);
      double mx = -std::numeric_limits<double>::infinity();
      for (int i = 0; i < n; ++i) {
        double d = 0, nz = 0;
        for (int j = 0; j < c; ++j) {
          d += double(pz.at(i, j)) * double(pq.at(j));
          nz += double(pz.at(i, j)) * double(pz.at(i, j));
        }
        dot[i] = d;
        zn[i] = std::max(std::sqrt(nz), kEps);
        sim[i] = d / (zn[i] * qn * tau);
        mx = std::max(mx, sim[i]);
      }
      double z_all = 0, z_pos = 0;
      for (int i = 0; i < n; ++i) {
        const double e = std::exp(sim[i] - mx);
        z_all += e;
        if (pos[i]) z_pos += e;
      }
      for (int i = 0; i < n; ++i) {
        const double e = std::exp(sim[i] - mx);
        const double ds = e / z_all - (pos[i] ? e / z_pos : 0.0);
        const double gs = g * ds / tau;
        if (gs == 0.0) continue;
        // d cos / d z and d cos / d q
        const double inv = 1.0 / (zn[i] * qn);
        const double cosv = dot[i] * inv;
        for (int j = 0; j < c; ++j) {
          const double zj = double(pz.at(i, j));
          const double qj = double(pq.at(j));
          if (pz.requires_grad())
            pz.grad()[i * c + j] += Real(gs * (qj * inv - cosv * zj / (zn[i] * zn[i])));
          if (pq.requires_grad())
            pq.grad()[j] += Real(gs * (zj * inv - cosv * qj / (qn * qn)));
        }
      }
    });
  }
  return out;
}

// L = focal + lambda_reg * diou + lambda_nce * nce
template <class Real>
T<Real> total_loss(const T<Real>& cls, const T<Real>& reg, const T<Real>& nce, double lambda_reg,
                   double lambda_nce) {
  return ops::add(cls, ops::add(ops::scale(reg, Real(lambda_reg)),
                                ops::scale(nce, Real(lambda_nce))));
}

}  // namespace egnlq::losses
