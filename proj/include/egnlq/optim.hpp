#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "egnlq/model.hpp"

namespace egnlq {

struct Schedule {
  double base_lr = 1e-3;
  int warmup_steps = 0;
  int total_steps = 1;

  void validate() const {
    if (!(warmup_steps >= 0 && warmup_steps < total_steps))
      throw std::invalid_argument("Schedule: need 0 <= warmup_steps < total_steps");
  }
};

// Linear warm-up to base_lr, then cosine decay to zero.
inline double lr_at(int step, const Schedule& s) {
  s.validate();
  if (step < 0 || step > s.total_steps) throw std::invalid_argument("lr_at: step out of range");
  if (step < s.warmup_steps)
    return s.base_lr * static_cast<double>(step + 1) / static_cast<double>(s.warmup_steps);
  const double progress = static_cast<double>(step - s.warmup_steps) /
                          static_cast<double>(s.total_steps - s.warmup_steps);
  return s.base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;  // applied to weight matrices only
};

template <class Real>
struct OptimState {
  struct Slot {
    std::vector<Real> m, v;
  };
  std::map<std::string, Slot> slots;
  long step = 0;
};

// Decoupled decay goes to rank >= 2 tensors (weight matrices and conv
// kernels); norms and biases are rank 1 and skip it.
template <class Real>
inline bool decays(const Tensor<Real>& param) {
  return param.rank() >= 2;
}

// Bias-corrected AdamW step over every parameter. Throws on non-finite
// gradients so a bad step is rejected rather than silently applied.
template <class Real>
void adamw_step(ParamStore<Real>& params, OptimState<Real>& state, double lr,
                const AdamWConfig& cfg = {}) {
  if (lr < 0) throw std::invalid_argument("adamw_step: negative learning rate");
  for (const auto& [name, p] : params.all()) {
    if (!p.has_grad()) continue;
    for (Real g : p.grad())
      if (!std::isfinite(static_cast<double>(g)))
        throw std::runtime_error("adamw_step: non-finite gradient in " + name);
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params.all()) {
    auto& slot = state.slots[name];
    if (slot.m.empty()) {
      slot.m.assign(p.numel(), Real(0));
      slot.v.assign(p.numel(), Real(0));
    }
    const bool wd = decays(p) && cfg.weight_decay > 0;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double g = static_cast<double>(p.grad()[i]);
      slot.m[i] = Real(cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g);
      slot.v[i] = Real(cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g);
      const double m_hat = slot.m[i] / bc1;
      const double v_hat = slot.v[i] / bc2;
      double w = static_cast<double>(p.values()[i]);
      if (wd) w -= lr * cfg.weight_decay * w;
      w -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
      p.values()[i] = Real(w);
    }
  }
}

template <class Real>
double global_grad_norm(const ParamStore<Real>& params) {
  double sq = 0;
  for (const auto& [name, p] : params.all()) {
    if (!p.has_grad()) continue;
    for (Real g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

template <class Real>
void clip_grad_norm(ParamStore<Real>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm <= max_norm || norm == 0) return;
  const Real scale = Real(max_norm / norm);
  for (auto& [name, p] : params.all()) {
    if (!p.has_grad()) continue;
    for (auto& g : p.grad()) g *= scale;
  }
}

}  // namespace egnlq
