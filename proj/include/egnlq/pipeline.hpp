#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "egnlq/annotations.hpp"
#include "egnlq/checkpoint.hpp"
#include "egnlq/decode.hpp"
#include "egnlq/losses.hpp"
#include "egnlq/metrics.hpp"
#include "egnlq/model.hpp"
#include "egnlq/optim.hpp"
#include "egnlq/points.hpp"

namespace egnlq {

struct TrainConfig {
  ModelConfig model;
  double base_lr = 1e-3;
  int epochs = 9;
  int batch_size = 16;
  double warmup_frac = 0.05;
  AdamWConfig adamw;
  double grad_clip = 1.0;
  double lambda_reg = 1.0;
  double lambda_nce = 1.0;
  std::uint64_t seed = 1;
  // early stop, off by default: every eval_every epochs check training-set
  // R@1@0.5 >= target_r1 and epoch loss <= target_loss_ratio * first epoch
  int eval_every = 0;
  double target_r1 = 0.9;
  double target_loss_ratio = 0.25;
};

TrainConfig load_train_config(const std::string& path);

struct Sample {
  std::string clip_id;
  std::string query_id;
  Tensor<float> features;  // T x D
  double dt = 1.0;
  double duration_sec = 0;
  Tensor<float> text;  // L x D_t
  double gt_start = 0;
  double gt_end = 0;
};

std::vector<Sample> load_dataset(const std::string& data_dir);

// Per-sample three-term loss on a full forward pass.
template <class Real>
struct LossBreakdown {
  Tensor<Real> total, cls, reg, nce;
};

template <class Real>
LossBreakdown<Real> sample_loss(const GroundingModel<Real>& model, const Tensor<Real>& features,
                                const Tensor<Real>& text, double dt, double gt_start,
                                double gt_end, double lambda_reg, double lambda_nce) {
  LossBreakdown<Real> out;
  auto fwd = model.forward(features, {}, text, {});
  std::vector<int> lengths, strides;
  std::vector<Mask> masks;
  for (const auto& lvl : fwd.pyramid) {
    lengths.push_back(lvl.feats.dim(0));
    strides.push_back(lvl.stride);
    masks.push_back(lvl.mask);
  }
  const auto points = generate_points(lengths, masks, strides, dt);
  const auto targets = assign_labels(points, gt_start, gt_end, dt);

  // per-level index lists in point order
  const int n_levels = static_cast<int>(lengths.size());
  std::vector<std::vector<int>> valid_idx(n_levels), pos_idx(n_levels);
  std::vector<std::array<double, 2>> pos_targets;
  for (std::size_t i = 0; i < points.size(); ++i) {
    valid_idx[points[i].level].push_back(points[i].index);
    if (targets.labels[i]) {
      pos_idx[points[i].level].push_back(points[i].index);
      pos_targets.push_back(targets.offsets[i]);
    }
  }

  std::vector<Tensor<Real>> cls_parts, nce_parts, reg_parts;
  for (int l = 0; l < n_levels; ++l) {
    if (valid_idx[l].empty()) continue;
    auto logits2d = ops::reshape(fwd.heads.cls_logits[l], {lengths[l], 1});
    cls_parts.push_back(ops::gather_rows(logits2d, valid_idx[l]));
    nce_parts.push_back(ops::gather_rows(fwd.fused[l], valid_idx[l]));
    if (!pos_idx[l].empty())
      reg_parts.push_back(ops::gather_rows(fwd.heads.offsets[l], pos_idx[l]));
  }
  auto cls_all = ops::concat_rows(cls_parts);
  cls_all = ops::reshape(cls_all, {cls_all.dim(0)});
  out.cls = losses::focal_loss(cls_all, targets.labels, targets.n_pos);

  // reg_parts follow level-major order, but pos_targets were collected in
  // global point order, which is the same level-major order
  out.reg = reg_parts.empty() ? Tensor<Real>::scalar(Real(0))
                              : losses::diou_loss(ops::concat_rows(reg_parts), pos_targets);
  out.nce = losses::nce_loss(ops::concat_rows(nce_parts), targets.labels, fwd.text.pooled,
                             model.config().nce_temperature);
  out.total = losses::total_loss(out.cls, out.reg, out.nce, lambda_reg, lambda_nce);
  return out;
}

struct FitResult {
  std::vector<double> epoch_losses;
  int epochs_run = 0;
  bool early_stopped = false;
};

// Deterministic training loop: seeded shuffling, gradient clipping at global
// norm 1, AdamW with warmup+cosine. Writes the final checkpoint to out_ckpt
// and the best-loss epoch to out_ckpt + ".best".
FitResult fit(const TrainConfig& cfg, const std::vector<Sample>& dataset,
              const std::string& out_ckpt, std::ostream* log = nullptr);

Checkpoint model_to_checkpoint(const GroundingModel<float>& model, std::uint64_t seed);
GroundingModel<float> model_from_checkpoint(const Checkpoint& ckpt);

// Decode + SoftNMS for one sample with an already-run forward pass.
std::vector<Segment> decode_sample(const GroundingModel<float>& model,
                                   const GroundingModel<float>::ForwardOut& fwd,
                                   const Sample& sample, int topk,
                                   const DecodeConfig& dec = {}, double nms_sigma = 0.5);

std::vector<PredictionRecord> predict_dataset(const GroundingModel<float>& model,
                                              const std::vector<Sample>& dataset, int topk);

void predict_to_file(const std::string& ckpt_path, const std::string& data_dir,
                     const std::string& out_path, int topk);

EvalResult evaluate_files(const std::string& preds_path, const std::string& ann_path,
                          const std::vector<int>& ks, const std::vector<double>& thresholds);

// Full gradient suite (64-bit): every differentiable op at 1e-6, the whole
// model + loss at 1e-4. Prints one line per check; returns overall pass.
bool run_gradient_suite(std::ostream& os);

}  // namespace egnlq
