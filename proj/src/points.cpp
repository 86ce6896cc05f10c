#include "egnlq/points.hpp"

#include <cmath>
#include <stdexcept>

namespace egnlq {

std::array<double, 2> regression_range(int level, int n_levels) {
  const double lo = level == 0 ? 0.0 : 4.0 * std::pow(2.0, level - 1);
  const double hi =
      level == n_levels - 1 ? std::numeric_limits<double>::infinity() : 4.0 * std::pow(2.0, level);
  return {lo, hi};
}

std::vector<PointSpec> generate_points(const std::vector<int>& level_lengths,
                                       const std::vector<Mask>& level_masks,
                                       const std::vector<int>& strides, double dt) {
  if (dt <= 0) throw std::invalid_argument("generate_points: dt must be positive");
  if (level_lengths.size() != strides.size() || level_lengths.size() != level_masks.size())
    throw std::invalid_argument("generate_points: level arrays disagree");
  const int n_levels = static_cast<int>(level_lengths.size());
  std::vector<PointSpec> points;
  for (int l = 0; l < n_levels; ++l) {
    const auto range = regression_range(l, n_levels);
    for (int i = 0; i < level_lengths[l]; ++i) {
      if (!mask_at(level_masks[l], static_cast<std::size_t>(i))) continue;
      PointSpec p;
      p.level = l;
      p.stride = strides[l];
      p.index = i;
      p.timestamp_sec = (i + 0.5) * strides[l] * dt;
      p.range_min = range[0];
      p.range_max = range[1];
      points.push_back(p);
    }
  }
  return points;
}

Targets assign_labels(const std::vector<PointSpec>& points, double gt_start, double gt_end,
                      double dt) {
  if (!(gt_start < gt_end))
    throw std::invalid_argument("assign_labels: ground truth must satisfy start < end");
  Targets out;
  out.labels.assign(points.size(), 0);
  out.offsets.assign(points.size(), {0.0, 0.0});
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& p = points[i];
    const double t = p.timestamp_sec;
    if (t < gt_start || t > gt_end) continue;
    const double unit = p.stride * dt;
    const double d_left = (t - gt_start) / unit;
    const double d_right = (gt_end - t) / unit;
    const double m = std::max(d_left, d_right);
    if (m > p.range_min && m <= p.range_max) {
      out.labels[i] = 1;
      out.offsets[i] = {d_left, d_right};
      ++out.n_pos;
    }
  }
  return out;
}

}  // namespace egnlq
