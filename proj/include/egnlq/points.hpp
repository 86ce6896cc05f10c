#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <vector>

#include "egnlq/tensor.hpp"

namespace egnlq {

// One event candidate on the pyramid. Regression ranges tile (0, inf) across
// levels as half-open octaves (min, max]; offsets are in grid units of the
// point's own level.
struct PointSpec {
  int level = 0;
  int stride = 1;
  int index = 0;             // time index within the level
  double timestamp_sec = 0;  // (index + 0.5) * stride * dt
  double range_min = 0;      // exclusive
  double range_max = 0;      // inclusive; +inf on the top level
};

struct Targets {
  std::vector<std::uint8_t> labels;                 // per point, 0/1
  std::vector<std::array<double, 2>> offsets;       // (d_left, d_right), valid for positives
  int n_pos = 0;
};

// Range bounds for a level: (0,4], (4,8], (8,16], ... , (64, inf).
std::array<double, 2> regression_range(int level, int n_levels);

// One point per valid position of each level.
std::vector<PointSpec> generate_points(const std::vector<int>& level_lengths,
                                       const std::vector<Mask>& level_masks,
                                       const std::vector<int>& strides, double dt);

// Positive iff the timestamp lies inside [gt_start, gt_end] and the larger
// offset falls in the level's range.
Targets assign_labels(const std::vector<PointSpec>& points, double gt_start, double gt_end,
                      double dt);

}  // namespace egnlq
