#pragma once

#include <string>
#include <vector>

#include "egnlq/points.hpp"

namespace egnlq {

struct Segment {
  double start_sec = 0;
  double end_sec = 0;
  double score = 0;
  std::string clip_id;
  std::string query_id;
};

// Temporal IoU; 0 when both segments are points with zero union.
double tiou(const Segment& a, const Segment& b);

struct DecodeConfig {
  double score_threshold = 1e-3;
  int pre_nms_topk = 2000;
};

// Per-point sigmoid scores above threshold become segments around the point's
// timestamp; at most pre_nms_topk survive, sorted by (score desc, start asc,
// point index asc).
std::vector<Segment> decode_candidates(const std::vector<PointSpec>& points,
                                       const std::vector<double>& cls_logits,
                                       const std::vector<std::array<double, 2>>& offsets,
                                       double dt, double duration_sec,
                                       const DecodeConfig& cfg = {});

struct SoftNmsConfig {
  double sigma = 0.5;
  double min_score = 1e-3;
  int max_keep = 5;
};

// Gaussian SoftNMS: greedy selection, every remaining score decays by
// exp(-tiou^2 / sigma). Boundaries never change; scores never increase.
std::vector<Segment> soft_nms(std::vector<Segment> candidates, const SoftNmsConfig& cfg = {});

}  // namespace egnlq
