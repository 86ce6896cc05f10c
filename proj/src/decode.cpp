#include "egnlq/decode.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace egnlq {

double tiou(const Segment& a, const Segment& b) {
  const double inter =
      std::max(0.0, std::min(a.end_sec, b.end_sec) - std::max(a.start_sec, b.start_sec));
  const double uni = (a.end_sec - a.start_sec) + (b.end_sec - b.start_sec) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

std::vector<Segment> decode_candidates(const std::vector<PointSpec>& points,
                                       const std::vector<double>& cls_logits,
                                       const std::vector<std::array<double, 2>>& offsets,
                                       double dt, double duration_sec, const DecodeConfig& cfg) {
  if (points.size() != cls_logits.size() || points.size() != offsets.size())
    throw std::invalid_argument("decode_candidates: per-point arrays disagree");
  struct Cand {
    Segment seg;
    std::size_t index;
  };
  std::vector<Cand> cands;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double score = 1.0 / (1.0 + std::exp(-cls_logits[i]));
    if (score < cfg.score_threshold) continue;
    const auto& p = points[i];
    const double unit = p.stride * dt;
    Segment s;
    s.start_sec = std::clamp(p.timestamp_sec - offsets[i][0] * unit, 0.0, duration_sec);
    s.end_sec = std::clamp(p.timestamp_sec + offsets[i][1] * unit, 0.0, duration_sec);
    s.score = score;
    cands.push_back({s, i});
  }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.seg.score != b.seg.score) return a.seg.score > b.seg.score;
    if (a.seg.start_sec != b.seg.start_sec) return a.seg.start_sec < b.seg.start_sec;
    return a.index < b.index;
  });
  if (static_cast<int>(cands.size()) > cfg.pre_nms_topk) cands.resize(cfg.pre_nms_topk);
  std::vector<Segment> out;
  out.reserve(cands.size());
  for (auto& c : cands) out.push_back(c.seg);
  return out;
}

std::vector<Segment> soft_nms(std::vector<Segment> candidates, const SoftNmsConfig& cfg) {
  if (cfg.sigma <= 0) throw std::invalid_argument("soft_nms: sigma must be positive");
  struct Entry {
    Segment seg;
    std::size_t index;
    bool alive = true;
  };
  std::vector<Entry> pool;
  pool.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) pool.push_back({candidates[i], i, true});

  std::vector<Segment> selected;
  while (static_cast<int>(selected.size()) < cfg.max_keep) {
    // highest score; ties by earlier start, then earlier original index
    const Entry* best = nullptr;
    for (const auto& e : pool) {
      if (!e.alive) continue;
      if (!best || e.seg.score > best->seg.score ||
          (e.seg.score == best->seg.score &&
           (e.seg.start_sec < best->seg.start_sec ||
            (e.seg.start_sec == best->seg.start_sec && e.index < best->index))))
        best = &e;
    }
    if (!best) break;
    selected.push_back(best->seg);
    const Segment picked = best->seg;
    const std::size_t picked_index = best->index;
    for (auto& e : pool) {
      if (!e.alive) continue;
      if (e.index == picked_index) {
        e.alive = false;
        continue;
      }
      const double iou = tiou(picked, e.seg);
      e.seg.score *= std::exp(-(iou * iou) / cfg.sigma);
      if (e.seg.score < cfg.min_score) e.alive = false;
    }
  }
  return selected;
}

}  // namespace egnlq
