#pragma once

#include <string>
#include <vector>

#include "egnlq/decode.hpp"

namespace egnlq {

struct AnnotationRecord {
  std::string clip_id;
  std::string query_id;
  std::string query_path;  // token-embedding file, relative to the annotation file
  double start_sec = 0;
  double end_sec = 0;
  double duration_sec = 0;
};

struct PredictionRecord {
  std::string clip_id;
  std::string query_id;
  std::vector<Segment> segments;  // scores non-increasing
};

// JSON-lines, one record per line. Invariant violations (start >= end, range
// outside [0, duration], missing embedding file) are reported with the line
// number.
std::vector<AnnotationRecord> load_annotations(const std::string& path);

std::vector<PredictionRecord> load_predictions(const std::string& path);
void write_predictions(const std::vector<PredictionRecord>& preds, const std::string& path);

}  // namespace egnlq
