#include "egnlq/annotations.hpp"

#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace egnlq {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& path, int line, const std::string& what) {
  throw std::runtime_error(path + ": line " + std::to_string(line) + ": " + what);
}

}  // namespace

std::vector<AnnotationRecord> load_annotations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open");
  const fs::path base = fs::path(path).parent_path();
  std::vector<AnnotationRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      fail(path, lineno, std::string("invalid JSON: ") + e.what());
    }
    AnnotationRecord r;
    try {
      r.clip_id = j.at("clip_id").get<std::string>();
      r.query_id = j.at("query_id").get<std::string>();
      r.query_path = j.at("query_path").get<std::string>();
      r.start_sec = j.at("start_sec").get<double>();
      r.end_sec = j.at("end_sec").get<double>();
      r.duration_sec = j.at("duration_sec").get<double>();
    } catch (const json::exception& e) {
      fail(path, lineno, std::string("missing or mistyped field: ") + e.what());
    }
    if (!(r.start_sec >= 0 && r.start_sec < r.end_sec && r.end_sec <= r.duration_sec))
      fail(path, lineno, "invalid interval: need 0 <= start < end <= duration");
    const fs::path qp = base / r.query_path;
    if (!fs::exists(qp)) fail(path, lineno, "query embedding file not found: " + qp.string());
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<PredictionRecord> load_predictions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open");
  std::vector<PredictionRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      fail(path, lineno, std::string("invalid JSON: ") + e.what());
    }
    PredictionRecord r;
    r.clip_id = j.at("clip_id").get<std::string>();
    r.query_id = j.at("query_id").get<std::string>();
    double prev = std::numeric_limits<double>::infinity();
    for (const auto& s : j.at("segments")) {
      Segment seg;
      seg.start_sec = s.at(0).get<double>();
      seg.end_sec = s.at(1).get<double>();
      seg.score = s.at(2).get<double>();
      seg.clip_id = r.clip_id;
      seg.query_id = r.query_id;
      if (!(seg.start_sec <= seg.end_sec)) fail(path, lineno, "segment with start > end");
      if (seg.score > prev) fail(path, lineno, "segment scores must be non-increasing");
      prev = seg.score;
      r.segments.push_back(seg);
    }
    out.push_back(std::move(r));
  }
  return out;
}

void write_predictions(const std::vector<PredictionRecord>& preds, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  for (const auto& p : preds) {
    json j;
    j["clip_id"] = p.clip_id;
    j["query_id"] = p.query_id;
    j["segments"] = json::array();
    for (const auto& s : p.segments)
      j["segments"].push_back({s.start_sec, s.end_sec, s.score});
    out << j.dump() << "\n";
  }
  if (!out) throw std::runtime_error(path + ": write failed");
}

}  // namespace egnlq
