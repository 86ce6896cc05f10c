#include "egnlq/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace egnlq {

namespace {

void check_unique_ids(const std::vector<QueryResult>& queries) {
  std::set<std::string> seen;
  for (const auto& q : queries)
    if (!seen.insert(q.query_id).second)
      throw std::invalid_argument("recall_at_k: duplicate query id " + q.query_id);
}

// round-half-up to 2 decimals; tiny slack so values like 8.824999999 from
// 2-decimal inputs land on the intended .825 tie
double round2(double percent) { return std::floor(percent * 100.0 + 0.5 + 1e-7) / 100.0; }

}  // namespace

double recall_at_k(const std::vector<QueryResult>& queries, int k, double theta) {
  if (queries.empty()) return 0.0;
  check_unique_ids(queries);
  int hits = 0;
  for (const auto& q : queries) {
    const int top = std::min<int>(k, static_cast<int>(q.predictions.size()));
    for (int i = 0; i < top; ++i) {
      if (tiou(q.predictions[i], q.ground_truth) >= theta) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(queries.size());
}

EvalResult evaluate(const std::vector<QueryResult>& queries, const std::vector<int>& ks,
                    const std::vector<double>& thresholds) {
  EvalResult r;
  r.ks = ks;
  r.thresholds = thresholds;
  r.query_count = static_cast<int>(queries.size());
  r.recall.assign(ks.size(), std::vector<double>(thresholds.size(), 0.0));
  for (std::size_t ki = 0; ki < ks.size(); ++ki)
    for (std::size_t ti = 0; ti < thresholds.size(); ++ti)
      r.recall[ki][ti] = recall_at_k(queries, ks[ki], thresholds[ti]);
  // mean R@1 over the threshold cells of k=1, when present
  for (std::size_t ki = 0; ki < ks.size(); ++ki) {
    if (ks[ki] == 1 && !r.recall[ki].empty()) {
      double s = 0;
      for (double v : r.recall[ki]) s += v;
      r.mean_r1 = s / static_cast<double>(r.recall[ki].size());
    }
  }
  return r;
}

double mean_r1_percent(double r1_at_03, double r1_at_05) {
  return round2((r1_at_03 + r1_at_05) / 2.0);
}

std::string format_percent(double value, bool is_percent) {
  const double pct = is_percent ? value : value * 100.0;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", round2(pct));
  return buf;
}

std::string render_text(const EvalResult& r) {
  std::ostringstream os;
  os << "queries: " << r.query_count << "\n";
  for (std::size_t ki = 0; ki < r.ks.size(); ++ki)
    for (std::size_t ti = 0; ti < r.thresholds.size(); ++ti)
      os << "R@" << r.ks[ki] << " tIoU=" << r.thresholds[ti] << ": "
         << format_percent(r.recall[ki][ti]) << "\n";
  os << "mean R@1: " << format_percent(r.mean_r1) << "\n";
  return os.str();
}

std::string render_json(const EvalResult& r) {
  nlohmann::json j;
  j["query_count"] = r.query_count;
  for (std::size_t ki = 0; ki < r.ks.size(); ++ki)
    for (std::size_t ti = 0; ti < r.thresholds.size(); ++ti) {
      std::ostringstream key;
      key << "r" << r.ks[ki] << "_" << r.thresholds[ti];
      j["recall"][key.str()] = r.recall[ki][ti];
    }
  j["mean_r1"] = r.mean_r1;
  return j.dump(2);
}

}  // namespace egnlq
