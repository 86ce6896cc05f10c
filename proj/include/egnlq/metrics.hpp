#pragma once

#include <string>
#include <vector>

#include "egnlq/decode.hpp"

namespace egnlq {

struct QueryResult {
  std::string query_id;
  std::vector<Segment> predictions;  // ranked by score descending
  Segment ground_truth;
};

// Fraction of queries whose top-k predictions contain one with tiou >= theta.
// Queries with no predictions count as misses. Duplicate query ids rejected.
double recall_at_k(const std::vector<QueryResult>& queries, int k, double theta);

struct EvalResult {
  // recall[ki][ti]: ki over ks, ti over thresholds
  std::vector<int> ks = {1, 5};
  std::vector<double> thresholds = {0.3, 0.5};
  std::vector<std::vector<double>> recall;
  double mean_r1 = 0;  // average of the R@1 cells
  int query_count = 0;
};

EvalResult evaluate(const std::vector<QueryResult>& queries, const std::vector<int>& ks = {1, 5},
                    const std::vector<double>& thresholds = {0.3, 0.5});

// mean_r1 from the two R@1 percentage cells (the leaderboard arithmetic)
double mean_r1_percent(double r1_at_03, double r1_at_05);

// Percent with 2 decimals, round-half-up.
std::string format_percent(double fraction_or_percent, bool is_percent = false);

std::string render_text(const EvalResult& r);
std::string render_json(const EvalResult& r);

}  // namespace egnlq
