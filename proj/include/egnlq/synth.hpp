#pragma once

#include <cstdint>
#include <string>

namespace egnlq {

// Desk-scale stand-in dataset: each clip hides one prototype signature inside
// a random ground-truth interval; the query embedding is a noisy linear image
// of the same prototype. Generation is a pure function of (spec, seed).
struct SyntheticSpec {
  int n_clips = 32;
  int t_min = 64;
  int t_max = 128;
  int feat_dim = 16;
  int n_prototypes = 4;  // Q
  int tokens = 4;        // L
  double noise = 0.1;    // sigma_n
  std::uint64_t seed = 1;

  void validate() const;
};

SyntheticSpec load_synthetic_spec(const std::string& path);

// Writes features/, queries/, annotations.jsonl, meta.json under out_dir.
void synthesize(const SyntheticSpec& spec, const std::string& out_dir);

}  // namespace egnlq
