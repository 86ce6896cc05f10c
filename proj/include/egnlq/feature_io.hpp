#pragma once

#include <string>
#include <vector>

namespace egnlq {

// Clip-level visual features: T x D float32 rows plus seconds-per-step.
struct FeatureStream {
  std::string clip_id;
  int t = 0;
  int d = 0;
  std::vector<float> data;  // row-major, T x D
  double dt = 1.0;          // seconds per feature step
  std::string source_tag;
};

// "EGF1" | u32 T | u32 D | T*D float32 LE | f64 dt. Rejects bad magic,
// truncation, and non-finite payloads, reporting the byte offset.
FeatureStream read_features(const std::string& path);
void write_features(const FeatureStream& stream, const std::string& path);

// Concatenates along channels. Shorter streams are linearly interpolated in
// time to the longest length first; dt comes from the duration of the longest.
FeatureStream concat_streams(const std::vector<FeatureStream>& streams);

// Per-coordinate linear resampling of a T x D matrix to a new length.
std::vector<float> resample_linear(const std::vector<float>& data, int t_in, int d, int t_out);

}  // namespace egnlq
