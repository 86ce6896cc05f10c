#include "egnlq/feature_io.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace egnlq {

namespace {

constexpr char kMagic[4] = {'E', 'G', 'F', '1'};

[[noreturn]] void fail(const std::string& path, const std::string& what, std::size_t offset) {
  throw std::runtime_error(path + ": " + what + " at byte offset " + std::to_string(offset));
}

}  // namespace

FeatureStream read_features(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) fail(path, "bad magic (want EGF1)", 0);
  std::uint32_t t = 0, d = 0;
  in.read(reinterpret_cast<char*>(&t), 4);
  in.read(reinterpret_cast<char*>(&d), 4);
  if (!in) fail(path, "truncated header", 4);
  if (t == 0 || d == 0) fail(path, "zero extent", 4);
  FeatureStream s;
  s.t = static_cast<int>(t);
  s.d = static_cast<int>(d);
  s.data.resize(static_cast<std::size_t>(t) * d);
  in.read(reinterpret_cast<char*>(s.data.data()),
          static_cast<std::streamsize>(s.data.size() * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != s.data.size() * sizeof(float))
    fail(path, "truncated payload", 12 + static_cast<std::size_t>(std::max<std::streamsize>(in.gcount(), 0)));
  in.read(reinterpret_cast<char*>(&s.dt), sizeof(double));
  if (static_cast<std::size_t>(in.gcount()) != sizeof(double))
    fail(path, "truncated footer", 12 + s.data.size() * sizeof(float));
  if (!(s.dt > 0)) fail(path, "non-positive dt", 12 + s.data.size() * sizeof(float));
  for (std::size_t i = 0; i < s.data.size(); ++i)
    if (!std::isfinite(s.data[i])) fail(path, "non-finite value", 12 + i * sizeof(float));
  s.clip_id = std::filesystem::path(path).stem().string();
  return s;
}

void write_features(const FeatureStream& stream, const std::string& path) {
  if (stream.t <= 0 || stream.d <= 0 ||
      stream.data.size() != static_cast<std::size_t>(stream.t) * stream.d)
    throw std::invalid_argument("write_features: inconsistent stream shape");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out.write(kMagic, 4);
  const std::uint32_t t = static_cast<std::uint32_t>(stream.t);
  const std::uint32_t d = static_cast<std::uint32_t>(stream.d);
  out.write(reinterpret_cast<const char*>(&t), 4);
  out.write(reinterpret_cast<const char*>(&d), 4);
  out.write(reinterpret_cast<const char*>(stream.data.data()),
            static_cast<std::streamsize>(stream.data.size() * sizeof(float)));
  out.write(reinterpret_cast<const char*>(&stream.dt), sizeof(double));
  if (!out) throw std::runtime_error(path + ": write failed");
}

std::vector<float> resample_linear(const std::vector<float>& data, int t_in, int d, int t_out) {
  if (t_in == t_out) return data;
  std::vector<float> out(static_cast<std::size_t>(t_out) * d);
  for (int t = 0; t < t_out; ++t) {
    // align first and last samples
    const double pos = t_out == 1 ? 0.0
                                  : static_cast<double>(t) * (t_in - 1) / (t_out - 1);
    const int lo = static_cast<int>(std::floor(pos));
    const int hi = std::min(lo + 1, t_in - 1);
    const double w = pos - lo;
    for (int j = 0; j < d; ++j)
      out[t * d + j] =
          static_cast<float>((1.0 - w) * data[lo * d + j] + w * data[hi * d + j]);
  }
  return out;
}

FeatureStream concat_streams(const std::vector<FeatureStream>& streams) {
  if (streams.empty()) throw std::invalid_argument("concat_streams: no streams");
  if (streams.size() == 1) return streams[0];
  int t_max = 0;
  double duration = 0;
  for (const auto& s : streams) {
    if (s.clip_id != streams[0].clip_id)
      throw std::invalid_argument("concat_streams: clip id mismatch (" + s.clip_id + " vs " +
                                  streams[0].clip_id + ")");
    if (s.t > t_max) {
      t_max = s.t;
      duration = s.t * s.dt;
    }
  }
  FeatureStream out;
  out.clip_id = streams[0].clip_id;
  out.t = t_max;
  out.dt = duration / t_max;
  out.source_tag = "concat";
  std::vector<std::vector<float>> resampled;
  for (const auto& s : streams) {
    resampled.push_back(resample_linear(s.data, s.t, s.d, t_max));
    out.d += s.d;
  }
  out.data.resize(static_cast<std::size_t>(t_max) * out.d);
  for (int t = 0; t < t_max; ++t) {
    int off = 0;
    for (std::size_t si = 0; si < streams.size(); ++si) {
      const int d = streams[si].d;
      for (int j = 0; j < d; ++j) out.data[t * out.d + off + j] = resampled[si][t * d + j];
      off += d;
    }
  }
  return out;
}

}  // namespace egnlq
