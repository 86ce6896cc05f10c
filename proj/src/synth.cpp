#include "egnlq/synth.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "egnlq/feature_io.hpp"

namespace egnlq {

namespace fs = std::filesystem;
using nlohmann::json;

void SyntheticSpec::validate() const {
  if (n_clips <= 0 || t_min <= 0 || t_max < t_min || feat_dim <= 0 || n_prototypes <= 0 ||
      tokens <= 0 || noise < 0)
    throw std::invalid_argument("SyntheticSpec: all fields must be positive and t_min <= t_max");
}

SyntheticSpec load_synthetic_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open");
  json j = json::parse(in);
  SyntheticSpec s;
  s.n_clips = j.value("n_clips", s.n_clips);
  s.t_min = j.value("t_min", s.t_min);
  s.t_max = j.value("t_max", s.t_max);
  s.feat_dim = j.value("feat_dim", s.feat_dim);
  s.n_prototypes = j.value("n_prototypes", s.n_prototypes);
  s.tokens = j.value("tokens", s.tokens);
  s.noise = j.value("noise", s.noise);
  s.seed = j.value("seed", s.seed);
  static const std::set<std::string> known = {"n_clips", "t_min",  "t_max", "feat_dim",
                                             "n_prototypes", "tokens", "noise", "seed"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw std::runtime_error(path + ": unknown key '" + key + "'");
  s.validate();
  return s;
}

void synthesize(const SyntheticSpec& spec, const std::string& out_dir) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "features", ec);
  fs::create_directories(fs::path(out_dir) / "queries", ec);
  if (!fs::is_directory(out_dir)) throw std::runtime_error(out_dir + ": cannot create directory");

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int d = spec.feat_dim;

  // Q random unit prototypes
  std::vector<std::vector<double>> protos(spec.n_prototypes, std::vector<double>(d));
  for (auto& p : protos) {
    double norm = 0;
    for (auto& v : p) {
      v = gauss(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : p) v /= norm;
  }
  // fixed linear map from feature space to token-embedding space
  std::vector<double> text_map(static_cast<std::size_t>(d) * d);
  for (auto& v : text_map) v = gauss(rng) / std::sqrt(static_cast<double>(d));

  std::ofstream ann(fs::path(out_dir) / "annotations.jsonl", std::ios::trunc);
  if (!ann) throw std::runtime_error(out_dir + ": cannot write annotations.jsonl");

  std::uniform_int_distribution<int> t_dist(spec.t_min, spec.t_max);
  std::uniform_real_distribution<double> frac_dist(0.05, 0.40);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  for (int ci = 0; ci < spec.n_clips; ++ci) {
    const std::string clip_id = "clip" + std::to_string(ci);
    const std::string query_id = "query" + std::to_string(ci);
    const int proto_idx = ci % spec.n_prototypes;
    const auto& proto = protos[proto_idx];

    const int t = t_dist(rng);
    const double dt = 1.0;
    const double duration = t * dt;
    const double len = frac_dist(rng) * duration;
    const double start = unif(rng) * (duration - len);
    const double end = start + len;

    FeatureStream feats;
    feats.clip_id = clip_id;
    feats.t = t;
    feats.d = d;
    feats.dt = dt;
    feats.data.resize(static_cast<std::size_t>(t) * d);
    for (int ti = 0; ti < t; ++ti) {
      const double center = (ti + 0.5) * dt;
      const bool inside = center >= start && center <= end;
      for (int j = 0; j < d; ++j)
        feats.data[ti * d + j] = static_cast<float>((inside ? proto[j] : 0.0) +
                                                    spec.noise * gauss(rng));
    }
    write_features(feats, (fs::path(out_dir) / "features" / (clip_id + ".egf")).string());

    FeatureStream query;
    query.clip_id = query_id;
    query.t = spec.tokens;
    query.d = d;
    query.dt = 1.0;
    query.data.resize(static_cast<std::size_t>(spec.tokens) * d);
    for (int li = 0; li < spec.tokens; ++li)
      for (int j = 0; j < d; ++j) {
        double v = 0;
        for (int kk = 0; kk < d; ++kk) v += text_map[j * d + kk] * proto[kk];
        query.data[li * d + j] = static_cast<float>(v + spec.noise * gauss(rng));
      }
    write_features(query, (fs::path(out_dir) / "queries" / (query_id + ".egf")).string());

    json rec;
    rec["clip_id"] = clip_id;
    rec["query_id"] = query_id;
    rec["query_path"] = "queries/" + query_id + ".egf";
    rec["start_sec"] = start;
    rec["end_sec"] = end;
    rec["duration_sec"] = duration;
    ann << rec.dump() << "\n";
  }
  ann.close();

  json meta;
  meta["n_clips"] = spec.n_clips;
  meta["t_min"] = spec.t_min;
  meta["t_max"] = spec.t_max;
  meta["feat_dim"] = spec.feat_dim;
  meta["n_prototypes"] = spec.n_prototypes;
  meta["tokens"] = spec.tokens;
  meta["noise"] = spec.noise;
  meta["seed"] = spec.seed;
  std::ofstream mf(fs::path(out_dir) / "meta.json", std::ios::trunc);
  mf << meta.dump(2) << "\n";
  if (!mf) throw std::runtime_error(out_dir + ": cannot write meta.json");
}

}  // namespace egnlq
