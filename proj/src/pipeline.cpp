#include "egnlq/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "egnlq/annotations.hpp"
#include "egnlq/feature_io.hpp"
#include "egnlq/gradcheck.hpp"

namespace egnlq {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open");
  json j = json::parse(in);
  TrainConfig c;
  auto& m = c.model;
  m.embed_dim = j.value("embed_dim", m.embed_dim);
  m.num_heads = j.value("num_heads", m.num_heads);
  m.transformer_blocks = j.value("transformer_blocks", m.transformer_blocks);
  m.downsample_blocks = j.value("downsample_blocks", m.downsample_blocks);
  m.local_window = j.value("local_window", m.local_window);
  m.text_layers = j.value("text_layers", m.text_layers);
  m.head_conv_layers = j.value("head_conv_layers", m.head_conv_layers);
  m.mlp_expansion = j.value("mlp_expansion", m.mlp_expansion);
  m.input_dim = j.value("input_dim", m.input_dim);
  m.text_dim = j.value("text_dim", m.text_dim);
  m.layer_norm_eps = j.value("layer_norm_eps", m.layer_norm_eps);
  m.fusion_eps = j.value("fusion_eps", m.fusion_eps);
  m.nce_temperature = j.value("nce_temperature", m.nce_temperature);
  c.base_lr = j.value("base_lr", c.base_lr);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.warmup_frac = j.value("warmup_frac", c.warmup_frac);
  c.adamw.weight_decay = j.value("weight_decay", c.adamw.weight_decay);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.lambda_reg = j.value("lambda_reg", c.lambda_reg);
  c.lambda_nce = j.value("lambda_nce", c.lambda_nce);
  c.seed = j.value("seed", c.seed);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.target_r1 = j.value("target_r1", c.target_r1);
  c.target_loss_ratio = j.value("target_loss_ratio", c.target_loss_ratio);
  static const std::set<std::string> known = {
      "embed_dim",      "num_heads",  "transformer_blocks", "downsample_blocks",
      "local_window",   "text_layers", "head_conv_layers",  "mlp_expansion",
      "input_dim",      "text_dim",   "layer_norm_eps",     "fusion_eps",
      "nce_temperature", "base_lr",   "epochs",             "batch_size",
      "warmup_frac",    "weight_decay", "grad_clip",        "lambda_reg",
      "lambda_nce",     "seed",       "eval_every",         "target_r1",
      "target_loss_ratio"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw std::runtime_error(path + ": unknown key '" + key + "'");
  return c;
}

// ---------------------------------------------------------------------------
// Dataset

namespace {

Tensor<float> stream_to_tensor(const FeatureStream& s) {
  return Tensor<float>::from({s.t, s.d}, s.data);
}

FeatureStream load_clip_features(const fs::path& data_dir, const std::string& clip_id) {
  const fs::path single = data_dir / "features" / (clip_id + ".egf");
  if (fs::exists(single)) return read_features(single.string());
  const fs::path multi = data_dir / "features" / clip_id;
  if (fs::is_directory(multi)) {
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(multi))
      if (e.path().extension() == ".egf") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw std::runtime_error(multi.string() + ": no .egf streams");
    std::vector<FeatureStream> streams;
    for (const auto& f : files) {
      auto s = read_features(f);
      s.clip_id = clip_id;  // multi-stream files are named by source, not clip
      streams.push_back(std::move(s));
    }
    return concat_streams(streams);
  }
  throw std::runtime_error("features for clip " + clip_id + " not found under " +
                           (data_dir / "features").string());
}

}  // namespace

std::vector<Sample> load_dataset(const std::string& data_dir) {
  const fs::path dir(data_dir);
  const auto anns = load_annotations((dir / "annotations.jsonl").string());
  std::vector<Sample> out;
  out.reserve(anns.size());
  for (const auto& a : anns) {
    Sample s;
    s.clip_id = a.clip_id;
    s.query_id = a.query_id;
    auto feats = load_clip_features(dir, a.clip_id);
    s.features = stream_to_tensor(feats);
    s.dt = feats.dt;
    s.duration_sec = a.duration_sec;
    auto query = read_features((dir / a.query_path).string());
    s.text = stream_to_tensor(query);
    s.gt_start = a.start_sec;
    s.gt_end = a.end_sec;
    out.push_back(std::move(s));
  }
  std::sort(out.begin(), out.end(), [](const Sample& a, const Sample& b) {
    return std::tie(a.clip_id, a.query_id) < std::tie(b.clip_id, b.query_id);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint conversion

namespace {

const std::vector<std::pair<std::string, double ModelConfig::*>> kConfigDoubles = {
    {"config.layer_norm_eps", &ModelConfig::layer_norm_eps},
    {"config.fusion_eps", &ModelConfig::fusion_eps},
    {"config.nce_temperature", &ModelConfig::nce_temperature},
};
const std::vector<std::pair<std::string, int ModelConfig::*>> kConfigInts = {
    {"config.embed_dim", &ModelConfig::embed_dim},
    {"config.num_heads", &ModelConfig::num_heads},
    {"config.transformer_blocks", &ModelConfig::transformer_blocks},
    {"config.downsample_blocks", &ModelConfig::downsample_blocks},
    {"config.local_window", &ModelConfig::local_window},
    {"config.text_layers", &ModelConfig::text_layers},
    {"config.head_conv_layers", &ModelConfig::head_conv_layers},
    {"config.mlp_expansion", &ModelConfig::mlp_expansion},
    {"config.input_dim", &ModelConfig::input_dim},
    {"config.text_dim", &ModelConfig::text_dim},
};

}  // namespace

Checkpoint model_to_checkpoint(const GroundingModel<float>& model, std::uint64_t seed) {
  Checkpoint ckpt;
  const ModelConfig& cfg = model.config();
  for (const auto& [name, member] : kConfigInts)
    ckpt.tensors.push_back({name, {1}, {static_cast<float>(cfg.*member)}});
  for (const auto& [name, member] : kConfigDoubles)
    ckpt.tensors.push_back({name, {1}, {static_cast<float>(cfg.*member)}});
  ckpt.tensors.push_back({"meta.shuffle_seed", {1}, {static_cast<float>(seed)}});
  for (const auto& [name, t] : model.params().all())
    ckpt.tensors.push_back({"param." + name, t.shape(), t.values()});
  return ckpt;
}

GroundingModel<float> model_from_checkpoint(const Checkpoint& ckpt) {
  ModelConfig cfg;
  auto find = [&](const std::string& name) -> const NamedTensor* {
    for (const auto& t : ckpt.tensors)
      if (t.name == name) return &t;
    return nullptr;
  };
  for (const auto& [name, member] : kConfigInts) {
    const auto* t = find(name);
    if (!t) throw std::runtime_error("checkpoint missing " + name);
    cfg.*member = static_cast<int>(t->data[0]);
  }
  for (const auto& [name, member] : kConfigDoubles) {
    const auto* t = find(name);
    if (!t) throw std::runtime_error("checkpoint missing " + name);
    cfg.*member = static_cast<double>(t->data[0]);
  }
  GroundingModel<float> model(cfg, 0);
  for (const auto& t : ckpt.tensors) {
    if (t.name.rfind("param.", 0) != 0) continue;
    auto& p = model.params().at(t.name.substr(6));
    if (p.shape() != t.shape)
      throw std::runtime_error("checkpoint tensor " + t.name + " has unexpected shape");
    p.values() = t.data;
  }
  return model;
}

// ---------------------------------------------------------------------------
// Decode / predict / evaluate

std::vector<Segment> decode_sample(const GroundingModel<float>& model,
                                   const GroundingModel<float>::ForwardOut& fwd,
                                   const Sample& sample, int topk, const DecodeConfig& dec,
                                   double nms_sigma) {
  std::vector<int> lengths, strides;
  std::vector<Mask> masks;
  for (const auto& lvl : fwd.pyramid) {
    lengths.push_back(lvl.feats.dim(0));
    strides.push_back(lvl.stride);
    masks.push_back(lvl.mask);
  }
  const auto points = generate_points(lengths, masks, strides, sample.dt);
  std::vector<double> logits;
  std::vector<std::array<double, 2>> offsets;
  logits.reserve(points.size());
  offsets.reserve(points.size());
  for (const auto& p : points) {
    logits.push_back(static_cast<double>(fwd.heads.cls_logits[p.level].at(p.index)));
    offsets.push_back({static_cast<double>(fwd.heads.offsets[p.level].at(p.index, 0)),
                       static_cast<double>(fwd.heads.offsets[p.level].at(p.index, 1))});
  }
  auto cands = decode_candidates(points, logits, offsets, sample.dt, sample.duration_sec, dec);
  SoftNmsConfig nms;
  nms.sigma = nms_sigma;
  nms.max_keep = topk;
  auto kept = soft_nms(std::move(cands), nms);
  for (auto& s : kept) {
    s.clip_id = sample.clip_id;
    s.query_id = sample.query_id;
  }
  return kept;
}

std::vector<PredictionRecord> predict_dataset(const GroundingModel<float>& model,
                                              const std::vector<Sample>& dataset, int topk) {
  NoGradGuard ng;
  std::vector<PredictionRecord> out;
  out.reserve(dataset.size());
  for (const auto& s : dataset) {
    auto fwd = model.forward(s.features, {}, s.text, {});
    PredictionRecord rec;
    rec.clip_id = s.clip_id;
    rec.query_id = s.query_id;
    rec.segments = decode_sample(model, fwd, s, topk);
    out.push_back(std::move(rec));
  }
  std::sort(out.begin(), out.end(), [](const PredictionRecord& a, const PredictionRecord& b) {
    return std::tie(a.clip_id, a.query_id) < std::tie(b.clip_id, b.query_id);
  });
  return out;
}

void predict_to_file(const std::string& ckpt_path, const std::string& data_dir,
                     const std::string& out_path, int topk) {
  auto model = model_from_checkpoint(load_checkpoint(ckpt_path));
  auto dataset = load_dataset(data_dir);
  write_predictions(predict_dataset(model, dataset, topk), out_path);
}

EvalResult evaluate_files(const std::string& preds_path, const std::string& ann_path,
                          const std::vector<int>& ks, const std::vector<double>& thresholds) {
  const auto preds = load_predictions(preds_path);
  const auto anns = load_annotations(ann_path);
  std::vector<QueryResult> queries;
  for (const auto& a : anns) {
    QueryResult q;
    q.query_id = a.query_id;
    q.ground_truth.start_sec = a.start_sec;
    q.ground_truth.end_sec = a.end_sec;
    for (const auto& p : preds)
      if (p.query_id == a.query_id) {
        q.predictions = p.segments;
        break;
      }
    queries.push_back(std::move(q));
  }
  return evaluate(queries, ks, thresholds);
}

// ---------------------------------------------------------------------------
// Training

namespace {

double train_set_recall(const GroundingModel<float>& model, const std::vector<Sample>& dataset,
                        double theta) {
  auto preds = predict_dataset(model, dataset, 5);
  std::vector<QueryResult> queries;
  for (const auto& s : dataset) {
    QueryResult q;
    q.query_id = s.query_id;
    q.ground_truth.start_sec = s.gt_start;
    q.ground_truth.end_sec = s.gt_end;
    for (const auto& p : preds)
      if (p.query_id == s.query_id) {
        q.predictions = p.segments;
        break;
      }
    queries.push_back(std::move(q));
  }
  return recall_at_k(queries, 1, theta);
}

}  // namespace

FitResult fit(const TrainConfig& cfg, const std::vector<Sample>& dataset,
              const std::string& out_ckpt, std::ostream* log) {
  if (dataset.empty()) throw std::invalid_argument("fit: dataset is empty");
  TrainConfig c = cfg;
  if (c.model.input_dim == 0) c.model.input_dim = dataset[0].features.dim(1);
  if (c.model.text_dim == 0) c.model.text_dim = dataset[0].text.dim(1);
  GroundingModel<float> model(c.model, c.seed);

  const int n = static_cast<int>(dataset.size());
  const int batches_per_epoch = (n + c.batch_size - 1) / c.batch_size;
  Schedule sched;
  sched.base_lr = c.base_lr;
  sched.total_steps = c.epochs * batches_per_epoch;
  sched.warmup_steps = std::max(1, static_cast<int>(std::lround(c.warmup_frac * sched.total_steps)));

  OptimState<float> opt;
  std::mt19937_64 shuffle_rng(c.seed);
  std::vector<int> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  FitResult result;
  double best_loss = std::numeric_limits<double>::infinity();
  Checkpoint best_ckpt;
  int step = 0;
  for (int epoch = 0; epoch < c.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0;
    for (int b = 0; b < batches_per_epoch; ++b) {
      const int lo = b * c.batch_size;
      const int hi = std::min(n, lo + c.batch_size);
      model.params().zero_grad();
      const float inv = 1.0f / static_cast<float>(hi - lo);
      for (int i = lo; i < hi; ++i) {
        const Sample& s = dataset[order[i]];
        auto loss = sample_loss(model, s.features, s.text, s.dt, s.gt_start, s.gt_end,
                                c.lambda_reg, c.lambda_nce);
        epoch_loss += static_cast<double>(loss.total.at(0));
        auto scaled = ops::scale(loss.total, inv);
        scaled.backward();
      }
      clip_grad_norm(model.params(), c.grad_clip);
      adamw_step(model.params(), opt, lr_at(step, sched), c.adamw);
      ++step;
    }
    epoch_loss /= n;
    result.epoch_losses.push_back(epoch_loss);
    result.epochs_run = epoch + 1;
    if (log)
      *log << "epoch " << epoch << " loss " << std::hexfloat << epoch_loss << std::defaultfloat
           << " (" << epoch_loss << ")\n";
    if (epoch_loss < best_loss) {
      best_loss = epoch_loss;
      best_ckpt = model_to_checkpoint(model, c.seed);
    }
    if (c.eval_every > 0 && (epoch + 1) % c.eval_every == 0) {
      const double first = result.epoch_losses.front();
      if (epoch_loss <= c.target_loss_ratio * first &&
          train_set_recall(model, dataset, 0.5) >= c.target_r1) {
        result.early_stopped = true;
        break;
      }
    }
  }

  Checkpoint final_ckpt = model_to_checkpoint(model, c.seed);
  // optimizer state rides along in the final checkpoint
  final_ckpt.optimizer.push_back(
      {"opt.step", {1}, {static_cast<float>(opt.step)}});
  for (const auto& [name, slot] : opt.slots) {
    final_ckpt.optimizer.push_back({"opt.m." + name, model.params().at(name).shape(), slot.m});
    final_ckpt.optimizer.push_back({"opt.v." + name, model.params().at(name).shape(), slot.v});
  }
  save_checkpoint(final_ckpt, out_ckpt);
  save_checkpoint(best_ckpt, out_ckpt + ".best");
  return result;
}

// ---------------------------------------------------------------------------
// Gradient suite

namespace {

struct SuiteState {
  bool ok = true;
  void report(std::ostream& os, const std::string& name, double err, double tol) {
    const bool pass = err <= tol;
    ok = ok && pass;
    os << (pass ? "PASS" : "FAIL") << " " << name << "  max_rel_err=" << std::scientific
       << std::setprecision(3) << err << " tol=" << tol << std::defaultfloat << "\n";
  }
};

double model_end_to_end_error() {
  ModelConfig cfg;
  cfg.embed_dim = 8;
  cfg.num_heads = 2;
  cfg.local_window = 5;
  cfg.mlp_expansion = 2;
  cfg.input_dim = 6;
  cfg.text_dim = 5;
  GroundingModel<double> model(cfg, 42);
  std::mt19937_64 rng(7);
  auto features = Tensor<double>::randn({64, 6}, rng, 1.0, true);
  auto text = Tensor<double>::randn({8, 5}, rng, 1.0, true);
  const double gt_start = 10.4, gt_end = 30.2, dt = 1.0;

  auto eval_total = [&]() {
    NoGradGuard ng;
    return static_cast<double>(
        sample_loss(model, features, text, dt, gt_start, gt_end, 1.0, 1.0).total.at(0));
  };

  model.params().zero_grad();
  features.zero_grad();
  text.zero_grad();
  auto loss = sample_loss(model, features, text, dt, gt_start, gt_end, 1.0, 1.0);
  loss.total.backward();

  const double h = 1e-5;
  double max_err = 0;
  auto probe = [&](Tensor<double>& t, const std::vector<std::size_t>& coords) {
    for (std::size_t c : coords) {
      const double orig = t.values()[c];
      t.values()[c] = orig + h;
      const double fp = eval_total();
      t.values()[c] = orig - h;
      const double fm = eval_total();
      t.values()[c] = orig;
      const double numeric = (fp - fm) / (2 * h);
      const double analytic = t.grad()[c];
      const double rel = std::abs(analytic - numeric) /
                         std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      max_err = std::max(max_err, rel);
    }
  };

  probe(features, {0, 17, 100, 250, 383});
  probe(text, {0, 13, 27, 39});
  const std::vector<std::string> probed_params = {
      "embed.conv1.w", "vid.block0.qkv.w", "vid.block3.down.w", "vid.block6.mlp2.w",
      "txt.proj.w",    "fuse.q.w",         "fuse.out.w",        "head.cls.final.w",
      "head.reg.conv0.w"};
  for (const auto& name : probed_params) {
    auto& p = model.params().at(name);
    std::vector<std::size_t> coords = {0, p.numel() / 2, p.numel() - 1};
    probe(p, coords);
  }
  return max_err;
}

}  // namespace

bool run_gradient_suite(std::ostream& os) {
  SuiteState st;
  std::mt19937_64 rng(101);
  auto rnd = [&rng](std::vector<int> shape) {
    return Tensor<double>::randn(std::move(shape), rng, 1.0, true);
  };

  for (int rep = 0; rep < 5; ++rep) {
    const std::uint64_t seed = 500 + rep;
    const std::string sfx = "#" + std::to_string(rep);

    st.report(os, "matmul" + sfx,
              grad_check("matmul", [](const auto& in) { return ops::matmul(in[0], in[1]); },
                         {rnd({3, 4}), rnd({4, 2})}, 16, seed)
                  .max_rel_error,
              1e-6);
    st.report(os, "matmul_nt" + sfx,
              grad_check("matmul_nt", [](const auto& in) { return ops::matmul_nt(in[0], in[1]); },
                         {rnd({3, 4}), rnd({5, 4})}, 16, seed)
                  .max_rel_error,
              1e-6);
    st.report(os, "linear" + sfx,
              grad_check("linear",
                         [](const auto& in) { return ops::linear(in[0], in[1], in[2]); },
                         {rnd({3, 4}), rnd({4, 5}), rnd({5})}, 16, seed)
                  .max_rel_error,
              1e-6);
    st.report(os, "layer_norm" + sfx,
              grad_check("layer_norm",
                         [](const auto& in) { return ops::layer_norm(in[0], in[1], in[2], 1e-5); },
                         {rnd({4, 8}), rnd({8}), rnd({8})}, 24, seed)
                  .max_rel_error,
              1e-6);
    Mask smask = {1, 1, 0, 1, 1, 1};
    st.report(os, "softmax_lastdim" + sfx,
              grad_check("softmax",
                         [smask](const auto& in) { return ops::softmax_lastdim(in[0], smask); },
                         {rnd({3, 6})}, 18, seed)
                  .max_rel_error,
              1e-6);
    Mask cmask(9, 1);
    cmask[8] = 0;
    for (int stride : {1, 2}) {
      st.report(os, "conv1d_s" + std::to_string(stride) + sfx,
                grad_check("conv1d",
                           [stride, cmask](const auto& in) {
                             return ops::conv1d(in[0], in[1], in[2], stride, false, cmask);
                           },
                           {rnd({9, 3}), rnd({2, 3, 3}), rnd({2})}, 16, seed)
                    .max_rel_error,
                1e-6);
    }
    st.report(os, "conv1d_depthwise" + sfx,
              grad_check("conv1d_dw",
                         [](const auto& in) { return ops::conv1d(in[0], in[1], in[2], 2, true); },
                         {rnd({8, 3}), rnd({3, 3}), rnd({3})}, 16, seed)
                  .max_rel_error,
              1e-6);
    Mask amask(6, 1);
    amask[4] = 0;
    st.report(os, "windowed_attention" + sfx,
              grad_check("wattn",
                         [amask](const auto& in) {
                           return ops::windowed_attention(in[0], in[1], in[2], 3, amask);
                         },
                         {rnd({6, 2, 4}), rnd({6, 2, 4}), rnd({6, 2, 4})}, 20, seed)
                  .max_rel_error,
              1e-6);
    st.report(os, "gelu" + sfx,
              grad_check("gelu", [](const auto& in) { return ops::gelu(in[0]); }, {rnd({4, 5})},
                         16, seed)
                  .max_rel_error,
              1e-6);

    std::vector<std::uint8_t> labels = {1, 0, 0, 1, 0, 0, 0, 1};
    st.report(os, "focal_loss" + sfx,
              grad_check("focal",
                         [labels](const auto& in) {
                           return losses::focal_loss(in[0], labels, 3);
                         },
                         {rnd({8})}, 8, seed)
                  .max_rel_error,
              1e-6);

    std::vector<std::array<double, 2>> tgt = {{1.3, 2.1}, {0.4, 3.7}, {2.2, 0.6}};
    auto pred = rnd({3, 2});
    for (auto& v : pred.values()) v = std::abs(v) + 0.05;
    st.report(os, "diou_loss" + sfx,
              grad_check("diou",
                         [tgt](const auto& in) { return losses::diou_loss(in[0], tgt); }, {pred},
                         6, seed)
                  .max_rel_error,
              1e-6);

    std::vector<std::uint8_t> pos = {1, 0, 1, 0, 0};
    st.report(os, "nce_loss" + sfx,
              grad_check("nce",
                         // A mild temperature keeps the softmax away from saturation, where the
                         // true gradients underflow below what central differences can resolve.
                         [pos](const auto& in) { return losses::nce_loss(in[0], pos, in[1], 0.7); },
                         {rnd({5, 6}), rnd({6})}, 20, seed)
                  .max_rel_error,
              1e-6);
  }

  const double e2e = model_end_to_end_error();
  st.report(os, "model_end_to_end", e2e, 1e-4);
  return st.ok;
}

}  // namespace egnlq
