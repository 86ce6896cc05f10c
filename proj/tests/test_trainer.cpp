#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>
#include <sstream>

#include "egnlq/checkpoint.hpp"
#include "egnlq/optim.hpp"
#include "egnlq/pipeline.hpp"
#include "egnlq/synth.hpp"

using egnlq::AdamWConfig;
using egnlq::Checkpoint;
using egnlq::GroundingModel;
using egnlq::ModelConfig;
using egnlq::OptimState;
using egnlq::ParamStore;
using egnlq::Schedule;
using egnlq::Tensor;

namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir(const char* tag) {
    path = fs::temp_directory_path() / (std::string("egnlq_test_") + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.embed_dim = 8;
  cfg.num_heads = 2;
  cfg.local_window = 5;
  cfg.mlp_expansion = 2;
  cfg.input_dim = 4;
  cfg.text_dim = 4;
  return cfg;
}

}  // namespace

TEST_CASE("lr schedule: warmup, peak, midpoint, endpoint, continuity") {
  Schedule s;
  s.base_lr = 1e-3;
  s.warmup_steps = 10;
  s.total_steps = 110;

  CHECK(egnlq::lr_at(10, s) == doctest::Approx(1e-3));           // first post-warmup step
  CHECK(egnlq::lr_at(60, s) == doctest::Approx(0.5e-3));         // cosine midpoint
  CHECK(egnlq::lr_at(110, s) == doctest::Approx(0.0));           // endpoint
  CHECK(egnlq::lr_at(0, s) == doctest::Approx(1e-3 / 10.0));     // first warmup step

  // continuity at the junction: last warmup step reaches base, first decay
  // step starts there
  CHECK(egnlq::lr_at(9, s) == doctest::Approx(1e-3));
  for (int t = 0; t <= 110; ++t) CHECK(egnlq::lr_at(t, s) >= 0.0);
  CHECK_THROWS(egnlq::lr_at(-1, s));
  CHECK_THROWS(egnlq::lr_at(111, s));

  Schedule bad;
  bad.warmup_steps = 5;
  bad.total_steps = 5;
  CHECK_THROWS(egnlq::lr_at(0, bad));
}

TEST_CASE("adamw: closed-form first step, identity, decoupled decay") {
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;

  ParamStore<double> ps;
  std::mt19937_64 rng(1);
  auto& w = ps.def_const("w", {1, 1}, 1.0);
  w.grad()[0] = 1.0;
  OptimState<double> st;
  egnlq::adamw_step(ps, st, 0.1, cfg);
  // m_hat = 1, v_hat = 1 -> w' = 1 - 0.1 * 1/(1 + 1e-8)
  CHECK(w.values()[0] == doctest::Approx(0.9).epsilon(1e-6));

  // zero grad + zero decay: identity
  ParamStore<double> ps2;
  auto& w2 = ps2.def_const("w", {1, 1}, 0.7);
  w2.grad()[0] = 0.0;
  OptimState<double> st2;
  egnlq::adamw_step(ps2, st2, 0.1, cfg);
  CHECK(w2.values()[0] == 0.7);

  // decoupled decay on a rank-2 weight, none on a rank-1 bias
  AdamWConfig wd;
  wd.weight_decay = 0.1;
  ParamStore<double> ps3;
  auto& w3 = ps3.def_const("w", {1, 1}, 2.0);
  auto& b3 = ps3.def_const("b", {1}, 2.0);
  w3.grad()[0] = 0.0;
  b3.grad()[0] = 0.0;
  OptimState<double> st3;
  egnlq::adamw_step(ps3, st3, 0.1, wd);
  CHECK(w3.values()[0] == doctest::Approx(2.0 * (1.0 - 0.01)));
  CHECK(b3.values()[0] == doctest::Approx(2.0));

  // non-finite gradient: step rejected before any mutation
  ParamStore<double> ps4;
  auto& w4 = ps4.def_const("w", {1, 1}, 1.0);
  w4.grad()[0] = std::nan("");
  OptimState<double> st4;
  CHECK_THROWS(egnlq::adamw_step(ps4, st4, 0.1, cfg));
  CHECK(w4.values()[0] == 1.0);
  CHECK(st4.step == 0);
}

TEST_CASE("gradient clipping scales to the target global norm") {
  ParamStore<double> ps;
  auto& a = ps.def_const("a", {1, 1}, 0.0);
  auto& b = ps.def_const("b", {1}, 0.0);
  a.grad()[0] = 3.0;
  b.grad()[0] = 4.0;
  CHECK(egnlq::global_grad_norm(ps) == doctest::Approx(5.0));
  egnlq::clip_grad_norm(ps, 1.0);
  CHECK(egnlq::global_grad_norm(ps) == doctest::Approx(1.0));
  CHECK(a.grad()[0] == doctest::Approx(0.6));

  // already under the cap: untouched
  egnlq::clip_grad_norm(ps, 10.0);
  CHECK(a.grad()[0] == doctest::Approx(0.6));
}

TEST_CASE("checkpoint: bitwise round trip including optimizer section") {
  TempDir dir("ckpt");
  Checkpoint ck;
  std::mt19937_64 rng(2);
  std::normal_distribution<float> g(0.0f, 1.0f);
  for (int i = 0; i < 3; ++i) {
    egnlq::NamedTensor t;
    t.name = "tensor" + std::to_string(i);
    t.shape = {2, 3};
    for (int j = 0; j < 6; ++j) t.data.push_back(g(rng));
    ck.tensors.push_back(t);
    t.name = "opt" + std::to_string(i);
    ck.optimizer.push_back(t);
  }
  const auto path = (dir.path / "a.ckpt").string();
  egnlq::save_checkpoint(ck, path);
  auto back = egnlq::load_checkpoint(path);
  REQUIRE(back.tensors.size() == ck.tensors.size());
  REQUIRE(back.optimizer.size() == ck.optimizer.size());
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    CHECK(back.tensors[i].name == ck.tensors[i].name);
    CHECK(back.tensors[i].shape == ck.tensors[i].shape);
    CHECK(back.tensors[i].data == ck.tensors[i].data);  // bit-exact floats
  }
  for (std::size_t i = 0; i < ck.optimizer.size(); ++i)
    CHECK(back.optimizer[i].data == ck.optimizer[i].data);
}

TEST_CASE("model checkpoint round trip gives a bitwise-identical forward pass") {
  TempDir dir("model_ckpt");
  GroundingModel<float> model(tiny_config(), 11);
  const auto path = (dir.path / "m.ckpt").string();
  egnlq::save_checkpoint(egnlq::model_to_checkpoint(model, 11), path);
  auto restored = egnlq::model_from_checkpoint(egnlq::load_checkpoint(path));

  egnlq::NoGradGuard ng;
  std::mt19937_64 rng(3);
  auto feats = Tensor<float>::randn({40, 4}, rng);
  auto text = Tensor<float>::randn({3, 4}, rng);
  auto fa = model.forward(feats, {}, text, {});
  auto fb = restored.forward(feats, {}, text, {});
  for (int l = 0; l < 6; ++l) {
    CHECK(fa.heads.cls_logits[l].values() == fb.heads.cls_logits[l].values());
    CHECK(fa.heads.offsets[l].values() == fb.heads.offsets[l].values());
  }
}

TEST_CASE("fit: deterministic, loss decreases on a tiny synthetic set") {
  TempDir dir("fit");
  egnlq::SyntheticSpec spec;
  spec.n_clips = 8;
  spec.t_min = 48;
  spec.t_max = 64;
  spec.feat_dim = 4;
  spec.n_prototypes = 2;
  spec.tokens = 3;
  spec.noise = 0.05;
  spec.seed = 7;
  egnlq::synthesize(spec, (dir.path / "data").string());
  auto dataset = egnlq::load_dataset((dir.path / "data").string());
  REQUIRE(dataset.size() == 8);

  egnlq::TrainConfig cfg;
  cfg.model = tiny_config();
  cfg.model.input_dim = 0;  // inferred from the data
  cfg.model.text_dim = 0;
  cfg.epochs = 4;
  cfg.batch_size = 4;
  cfg.seed = 5;

  std::ostringstream log1, log2;
  auto r1 = egnlq::fit(cfg, dataset, (dir.path / "run1.ckpt").string(), &log1);
  auto r2 = egnlq::fit(cfg, dataset, (dir.path / "run2.ckpt").string(), &log2);
  REQUIRE(r1.epoch_losses.size() == 4);
  CHECK(log1.str() == log2.str());  // bitwise-identical loss logs
  CHECK(r1.epoch_losses == r2.epoch_losses);
  CHECK(r1.epoch_losses.back() < r1.epoch_losses.front());
  CHECK(fs::exists(dir.path / "run1.ckpt"));
  CHECK(fs::exists(dir.path / "run1.ckpt.best"));

  // the two runs produce identical checkpoints
  auto c1 = egnlq::load_checkpoint((dir.path / "run1.ckpt").string());
  auto c2 = egnlq::load_checkpoint((dir.path / "run2.ckpt").string());
  REQUIRE(c1.tensors.size() == c2.tensors.size());
  for (std::size_t i = 0; i < c1.tensors.size(); ++i)
    CHECK(c1.tensors[i].data == c2.tensors[i].data);

  CHECK_THROWS(egnlq::fit(cfg, {}, (dir.path / "none.ckpt").string(), nullptr));
}
