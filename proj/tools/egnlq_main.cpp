#include <exception>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "egnlq/pipeline.hpp"
#include "egnlq/synth.hpp"

namespace {

std::vector<double> parse_doubles(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
  if (out.empty()) throw std::runtime_error("empty list: " + csv);
  return out;
}

std::vector<int> parse_ints(const std::string& csv) {
  std::vector<int> out;
  for (double v : parse_doubles(csv)) out.push_back(static_cast<int>(v));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"temporal grounding engine"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  std::string synth_spec, synth_out;
  std::int64_t synth_seed = -1;
  synth->add_option("--spec", synth_spec, "spec JSON")->required();
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--seed", synth_seed, "override the spec seed");

  auto* train = app.add_subcommand("train", "train a model");
  std::string train_config, train_data, train_out;
  train->add_option("--config", train_config, "training config JSON")->required();
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--out", train_out, "output checkpoint")->required();

  auto* predict = app.add_subcommand("predict", "run inference");
  std::string pred_ckpt, pred_data, pred_out;
  int pred_topk = 5;
  predict->add_option("--ckpt", pred_ckpt, "checkpoint")->required();
  predict->add_option("--data", pred_data, "dataset directory")->required();
  predict->add_option("--out", pred_out, "predictions JSONL")->required();
  predict->add_option("--topk", pred_topk, "segments kept per query");

  auto* eval = app.add_subcommand("eval", "score predictions");
  std::string eval_preds, eval_ann, eval_thresholds = "0.3,0.5", eval_topk = "1,5";
  bool eval_json = false;
  eval->add_option("--preds", eval_preds, "predictions JSONL")->required();
  eval->add_option("--ann", eval_ann, "annotations JSONL")->required();
  eval->add_option("--thresholds", eval_thresholds, "tIoU thresholds, comma separated");
  eval->add_option("--topk", eval_topk, "k values, comma separated");
  eval->add_flag("--json", eval_json, "emit JSON instead of text");

  auto* gradcheck = app.add_subcommand("gradcheck", "run the full gradient suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*synth) {
      auto spec = egnlq::load_synthetic_spec(synth_spec);
      if (synth_seed >= 0) spec.seed = static_cast<std::uint64_t>(synth_seed);
      egnlq::synthesize(spec, synth_out);
      std::cout << "wrote " << spec.n_clips << " clips to " << synth_out << "\n";
    } else if (*train) {
      auto cfg = egnlq::load_train_config(train_config);
      auto dataset = egnlq::load_dataset(train_data);
      auto result = egnlq::fit(cfg, dataset, train_out, &std::cout);
      std::cout << "trained " << result.epochs_run << " epochs"
                << (result.early_stopped ? " (early stop)" : "") << ", checkpoint " << train_out
                << "\n";
    } else if (*predict) {
      egnlq::predict_to_file(pred_ckpt, pred_data, pred_out, pred_topk);
      std::cout << "wrote " << pred_out << "\n";
    } else if (*eval) {
      auto result = egnlq::evaluate_files(eval_preds, eval_ann, parse_ints(eval_topk),
                                          parse_doubles(eval_thresholds));
      std::cout << (eval_json ? egnlq::render_json(result) : egnlq::render_text(result));
    } else if (*gradcheck) {
      if (!egnlq::run_gradient_suite(std::cout)) {
        std::cerr << "gradient suite failed\n";
        return 1;
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
