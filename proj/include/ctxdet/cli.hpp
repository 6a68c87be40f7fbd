#pragma once

// Command-line front end. Subcommands:
//   generate  --out DIR                     synthetic train/ and eval/ scene dirs
//   train     --scenes DIR --checkpoint P   fit a model, write checkpoint + loss log
//   detect    --scenes DIR --checkpoint P --out FILE
//   eval      --scenes DIR --predictions FILE [--iou T] [--out JSON]
//   count     --scenes DIR --predictions FILE [--conf C] [--out JSON]
//   gradcheck [--out JSON]
//   ablate    [--scenes DIR] [--out JSON]  (DIR holds train/ and eval/)
// Every subcommand accepts --config, --seed and --stages.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ctxdet/checkpoint.hpp"
#include "ctxdet/config.hpp"
#include "ctxdet/evaluation.hpp"
#include "ctxdet/experiment.hpp"
#include "ctxdet/grad_suite.hpp"
#include "ctxdet/report.hpp"
#include "ctxdet/train.hpp"

namespace ctxdet {

class CliError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CliOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::vector<double>> stages;
  std::string scenes;
  std::string checkpoint;
  std::string predictions;
  std::string out;
  std::optional<double> iou;
  std::optional<double> conf;
};

namespace cli_detail {

inline PipelineConfig resolve_config(const CliOptions& o) {
  PipelineConfig cfg = o.config.empty() ? PipelineConfig{} : load_config(o.config);
  // One seed drives both scene synthesis and training.
  if (o.seed) {
    cfg.synth.seed = *o.seed;
    cfg.train.seed = *o.seed;
  }
  if (o.stages) cfg.model.cascade.thresholds = *o.stages;
  if (o.conf) cfg.count_confidence = *o.conf;
  cfg.validate();
  return cfg;
}

inline std::vector<Scene> scenes_from(const std::string& dir, const PipelineConfig& cfg) {
  if (dir.empty()) throw CliError("--scenes DIR is required");
  if (!std::filesystem::is_directory(dir)) throw CliError("scene directory '" + dir + "' does not exist");
  auto scenes = load_scene_dir(dir);
  if (scenes.empty()) throw CliError("no .scene files in '" + dir + "'");
  for (const auto& s : scenes)
    if (s.num_classes != cfg.model.num_classes)
      throw CliError("scene '" + s.id + "' declares " + std::to_string(s.num_classes) +
                     " classes but the config has num_classes = " + std::to_string(cfg.model.num_classes));
  return scenes;
}

inline void require(const std::string& value, const std::string& flag) {
  if (value.empty()) throw CliError(flag + " is required");
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CliError("cannot open '" + path + "' for writing");
  f << text;
  if (!f) throw CliError("failed writing '" + path + "'");
}

inline void write_json(const std::string& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

inline ModelParams model_from(const CliOptions& o, const ModelConfig& mc) {
  require(o.checkpoint, "--checkpoint");
  return load_model(o.checkpoint, mc);
}

inline std::string stage_label(std::size_t t) { return t == 0 ? "proposals" : "stage " + std::to_string(t); }

}  // namespace cli_detail

inline int cmd_generate(const CliOptions& o, std::ostream& out) {
  using namespace cli_detail;
  require(o.out, "--out");
  const PipelineConfig cfg = resolve_config(o);
  const auto splits = synth_splits(cfg);
  const std::filesystem::path root(o.out);
  save_scene_dir(root / "train", splits.train);
  save_scene_dir(root / "eval", splits.eval);
  out << "wrote " << splits.train.size() << " train and " << splits.eval.size() << " eval scenes to "
      << root.string() << "\n";
  return 0;
}

inline int cmd_train(const CliOptions& o, std::ostream& out, std::ostream& err) {
  using namespace cli_detail;
  require(o.checkpoint, "--checkpoint");
  const PipelineConfig cfg = resolve_config(o);
  const auto scenes = scenes_from(o.scenes, cfg);
  TrainResult tr = train_toy(scenes, cfg.model, cfg.train, [&](const EpochRecord& e) {
    err << "epoch " << e.epoch + 1 << "/" << cfg.train.epochs << "  lr " << e.learning_rate << "  loss "
        << fixed(e.mean_loss) << "\n";
    return true;
  });
  save_checkpoint(o.checkpoint, tr.params.to_named());
  const std::string log = o.out.empty() ? o.checkpoint + ".loss.json" : o.out;
  write_json(log, to_json(tr.history));
  out << "trained on " << scenes.size() << " scenes; checkpoint " << o.checkpoint << ", loss log " << log << "\n";
  return 0;
}

inline int cmd_detect(const CliOptions& o, std::ostream& out) {
  using namespace cli_detail;
  require(o.out, "--out");
  const PipelineConfig cfg = resolve_config(o);
  const auto scenes = scenes_from(o.scenes, cfg);
  ModelParams params = model_from(o, cfg.model);
  const auto dets = detect_all(scenes, params, cfg.model);
  save_predictions(o.out, to_prediction_map(scenes, dets));

  const StageIouReport st = stage_matched_iou(scenes, dets);
  std::size_t total = 0;
  for (const auto& d : dets) total += d.detections.size();
  out << total << " detections over " << scenes.size() << " scenes written to " << o.out << "\n";
  TextTable t({"cascade", "mean matched IoU"});
  for (std::size_t i = 0; i < st.mean_iou.size(); ++i) t.add({stage_label(i), fixed(st.mean_iou[i])});
  out << "matched detections: " << st.matched << "\n" << t.str();
  return 0;
}

inline int cmd_eval(const CliOptions& o, std::ostream& out) {
  using namespace cli_detail;
  require(o.predictions, "--predictions");
  const PipelineConfig cfg = resolve_config(o);
  const auto scenes = scenes_from(o.scenes, cfg);
  const auto preds = load_predictions(o.predictions, cfg.model.num_classes);
  const std::vector<double> thresholds = o.iou ? std::vector<double>{*o.iou} : std::vector<double>{0.25, 0.5};
  const EvalReport rep = evaluate_predictions(preds, scenes, cfg.model.num_classes, thresholds);
  out << eval_table(rep);
  if (!o.out.empty()) write_json(o.out, to_json(rep));
  return 0;
}

inline int cmd_count(const CliOptions& o, std::ostream& out) {
  using namespace cli_detail;
  require(o.predictions, "--predictions");
  const PipelineConfig cfg = resolve_config(o);
  const auto scenes = scenes_from(o.scenes, cfg);
  const auto preds = load_predictions(o.predictions, cfg.model.num_classes);
  const std::size_t C = cfg.model.num_classes;
  const CountGrid pred = count_by_detection(align_predictions(preds, scenes), cfg.count_confidence, C);
  const CountReport rep = counting_metrics(pred, ground_truth_counts(scenes, C));
  out << "confidence " << fmt_double(cfg.count_confidence) << "\n" << count_table(rep);
  if (!o.out.empty()) write_json(o.out, to_json(rep, cfg.count_confidence));
  return 0;
}

inline int cmd_gradcheck(const CliOptions& o, std::ostream& out) {
  using namespace cli_detail;
  GradSuiteOptions opt;
  if (o.seed) opt.seed = *o.seed;
  const auto rows = run_grad_suite(opt);
  out << grad_table(rows);
  if (!o.out.empty()) write_json(o.out, to_json(rows));
  bool ok = true;
  for (const auto& r : rows) {
    if (r.passed()) continue;
    ok = false;
    out << "FAIL " << r.op << ": " << r.first_failure << "\n";
  }
  return ok ? 0 : 1;
}

inline int cmd_ablate(const CliOptions& o, std::ostream& out, std::ostream& err) {
  using namespace cli_detail;
  const PipelineConfig cfg = resolve_config(o);
  DatasetSplits data;
  if (o.scenes.empty()) {
    data = synth_splits(cfg);
  } else {
    const std::filesystem::path root(o.scenes);
    data.train = scenes_from((root / "train").string(), cfg);
    data.eval = scenes_from((root / "eval").string(), cfg);
  }
  const AblationResult res = run_ablation(data.train, data.eval, cfg, [&](const ContextConfig& c, const EvalReport& r) {
    err << "ablate " << c.label() << "  mAP@0.25 " << fixed(r.map_25()) << "  mAP@0.5 " << fixed(r.map_50()) << "\n";
  });
  out << ablation_table(res);
  out << "context on - off: mAP@0.25 " << fixed(res.context_delta(0.25)) << ", mAP@0.5 "
      << fixed(res.context_delta(0.5)) << "\n";
  if (!o.out.empty()) write_json(o.out, to_json(res));
  return 0;
}

/// Parses argv and runs one subcommand. Errors go to `err` with exit code 1;
/// usage errors use CLI11's exit codes.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"3D object detection with contextual modules on synthetic scenes"};
  app.require_subcommand(1);
  CliOptions o;
  std::vector<double> stages;
  double iou = 0.0, conf = 0.0;
  std::uint64_t seed = 0;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "key = value config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "seed for scene synthesis and training");
    sub->add_option("--stages", stages, "cascade IoU thresholds, ascending")->delimiter(',');
  };
  auto* gen = app.add_subcommand("generate", "write synthetic train/ and eval/ scene directories");
  auto* train = app.add_subcommand("train", "train a model and write a checkpoint");
  auto* detect = app.add_subcommand("detect", "run a checkpoint over scenes and write predictions");
  auto* eval = app.add_subcommand("eval", "per-class AP and mAP of predictions");
  auto* count = app.add_subcommand("count", "counting errors of thresholded predictions");
  auto* grad = app.add_subcommand("gradcheck", "finite-difference checks of every differentiable op");
  auto* ablate = app.add_subcommand("ablate", "train and evaluate all context-module combinations");
  for (auto* sub : {gen, train, detect, eval, count, grad, ablate}) common(sub);

  gen->add_option("--out", o.out, "output directory")->required();
  train->add_option("--scenes", o.scenes, "training scene directory")->required();
  train->add_option("--checkpoint", o.checkpoint, "checkpoint to write")->required();
  train->add_option("--out", o.out, "loss log (JSON); defaults to <checkpoint>.loss.json");
  detect->add_option("--scenes", o.scenes, "scene directory")->required();
  detect->add_option("--checkpoint", o.checkpoint, "trained checkpoint")->required();
  detect->add_option("--out", o.out, "predictions file to write")->required();
  for (auto* sub : {eval, count}) {
    sub->add_option("--scenes", o.scenes, "scene directory with ground truth")->required();
    sub->add_option("--predictions", o.predictions, "predictions file")->required();
    sub->add_option("--out", o.out, "report file (JSON)");
  }
  eval->add_option("--iou", iou, "single IoU threshold; both when omitted")->check(CLI::IsMember({0.25, 0.5}));
  count->add_option("--conf", conf, "objectness threshold for counting")->default_val(0.95)->check(
      CLI::Range(0.0, 1.0));
  grad->add_option("--out", o.out, "report file (JSON)");
  ablate->add_option("--scenes", o.scenes, "directory holding train/ and eval/; synthesized when omitted");
  ablate->add_option("--out", o.out, "report file (JSON)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  CLI::App* sub = app.get_subcommands().front();
  if (sub->count("--seed")) o.seed = seed;
  if (sub->count("--stages")) o.stages = stages;
  if (sub->get_option_no_throw("--iou") && sub->count("--iou")) o.iou = iou;
  if (sub == count) o.conf = conf;

  try {
    if (sub == gen) return cmd_generate(o, out);
    if (sub == train) return cmd_train(o, out, err);
    if (sub == detect) return cmd_detect(o, out);
    if (sub == eval) return cmd_eval(o, out);
    if (sub == count) return cmd_count(o, out);
    if (sub == grad) return cmd_gradcheck(o, out);
    return cmd_ablate(o, out, err);
  } catch (const std::exception& e) {
    err << "ctxdet " << sub->get_name() << ": error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace ctxdet
