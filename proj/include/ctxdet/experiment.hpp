#pragma once

// Dataset-level drivers shared by the command-line tool and the acceptance
// binary: split generation, batch detection, cascade diagnostics, ablation.

#include <filesystem>
#include <string>
#include <vector>

#include "ctxdet/evaluation.hpp"
#include "ctxdet/pipeline.hpp"
#include "ctxdet/train.hpp"

namespace ctxdet {

struct DatasetSplits {
  std::vector<Scene> train;
  std::vector<Scene> eval;
};

/// Train scenes use synth indices [0, train_scenes); held-out scenes continue
/// at [train_scenes, train_scenes + eval_scenes), so the two never overlap.
inline DatasetSplits synth_splits(const PipelineConfig& cfg) {
  DatasetSplits d;
  for (std::size_t i = 0; i < cfg.train_scenes; ++i) d.train.push_back(synth_scene(cfg.synth, i));
  for (std::size_t i = 0; i < cfg.eval_scenes; ++i) d.eval.push_back(synth_scene(cfg.synth, cfg.train_scenes + i));
  return d;
}

inline void save_scene_dir(const std::filesystem::path& dir, const std::vector<Scene>& scenes) {
  std::filesystem::create_directories(dir);
  for (const auto& s : scenes) save_scene(dir / (s.id + ".scene"), s);
}

inline std::vector<SceneDetections> detect_all(const std::vector<Scene>& scenes, ModelParams& params,
                                               const ModelConfig& cfg) {
  std::vector<SceneDetections> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) out.push_back(detect_scene(s.points, params, cfg));
  return out;
}

inline PredictionMap to_prediction_map(const std::vector<Scene>& scenes, const std::vector<SceneDetections>& dets) {
  PredictionMap m;
  for (std::size_t i = 0; i < scenes.size(); ++i) m[scenes[i].id] = dets[i].detections;
  return m;
}

inline std::vector<std::vector<Detection>> detection_lists(const std::vector<SceneDetections>& dets) {
  std::vector<std::vector<Detection>> out;
  for (const auto& d : dets) out.push_back(d.detections);
  return out;
}

struct StageIouReport {
  std::vector<double> mean_iou;  // [0] proposals, [t+1] after stage t
  std::size_t matched = 0;

  double first_stage() const { return mean_iou.at(1); }
  double final_stage() const { return mean_iou.back(); }
};

/// Follows each kept detection that matches a ground-truth box (same class,
/// final-box IoU >= iou_thresh, greedy in score order) back through the
/// cascade and averages its IoU with that box at every stage.
inline StageIouReport stage_matched_iou(const std::vector<Scene>& scenes, const std::vector<SceneDetections>& dets,
                                        double iou_thresh = 0.25) {
  StageIouReport rep;
  if (scenes.size() != dets.size()) throw EvaluationError("stage_matched_iou: scene counts differ");
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const auto& sd = dets[s];
    if (rep.mean_iou.empty()) rep.mean_iou.assign(sd.stage_boxes.size(), 0.0);
    std::vector<char> used(scenes[s].gt.size(), 0);
    for (std::size_t j = 0; j < sd.detections.size(); ++j) {
      const Detection& d = sd.detections[j];
      double best = -1.0;
      std::size_t best_g = 0;
      for (std::size_t g = 0; g < scenes[s].gt.size(); ++g) {
        const auto& gt = scenes[s].gt[g];
        if (used[g] || gt.class_id != d.class_id) continue;
        const double iou = iou3d(d.box, gt.box);
        if (iou >= iou_thresh && iou > best) {
          best = iou;
          best_g = g;
        }
      }
      if (best < 0.0) continue;
      used[best_g] = 1;
      ++rep.matched;
      for (std::size_t t = 0; t < sd.stage_boxes.size(); ++t)
        rep.mean_iou[t] += iou3d(sd.stage_boxes[t][sd.kept[j]], scenes[s].gt[best_g].box);
    }
  }
  if (rep.matched > 0)
    for (double& v : rep.mean_iou) v /= double(rep.matched);
  return rep;
}

struct AblationRow {
  ContextConfig context;
  EvalReport eval;
};

struct AblationResult {
  std::vector<AblationRow> rows;  // ContextConfig::all_combinations() order

  /// mAP (all modules on) minus mAP (all off) at the given IoU threshold.
  double context_delta(double iou) const {
    const AblationRow* on = nullptr;
    const AblationRow* off = nullptr;
    for (const auto& r : rows) {
      if (r.context.enable_gcm && r.context.enable_pcm && r.context.enable_hcm) on = &r;
      if (!r.context.enable_gcm && !r.context.enable_pcm && !r.context.enable_hcm) off = &r;
    }
    if (!on || !off) throw EvaluationError("ablation lacks the all-on or all-off configuration");
    return on->eval.map_at(iou) - off->eval.map_at(iou);
  }
};

using AblationProgress = std::function<void(const ContextConfig&, const EvalReport&)>;

/// Trains and evaluates one model per context-module combination; every
/// other setting (data, seeds, schedule) is shared.
inline AblationResult run_ablation(const std::vector<Scene>& train, const std::vector<Scene>& eval,
                                   const PipelineConfig& cfg, const AblationProgress& progress = {}) {
  AblationResult res;
  for (const ContextConfig& cc : ContextConfig::all_combinations()) {
    ModelConfig mc = cfg.model;
    const double scale = mc.context.attention_scale;
    const bool across = mc.context.pcm_across_clusters;
    mc.context = cc;
    mc.context.attention_scale = scale;
    mc.context.pcm_across_clusters = across;
    TrainResult tr = train_toy(train, mc, cfg.train);
    auto dets = detect_all(eval, tr.params, mc);
    std::vector<std::vector<GroundTruth>> gts;
    for (const auto& s : eval) gts.push_back(s.gt);
    AblationRow row{mc.context, evaluate_detections(detection_lists(dets), gts, mc.num_classes)};
    if (progress) progress(row.context, row.eval);
    res.rows.push_back(std::move(row));
  }
  return res;
}

}  // namespace ctxdet
