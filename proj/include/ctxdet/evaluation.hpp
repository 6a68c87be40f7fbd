#pragma once

// Detection metrics (per-class AP, mAP at several IoU thresholds) and
// counting-by-detection metrics (RMSE, relative RMSE and their
// non-zero-ground-truth variants).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctxdet/geometry.hpp"
#include "ctxdet/scene.hpp"

namespace ctxdet {

class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One ranked detection of a single class after matching.
struct RankedMatch {
  double score = 0.0;
  bool true_positive = false;
  std::size_t scene = 0;
  std::size_t index = 0;  // position in the scene's detection list
};

struct ClassMatches {
  std::vector<RankedMatch> ranked;  // score descending
  std::size_t gt_count = 0;
};

/// Per class: detections in score order (ties: scene, then input index) are
/// greedily matched to the unmatched same-class ground truth of highest IoU
/// at or above iou_thresh (ties: lowest ground-truth index).
inline std::vector<ClassMatches> match_detections(const std::vector<std::vector<Detection>>& dets,
                                                  const std::vector<std::vector<GroundTruth>>& gts,
                                                  double iou_thresh, std::size_t num_classes) {
  if (dets.size() != gts.size()) throw EvaluationError("match_detections: scene counts differ");
  std::vector<ClassMatches> out(num_classes);
  for (const auto& scene_gt : gts)
    for (const auto& g : scene_gt) {
      if (g.class_id >= num_classes) throw EvaluationError("ground-truth class out of range");
      ++out[g.class_id].gt_count;
    }
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto& ranked = out[c].ranked;
    for (std::size_t s = 0; s < dets.size(); ++s)
      for (std::size_t i = 0; i < dets[s].size(); ++i)
        if (dets[s][i].class_id == c) ranked.push_back({dets[s][i].objectness, false, s, i});
    std::sort(ranked.begin(), ranked.end(), [](const RankedMatch& a, const RankedMatch& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.scene != b.scene) return a.scene < b.scene;
      return a.index < b.index;
    });
    std::vector<std::vector<char>> used(gts.size());
    for (std::size_t s = 0; s < gts.size(); ++s) used[s].assign(gts[s].size(), 0);
    for (auto& m : ranked) {
      const Box3& box = dets[m.scene][m.index].box;
      double best = -1.0;
      std::size_t best_g = 0;
      for (std::size_t g = 0; g < gts[m.scene].size(); ++g) {
        const auto& gt = gts[m.scene][g];
        if (gt.class_id != c || used[m.scene][g]) continue;
        const double iou = iou3d(box, gt.box);
        if (iou >= iou_thresh && iou > best) {
          best = iou;
          best_g = g;
        }
      }
      if (best >= 0.0) {
        used[m.scene][best_g] = 1;
        m.true_positive = true;
      }
    }
  }
  return out;
}

struct PrPoint {
  double recall = 0.0;
  double precision = 0.0;
};

/// Precision/recall at the end of each group of equal scores.
inline std::vector<PrPoint> pr_curve(const std::vector<RankedMatch>& ranked, std::size_t gt_count) {
  std::vector<PrPoint> pts;
  if (gt_count == 0) return pts;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    tp += ranked[i].true_positive;
    if (i + 1 < ranked.size() && ranked[i + 1].score == ranked[i].score) continue;
    pts.push_back({double(tp) / double(gt_count), double(tp) / double(i + 1)});
  }
  return pts;
}

/// All-point interpolated AP: area under the monotone precision envelope.
/// `ranked` must be in score-descending order. Returns 0 when gt_count is 0.
inline double average_precision(const std::vector<RankedMatch>& ranked, std::size_t gt_count) {
  auto pts = pr_curve(ranked, gt_count);
  if (pts.empty()) return 0.0;
  for (std::size_t i = pts.size() - 1; i-- > 0;)
    pts[i].precision = std::max(pts[i].precision, pts[i + 1].precision);
  double ap = 0.0, prev_recall = 0.0;
  for (const auto& p : pts) {
    if (p.recall > prev_recall) ap += (p.recall - prev_recall) * p.precision;
    prev_recall = std::max(prev_recall, p.recall);
  }
  return ap;
}

struct EvalReport {
  std::vector<double> iou_thresholds;                  // e.g. {0.25, 0.5}
  std::vector<std::vector<double>> per_class_ap;       // [threshold][class]
  std::vector<std::vector<std::size_t>> gt_counts;     // [threshold][class]
  std::vector<double> map;                             // [threshold]
  std::vector<std::vector<std::vector<PrPoint>>> pr_curves;  // [threshold][class]
  std::vector<std::size_t> evaluated_classes;          // classes with ground truth

  double map_at(double thresh) const {
    for (std::size_t i = 0; i < iou_thresholds.size(); ++i)
      if (iou_thresholds[i] == thresh) return map[i];
    throw EvaluationError("no mAP computed at IoU " + std::to_string(thresh));
  }
  double map_25() const { return map_at(0.25); }
  double map_50() const { return map_at(0.5); }
};

/// Aligns predictions with scenes by id. Predictions for unknown scene ids are an error.
inline std::vector<std::vector<Detection>> align_predictions(const PredictionMap& preds,
                                                             const std::vector<Scene>& scenes) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < scenes.size(); ++i) index[scenes[i].id] = i;
  std::vector<std::string> unknown;
  for (const auto& [id, d] : preds)
    if (!index.count(id)) unknown.push_back(id);
  if (!unknown.empty()) {
    std::string msg = "predictions reference unknown scene ids:";
    for (const auto& u : unknown) msg += " " + u;
    throw EvaluationError(msg);
  }
  std::vector<std::vector<Detection>> out(scenes.size());
  for (const auto& [id, d] : preds) out[index[id]] = d;
  return out;
}

/// mAP over classes that have at least one ground-truth box in the split.
inline EvalReport evaluate_detections(const std::vector<std::vector<Detection>>& dets,
                                      const std::vector<std::vector<GroundTruth>>& gts,
                                      std::size_t num_classes,
                                      const std::vector<double>& iou_thresholds = {0.25, 0.5}) {
  EvalReport rep;
  rep.iou_thresholds = iou_thresholds;
  for (double t : iou_thresholds) {
    auto matches = match_detections(dets, gts, t, num_classes);
    std::vector<double> aps;
    std::vector<std::size_t> counts;
    std::vector<std::vector<PrPoint>> curves;
    double sum = 0.0;
    std::size_t evaluated = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
      aps.push_back(average_precision(matches[c].ranked, matches[c].gt_count));
      counts.push_back(matches[c].gt_count);
      curves.push_back(pr_curve(matches[c].ranked, matches[c].gt_count));
      if (matches[c].gt_count > 0) {
        sum += aps.back();
        ++evaluated;
      }
    }
    rep.per_class_ap.push_back(aps);
    rep.gt_counts.push_back(counts);
    rep.pr_curves.push_back(curves);
    rep.map.push_back(evaluated ? sum / double(evaluated) : 0.0);
  }
  rep.evaluated_classes.clear();
  if (!rep.gt_counts.empty())
    for (std::size_t c = 0; c < num_classes; ++c)
      if (rep.gt_counts[0][c] > 0) rep.evaluated_classes.push_back(c);
  return rep;
}

inline EvalReport evaluate_predictions(const PredictionMap& preds, const std::vector<Scene>& scenes,
                                       std::size_t num_classes,
                                       const std::vector<double>& iou_thresholds = {0.25, 0.5}) {
  std::vector<std::vector<GroundTruth>> gts;
  for (const auto& s : scenes) gts.push_back(s.gt);
  return evaluate_detections(align_predictions(preds, scenes), gts, num_classes, iou_thresholds);
}

// ---- counting -------------------------------------------------------------

using CountGrid = std::vector<std::vector<double>>;  // [scene][class]

/// Number of detections per scene and class whose objectness reaches conf.
inline CountGrid count_by_detection(const std::vector<std::vector<Detection>>& dets, double conf,
                                    std::size_t num_classes) {
  if (!(conf > 0.0 && conf < 1.0)) throw EvaluationError("confidence threshold must lie in (0,1)");
  CountGrid p(dets.size(), std::vector<double>(num_classes, 0.0));
  for (std::size_t s = 0; s < dets.size(); ++s)
    for (const auto& d : dets[s]) {
      if (d.class_id >= num_classes) throw EvaluationError("detection class out of range");
      if (d.objectness >= conf) p[s][d.class_id] += 1.0;
    }
  return p;
}

inline CountGrid ground_truth_counts(const std::vector<Scene>& scenes, std::size_t num_classes) {
  CountGrid g(scenes.size(), std::vector<double>(num_classes, 0.0));
  for (std::size_t s = 0; s < scenes.size(); ++s)
    for (const auto& gt : scenes[s].gt) g[s][gt.class_id] += 1.0;
  return g;
}

struct ClassCountErrors {
  double rmse = 0.0;
  double nz_rmse = 0.0;
  double rrmse = 0.0;
  double nz_rrmse = 0.0;
};

struct CountReport {
  std::vector<ClassCountErrors> per_class;
  double m_rmse = 0.0;
  double m_nz_rmse = 0.0;
  double m_rrmse = 0.0;
  double m_nz_rrmse = 0.0;
};

/// RMSE_c = sqrt(mean_i (p_ic - g_ic)^2); rRMSE_c divides each term by
/// (g_ic + 1). The nz- variants average only over scans with g_ic > 0 and
/// are 0 when there are none. m- values are unweighted class means.
inline CountReport counting_metrics(const CountGrid& p, const CountGrid& g) {
  if (p.size() != g.size() || p.empty()) throw EvaluationError("count grids must cover the same scans");
  const std::size_t classes = g.front().size();
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i].size() != classes || g[i].size() != classes)
      throw EvaluationError("count grids must cover the same classes");
  CountReport rep;
  for (std::size_t c = 0; c < classes; ++c) {
    double se = 0.0, rse = 0.0, nz_se = 0.0, nz_rse = 0.0;
    std::size_t nz = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (g[i][c] < 0) throw EvaluationError("ground-truth counts must be non-negative");
      const double d2 = (p[i][c] - g[i][c]) * (p[i][c] - g[i][c]);
      const double r2 = d2 / (g[i][c] + 1.0);
      se += d2;
      rse += r2;
      if (g[i][c] > 0) {
        nz_se += d2;
        nz_rse += r2;
        ++nz;
      }
    }
    const double n = double(p.size());
    ClassCountErrors e;
    e.rmse = std::sqrt(se / n);
    e.rrmse = std::sqrt(rse / n);
    e.nz_rmse = nz ? std::sqrt(nz_se / double(nz)) : 0.0;
    e.nz_rrmse = nz ? std::sqrt(nz_rse / double(nz)) : 0.0;
    rep.per_class.push_back(e);
  }
  for (const auto& e : rep.per_class) {
    rep.m_rmse += e.rmse;
    rep.m_nz_rmse += e.nz_rmse;
    rep.m_rrmse += e.rrmse;
    rep.m_nz_rrmse += e.nz_rrmse;
  }
  const double k = double(classes);
  rep.m_rmse /= k;
  rep.m_nz_rmse /= k;
  rep.m_rrmse /= k;
  rep.m_nz_rrmse /= k;
  return rep;
}

}  // namespace ctxdet
