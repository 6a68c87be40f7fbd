#pragma once

// JSON and plain-text renderings of evaluation, counting, training and
// ablation results. Tables put classes in columns and methods in rows.

#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctxdet/evaluation.hpp"
#include "ctxdet/experiment.hpp"
#include "ctxdet/grad_suite.hpp"
#include "ctxdet/train.hpp"

namespace ctxdet {

using Json = nlohmann::ordered_json;

inline std::string class_name(std::size_t c) { return "class" + std::to_string(c); }

inline std::string threshold_key(double t) { return fmt_double(t); }

inline Json to_json(const EvalReport& r) {
  Json j;
  j["iou_thresholds"] = r.iou_thresholds;
  j["evaluated_classes"] = r.evaluated_classes;
  Json ap = Json::object(), m = Json::object(), gt = Json::object(), curves = Json::object();
  for (std::size_t i = 0; i < r.iou_thresholds.size(); ++i) {
    const std::string k = threshold_key(r.iou_thresholds[i]);
    ap[k] = r.per_class_ap[i];
    m[k] = r.map[i];
    gt[k] = r.gt_counts[i];
    Json per_class = Json::array();
    for (const auto& curve : r.pr_curves[i]) {
      Json c = Json::array();
      for (const auto& p : curve) c.push_back({p.recall, p.precision});
      per_class.push_back(c);
    }
    curves[k] = per_class;
  }
  j["per_class_ap"] = ap;
  j["map"] = m;
  j["gt_counts"] = gt;
  j["pr_curves"] = curves;
  return j;
}

inline Json to_json(const CountReport& r, double confidence) {
  Json j;
  j["confidence"] = confidence;
  Json rows = Json::array();
  for (const auto& e : r.per_class)
    rows.push_back({{"rmse", e.rmse}, {"nz_rmse", e.nz_rmse}, {"rrmse", e.rrmse}, {"nz_rrmse", e.nz_rrmse}});
  j["per_class"] = rows;
  j["m_rmse"] = r.m_rmse;
  j["m_nz_rmse"] = r.m_nz_rmse;
  j["m_rrmse"] = r.m_rrmse;
  j["m_nz_rrmse"] = r.m_nz_rrmse;
  return j;
}

inline Json to_json(const std::vector<EpochRecord>& history) {
  Json rows = Json::array();
  for (const auto& e : history)
    rows.push_back({{"epoch", e.epoch},
                    {"learning_rate", e.learning_rate},
                    {"loss", e.mean_loss},
                    {"vote", e.vote},
                    {"size", e.size},
                    {"objectness", e.objectness},
                    {"classification", e.classification},
                    {"residual", e.residual}});
  return rows;
}

inline Json to_json(const StageIouReport& r) {
  return {{"matched", r.matched}, {"mean_iou", r.mean_iou}};
}

inline Json to_json(const AblationResult& r) {
  Json rows = Json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"config", row.context.label()},
                    {"gcm", row.context.enable_gcm},
                    {"pcm", row.context.enable_pcm},
                    {"hcm", row.context.enable_hcm},
                    {"per_class_ap", to_json(row.eval)["per_class_ap"]},
                    {"map", to_json(row.eval)["map"]}});
  Json j;
  j["rows"] = rows;
  Json delta = Json::object();
  if (!r.rows.empty())
    for (double t : r.rows.front().eval.iou_thresholds) delta[threshold_key(t)] = r.context_delta(t);
  j["context_on_minus_off"] = delta;
  return j;
}

inline Json to_json(const std::vector<GradSuiteRow>& rows) {
  Json out = Json::array();
  for (const auto& r : rows)
    out.push_back({{"op", r.op},
                   {"trials", r.trials},
                   {"failures", r.failures},
                   {"max_rel_error", r.max_rel_error},
                   {"passed", r.passed()}});
  return out;
}

/// Fixed-width table; the first column is left-aligned, the rest right-aligned.
class TextTable {
 public:
  explicit TextTable(std::vector<std::string> header) : header_(std::move(header)) {}

  void add(std::vector<std::string> row) { rows_.push_back(std::move(row)); }

  std::string str() const {
    std::vector<std::size_t> w(header_.size(), 0);
    auto widen = [&](const std::vector<std::string>& r) {
      for (std::size_t i = 0; i < r.size() && i < w.size(); ++i) w[i] = std::max(w[i], r[i].size());
    };
    widen(header_);
    for (const auto& r : rows_) widen(r);
    std::ostringstream os;
    auto line = [&](const std::vector<std::string>& r) {
      for (std::size_t i = 0; i < w.size(); ++i) {
        const std::string cell = i < r.size() ? r[i] : "";
        const std::string pad(w[i] - cell.size(), ' ');
        if (i) os << "  ";
        os << (i == 0 ? cell + pad : pad + cell);
      }
      os << '\n';
    };
    line(header_);
    std::size_t total = 0;
    for (std::size_t x : w) total += x;
    os << std::string(total + 2 * (w.size() - 1), '-') << '\n';
    for (const auto& r : rows_) line(r);
    return os.str();
  }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

inline std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::vector<std::string> class_header(const std::string& first, std::size_t classes,
                                             const std::vector<std::string>& tail) {
  std::vector<std::string> h{first};
  for (std::size_t c = 0; c < classes; ++c) h.push_back(class_name(c));
  h.insert(h.end(), tail.begin(), tail.end());
  return h;
}

/// One row per IoU threshold: per-class AP then mAP.
inline std::string eval_table(const EvalReport& r, const std::string& method = "detector") {
  const std::size_t classes = r.per_class_ap.empty() ? 0 : r.per_class_ap[0].size();
  TextTable t(class_header("method", classes, {"mAP"}));
  for (std::size_t i = 0; i < r.iou_thresholds.size(); ++i) {
    std::vector<std::string> row{method + " @" + threshold_key(r.iou_thresholds[i])};
    for (std::size_t c = 0; c < classes; ++c)
      row.push_back(r.gt_counts[i][c] ? fixed(r.per_class_ap[i][c]) : "n/a");
    row.push_back(fixed(r.map[i]));
    t.add(row);
  }
  return t.str();
}

/// Rows are the four error measures; the last column holds the class mean.
inline std::string count_table(const CountReport& r, const std::string& method = "detector") {
  TextTable t(class_header("metric", r.per_class.size(), {"mean"}));
  auto add = [&](const std::string& name, double ClassCountErrors::*field, double mean) {
    std::vector<std::string> row{method + " " + name};
    for (const auto& e : r.per_class) row.push_back(fixed(e.*field));
    row.push_back(fixed(mean));
    t.add(row);
  };
  add("RMSE", &ClassCountErrors::rmse, r.m_rmse);
  add("nz-RMSE", &ClassCountErrors::nz_rmse, r.m_nz_rmse);
  add("rRMSE", &ClassCountErrors::rrmse, r.m_rrmse);
  add("nz-rRMSE", &ClassCountErrors::nz_rrmse, r.m_nz_rrmse);
  return t.str();
}

/// One row per context configuration; per-class AP at each threshold, then mAPs.
inline std::string ablation_table(const AblationResult& r) {
  if (r.rows.empty()) return "";
  const auto& thresholds = r.rows.front().eval.iou_thresholds;
  const std::size_t classes = r.rows.front().eval.per_class_ap[0].size();
  std::vector<std::string> header{"config"};
  for (double t : thresholds)
    for (std::size_t c = 0; c < classes; ++c) header.push_back(class_name(c) + "@" + threshold_key(t));
  for (double t : thresholds) header.push_back("mAP@" + threshold_key(t));
  TextTable table(header);
  for (const auto& row : r.rows) {
    std::vector<std::string> cells{row.context.label()};
    for (std::size_t i = 0; i < thresholds.size(); ++i)
      for (std::size_t c = 0; c < classes; ++c) cells.push_back(fixed(row.eval.per_class_ap[i][c]));
    for (double m : row.eval.map) cells.push_back(fixed(m));
    table.add(cells);
  }
  return table.str();
}

inline std::string grad_table(const std::vector<GradSuiteRow>& rows) {
  TextTable t({"op", "trials", "failures", "max rel err", "seconds"});
  for (const auto& r : rows) {
    char err[32];
    std::snprintf(err, sizeof err, "%.2e", r.max_rel_error);
    t.add({r.op, std::to_string(r.trials), std::to_string(r.failures), err, fixed(r.seconds, 3)});
  }
  return t.str();
}

}  // namespace ctxdet
