#pragma once

// End-to-end detector:
//
//   points -> seed encoder -> per-kind geometric context -> votes (center,
//   face, edge) -> vote clusters -> proposal / hybrid context -> proposals ->
//   refinement cascade -> detections
//
// Discrete decisions (seed sampling, clustering, the boxes handed from one
// stage to the next) are not differentiated. They are collected in a Trace;
// passing a Trace back in replays them, which makes the loss a smooth
// function of the parameters for finite-difference checks.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "ctxdet/config.hpp"
#include "ctxdet/context.hpp"
#include "ctxdet/geometry.hpp"
#include "ctxdet/model.hpp"
#include "ctxdet/sampling.hpp"
#include "ctxdet/scene.hpp"
#include "ctxdet/tape.hpp"

namespace ctxdet {

class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Proposal {
  Box3 box;
  std::vector<double> features;
  double objectness_logit = 0.0;
  std::vector<double> class_logits;
};

struct Trace {
  std::vector<std::size_t> seed_indices;
  std::array<ClusterSet, kNumPrimitiveKinds> clusters;
  std::vector<std::vector<Box3>> boxes;  // [0] proposals, [t+1] after stage t
};

// ---- seed encoder ---------------------------------------------------------

struct SeedEncoding {
  std::vector<std::size_t> indices;
  std::vector<Vec3> positions;
  Var features;  // S x D
};

/// One set-abstraction layer: farthest-point seeds, ball-query neighbourhoods
/// in seed-relative coordinates, shared MLP, max-pool.
inline SeedEncoding encode_seeds(Tape& tape, const std::vector<Vec3>& points, Mlp& encoder,
                                 const ModelConfig& cfg,
                                 const std::vector<std::size_t>* frozen_indices = nullptr) {
  if (points.size() < cfg.num_seeds)
    throw InputError("scene has " + std::to_string(points.size()) + " points but " +
                     std::to_string(cfg.num_seeds) + " seeds are required");
  SeedEncoding out;
  // Seeds are the first num_seeds FPS picks; the optional support set
  // continues the same FPS sequence, so it always contains the seeds.
  const std::size_t support_n =
      cfg.encoder_support == 0 ? points.size() : std::clamp(cfg.encoder_support, cfg.num_seeds, points.size());
  std::vector<Vec3> support_storage;
  const std::vector<Vec3>* support = &points;
  if (support_n < points.size()) {
    const auto idx = farthest_point_sample(points, support_n);
    for (std::size_t i : idx) support_storage.push_back(points[i]);
    support = &support_storage;
    if (!frozen_indices) out.indices.assign(idx.begin(), idx.begin() + std::ptrdiff_t(cfg.num_seeds));
  } else if (!frozen_indices) {
    out.indices = farthest_point_sample(points, cfg.num_seeds);
  }
  if (frozen_indices) out.indices = *frozen_indices;
  for (std::size_t i : out.indices) out.positions.push_back(points[i]);
  auto groups = ball_query(*support, out.positions, cfg.encoder_radius, cfg.encoder_max_pts);
  std::vector<double> rel;
  std::vector<std::size_t> offsets{0};
  const double inv_r = 1.0 / cfg.encoder_radius;
  for (std::size_t s = 0; s < groups.size(); ++s) {
    for (std::size_t idx : groups[s]) {
      const Vec3 d = ((*support)[idx] - out.positions[s]) * inv_r;
      rel.insert(rel.end(), {d.x, d.y, d.z});
    }
    offsets.push_back(offsets.back() + groups[s].size());
  }
  Var x = tape.constant(Tensor({offsets.back(), 3}, std::move(rel)));
  out.features = tape.segment_max_pool(tape.mlp(x, encoder), offsets);
  return out;
}

/// Value-only seed encoding.
inline PointSet encode_seeds(const std::vector<Vec3>& points, ModelParams& params,
                             const ModelConfig& cfg) {
  Tape tape;
  SeedEncoding enc = encode_seeds(tape, points, params.encoder, cfg);
  return PointSet{enc.positions, tape.value(enc.features)};
}

// ---- voting and clustering -------------------------------------------------

/// Votes = seed positions + head(features)[:, 0:3].
inline Var vote_positions(Tape& tape, const std::vector<Vec3>& seeds, Var features, Mlp& head) {
  Var offsets = tape.mlp(features, head);
  std::vector<double> pos;
  pos.reserve(seeds.size() * 3);
  for (const auto& p : seeds) pos.insert(pos.end(), {p.x, p.y, p.z});
  return tape.add(tape.constant(Tensor({seeds.size(), 3}, std::move(pos))), offsets);
}

inline std::vector<Vec3> rows_to_points(const Tensor& t) {
  std::vector<Vec3> out(t.rows());
  for (std::size_t r = 0; r < t.rows(); ++r) out[r] = {t.at(r, 0), t.at(r, 1), t.at(r, 2)};
  return out;
}

/// Per-vote inputs c_i = [(vote - cluster center) / radius, vote feature].
inline ClusterInputs cluster_inputs(Tape& tape, const ClusterSet& cs, Var votes, Var features,
                                    double radius) {
  std::vector<std::size_t> idx;
  std::vector<double> centers;
  std::vector<std::size_t> offsets{0};
  for (std::size_t c = 0; c < cs.size(); ++c) {
    for (std::size_t m : cs.members[c]) {
      idx.push_back(m);
      centers.insert(centers.end(), {cs.centers[c].x, cs.centers[c].y, cs.centers[c].z});
    }
    offsets.push_back(idx.size());
  }
  Var rel = tape.scale(
      tape.sub(tape.gather_rows(votes, idx), tape.constant(Tensor({idx.size(), 3}, std::move(centers)))),
      1.0 / radius);
  Var feats = tape.gather_rows(features, idx);
  return {tape.concat_cols({rel, feats}), std::move(offsets)};
}

/// Channel-wise max over each cluster's member rows of a per-vote feature map.
inline Var cluster_max_pool(Tape& tape, const ClusterSet& cs, Var features) {
  std::vector<std::size_t> idx, offsets{0};
  for (const auto& m : cs.members) {
    idx.insert(idx.end(), m.begin(), m.end());
    offsets.push_back(idx.size());
  }
  return tape.segment_max_pool(tape.gather_rows(features, idx), offsets);
}

// ---- proposals ------------------------------------------------------------

/// For each query point, the clusters whose centers lie within radius, or the
/// single nearest cluster when none does. Returned as gather indices + offsets.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> nearby_clusters(
    const std::vector<Vec3>& queries, const ClusterSet& cs, double radius) {
  std::vector<std::size_t> idx, offsets{0};
  const double r2 = radius * radius;
  for (const auto& q : queries) {
    std::size_t nearest = 0;
    double best = std::numeric_limits<double>::infinity();
    const std::size_t before = idx.size();
    for (std::size_t c = 0; c < cs.size(); ++c) {
      const double d = squared_distance(q, cs.centers[c]);
      if (d <= r2) idx.push_back(c);
      if (d < best) {
        best = d;
        nearest = c;
      }
    }
    if (idx.size() == before) idx.push_back(nearest);
    offsets.push_back(idx.size());
  }
  return {idx, offsets};
}

/// Proposal features: center-cluster row concatenated with the max-pooled
/// features of nearby face clusters and nearby edge clusters.
inline Var proposal_features(Tape& tape, const std::array<ClusterSet, kNumPrimitiveKinds>& clusters,
                             const std::array<Var, kNumPrimitiveKinds>& cluster_features,
                             double pool_radius) {
  const auto& centers = clusters[0].centers;
  std::vector<Var> parts{cluster_features[0]};
  for (std::size_t k = 1; k < kNumPrimitiveKinds; ++k) {
    auto [idx, offsets] = nearby_clusters(centers, clusters[k], pool_radius);
    parts.push_back(tape.segment_max_pool(tape.gather_rows(cluster_features[k], idx), offsets));
  }
  return tape.concat_cols(parts);
}

inline Box3 clamp_decode(BoxResidual r, const Box3& anchor, const ModelConfig& cfg) {
  for (std::size_t i = 0; i < 3; ++i) {
    r.d_center[i] = std::clamp(r.d_center[i], -cfg.max_center_shift, cfg.max_center_shift);
    r.d_size[i] = std::clamp(r.d_size[i], -cfg.max_log_scale, cfg.max_log_scale);
  }
  return decode_residual(r, anchor);
}

struct ProposalSet {
  std::vector<Box3> boxes;
  Var features;  // N x 6D: per kind, [K_h row | pooled primitive context]
  Var size_out;  // N x 3, log size relative to the anchor cube
};

/// One proposal per center cluster: box centered on the cluster, size from the size head.
inline ProposalSet propose(Tape& tape, const std::array<ClusterSet, kNumPrimitiveKinds>& clusters,
                           const std::array<Var, kNumPrimitiveKinds>& cluster_features,
                           Mlp& size_head, const ModelConfig& cfg,
                           const std::vector<Box3>* frozen_boxes = nullptr) {
  if (clusters[0].size() == 0) throw StateError("propose: no center clusters");
  ProposalSet ps;
  ps.features = proposal_features(tape, clusters, cluster_features, cfg.primitive_pool_radius);
  ps.size_out = tape.mlp(ps.features, size_head);
  if (frozen_boxes) {
    ps.boxes = *frozen_boxes;
    return ps;
  }
  const Tensor& s = tape.value(ps.size_out);
  const Box3 unit{{0, 0, 0}, {cfg.anchor_size, cfg.anchor_size, cfg.anchor_size}};
  for (std::size_t i = 0; i < clusters[0].size(); ++i) {
    Box3 anchor = unit;
    anchor.center = clusters[0].centers[i];
    ps.boxes.push_back(clamp_decode({{0, 0, 0}, {s.at(i, 0), s.at(i, 1), s.at(i, 2)}}, anchor, cfg));
  }
  return ps;
}

// ---- refinement cascade ---------------------------------------------------

/// Scene points inside each box's neighbourhood (at most box_pool_max_pts,
/// taken by even stride), in box-normalised coordinates, encoded and
/// max-pooled. Boxes with no points get a zero row.
inline Var box_pool(Tape& tape, const std::vector<Vec3>& points, const std::vector<Box3>& boxes,
                    Mlp& pool, const ModelConfig& cfg) {
  std::vector<double> rel;
  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> inside;
  for (const Box3& b : boxes) {
    inside.clear();
    Vec3 half;
    for (std::size_t i = 0; i < 3; ++i) half[i] = 0.5 * b.size[i] * cfg.box_pool_scale + cfg.box_pool_margin;
    for (std::size_t s = 0; s < points.size(); ++s) {
      const Vec3 d = points[s] - b.center;
      if (std::abs(d.x) <= half.x && std::abs(d.y) <= half.y && std::abs(d.z) <= half.z) inside.push_back(s);
    }
    const std::size_t n = inside.size(), keep = std::min(n, cfg.box_pool_max_pts);
    for (std::size_t j = 0; j < keep; ++j) {
      const Vec3 d = points[inside[j * n / keep]] - b.center;
      rel.insert(rel.end(), {2.0 * d.x / b.size.x, 2.0 * d.y / b.size.y, 2.0 * d.z / b.size.z});
    }
    offsets.push_back(offsets.back() + keep);
  }
  if (offsets.back() == 0)
    return tape.constant(Tensor::matrix(boxes.size(), pool.back().out_dim()));
  Var x = tape.constant(Tensor({offsets.back(), 3}, std::move(rel)));
  return tape.segment_max_pool(tape.mlp(x, pool), offsets);
}

inline Var log_extents(Tape& tape, const std::vector<Box3>& boxes) {
  std::vector<double> v;
  for (const auto& b : boxes) v.insert(v.end(), {std::log(b.size.x), std::log(b.size.y), std::log(b.size.z)});
  return tape.constant(Tensor({boxes.size(), 3}, std::move(v)));
}

/// Column layout of a stage head's output.
struct HeadLayout {
  std::size_t num_classes;
  std::size_t objectness() const { return 0; }
  std::size_t class_begin() const { return 1; }
  std::size_t residual_begin() const { return 1 + num_classes; }
  std::size_t width() const { return 7 + num_classes; }
};

inline BoxResidual residual_row(const Tensor& out, std::size_t r, const HeadLayout& L) {
  const std::size_t b = L.residual_begin();
  return {{out.at(r, b), out.at(r, b + 1), out.at(r, b + 2)},
          {out.at(r, b + 3), out.at(r, b + 4), out.at(r, b + 5)}};
}

struct StageResult {
  Var output;                // N x (1 + C + 6)
  std::vector<Box3> refined;
};

/// One classification + regression stage applied to `boxes`.
inline StageResult run_stage(Tape& tape, const std::vector<Vec3>& points, Var features,
                             const std::vector<Box3>& boxes, StageParams& stage,
                             const ModelConfig& cfg) {
  Var pooled = box_pool(tape, points, boxes, stage.pool, cfg);
  Var in = tape.concat_cols({features, pooled, log_extents(tape, boxes)});
  StageResult r;
  r.output = tape.mlp(in, stage.head);
  const Tensor& out = tape.value(r.output);
  const HeadLayout L{cfg.num_classes};
  for (std::size_t i = 0; i < boxes.size(); ++i)
    r.refined.push_back(clamp_decode(residual_row(out, i, L), boxes[i], cfg));
  return r;
}

struct CascadeResult {
  std::vector<std::vector<Box3>> boxes;  // stages + 1 entries; [0] are the inputs
  std::vector<Var> outputs;              // one per stage
};

/// Stage t reads boxes[t] and writes boxes[t+1]. Frozen boxes, when given,
/// replace the computed ones so a replay sees identical stage inputs.
inline CascadeResult refine_cascade(Tape& tape, const std::vector<Vec3>& points, Var features,
                                    const std::vector<Box3>& initial, std::vector<StageParams>& stages,
                                    const ModelConfig& cfg,
                                    const std::vector<std::vector<Box3>>* frozen = nullptr) {
  if (stages.size() != cfg.cascade.stages())
    throw ConfigError("model has " + std::to_string(stages.size()) + " refinement stages but the cascade lists " +
                      std::to_string(cfg.cascade.stages()) + " thresholds");
  CascadeResult res;
  res.boxes.push_back(initial);
  for (std::size_t t = 0; t < stages.size(); ++t) {
    StageResult sr = run_stage(tape, points, features, res.boxes.back(), stages[t], cfg);
    res.outputs.push_back(sr.output);
    res.boxes.push_back(frozen ? (*frozen)[t + 1] : std::move(sr.refined));
  }
  return res;
}

/// Single-stage head: the non-cascaded refinement baseline.
inline StageResult baseline_refine(Tape& tape, const std::vector<Vec3>& points, Var features,
                                   const std::vector<Box3>& boxes, StageParams& stage,
                                   const ModelConfig& cfg) {
  return run_stage(tape, points, features, boxes, stage, cfg);
}

inline double sigmoid(double z) {
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

/// Final boxes with sigmoid objectness and argmax class, before NMS.
inline std::vector<Detection> raw_detections(const Tensor& final_output, const std::vector<Box3>& boxes,
                                             std::size_t num_classes) {
  const HeadLayout L{num_classes};
  std::vector<Detection> out;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    Detection d;
    d.box = boxes[i];
    d.objectness = sigmoid(final_output.at(i, L.objectness()));
    std::size_t best = 0;
    for (std::size_t c = 1; c < num_classes; ++c)
      if (final_output.at(i, L.class_begin() + c) > final_output.at(i, L.class_begin() + best)) best = c;
    d.class_id = best;
    out.push_back(d);
  }
  return out;
}

// ---- full forward pass ----------------------------------------------------

struct ForwardPass {
  Trace trace;
  std::vector<Vec3> seeds;
  Var seed_features;
  std::array<Var, kNumPrimitiveKinds> primitive_features;
  std::array<Var, kNumPrimitiveKinds> votes;
  std::array<Var, kNumPrimitiveKinds> cluster_features;
  ProposalSet proposals;
  CascadeResult cascade;
};

inline ForwardPass forward(Tape& tape, const std::vector<Vec3>& points, ModelParams& params,
                           const ModelConfig& cfg, const Trace* frozen = nullptr) {
  ForwardPass fp;
  SeedEncoding enc = encode_seeds(tape, points, params.encoder, cfg, frozen ? &frozen->seed_indices : nullptr);
  fp.trace.seed_indices = enc.indices;
  fp.seeds = enc.positions;
  fp.seed_features = enc.features;

  // Votes regress from the local seed features; the vote sets carry those
  // features forward and the geometric context acts on them afterwards.
  for (std::size_t k = 0; k < kNumPrimitiveKinds; ++k)
    fp.votes[k] = vote_positions(tape, fp.seeds, enc.features, params.vote[k]);

  ContextState st;
  st.seed_features = enc.features;
  st.primitive_features.fill(enc.features);
  apply_primitive_context(tape, st, params.context, cfg.context);
  fp.primitive_features = st.primitive_features;

  for (std::size_t k = 0; k < kNumPrimitiveKinds; ++k) {
    fp.trace.clusters[k] = frozen ? frozen->clusters[k]
                                  : cluster_votes(rows_to_points(tape.value(fp.votes[k])), cfg.num_clusters,
                                                  cfg.cluster_radius, cfg.cluster_max_pts);
    // PCM reads the raw vote features; the geometric-context output reaches
    // the proposals through a per-cluster max-pool next to K_h.
    st.clusters[k] = cluster_inputs(tape, fp.trace.clusters[k], fp.votes[k], enc.features, cfg.cluster_radius);
  }
  apply_cluster_context(tape, st, params.context, cfg.context);
  fp.cluster_features = st.cluster_features;

  std::array<Var, kNumPrimitiveKinds> proposal_inputs;
  for (std::size_t k = 0; k < kNumPrimitiveKinds; ++k)
    proposal_inputs[k] = tape.concat_cols(
        {fp.cluster_features[k], cluster_max_pool(tape, fp.trace.clusters[k], fp.primitive_features[k])});
  fp.proposals = propose(tape, fp.trace.clusters, proposal_inputs, params.size_head, cfg,
                         frozen ? &frozen->boxes[0] : nullptr);
  fp.cascade = refine_cascade(tape, points, fp.proposals.features, fp.proposals.boxes, params.stages, cfg,
                              frozen ? &frozen->boxes : nullptr);
  fp.trace.boxes = fp.cascade.boxes;
  return fp;
}

/// Proposal records (box, features, latest logits) after the final stage.
inline std::vector<Proposal> proposal_records(const Tape& tape, const ForwardPass& fp, const ModelConfig& cfg) {
  const Tensor& f = tape.value(fp.proposals.features);
  const Tensor& out = tape.value(fp.cascade.outputs.back());
  const HeadLayout L{cfg.num_classes};
  std::vector<Proposal> props;
  for (std::size_t i = 0; i < fp.proposals.boxes.size(); ++i) {
    Proposal p;
    p.box = fp.proposals.boxes[i];
    p.features.assign(f.row(i).begin(), f.row(i).end());
    p.objectness_logit = out.at(i, L.objectness());
    for (std::size_t c = 0; c < cfg.num_classes; ++c) p.class_logits.push_back(out.at(i, L.class_begin() + c));
    props.push_back(std::move(p));
  }
  return props;
}

struct SceneDetections {
  std::vector<Detection> detections;  // after NMS
  std::vector<std::size_t> kept;      // proposal index of each detection
  std::vector<std::vector<Box3>> stage_boxes;
};

inline SceneDetections detect_scene(const std::vector<Vec3>& points, ModelParams& params,
                                    const ModelConfig& cfg) {
  Tape tape;
  ForwardPass fp = forward(tape, points, params, cfg);
  SceneDetections sd;
  sd.stage_boxes = fp.cascade.boxes;
  const auto raw = raw_detections(tape.value(fp.cascade.outputs.back()), fp.cascade.boxes.back(), cfg.num_classes);
  sd.kept = nms_indices(raw, cfg.nms_iou);
  for (std::size_t i : sd.kept) sd.detections.push_back(raw[i]);
  return sd;
}

// ---- training targets -----------------------------------------------------

struct TargetAssignment {
  std::vector<char> positive;
  std::vector<std::size_t> gt_index;  // valid where positive
  std::vector<double> max_iou;
};

/// Proposal i is positive iff its best IoU with any ground truth reaches u;
/// the best ground truth (lowest index on ties) supplies class and residual.
inline TargetAssignment assign_targets(const std::vector<Box3>& boxes, const std::vector<GroundTruth>& gt,
                                       double u) {
  if (!(u > 0.0 && u < 1.0)) throw ConfigError("assign_targets: threshold must lie in (0,1)");
  TargetAssignment a;
  a.positive.assign(boxes.size(), 0);
  a.gt_index.assign(boxes.size(), 0);
  a.max_iou.assign(boxes.size(), 0.0);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double iou = iou3d(boxes[i], gt[g].box);
      if (iou > a.max_iou[i]) {
        a.max_iou[i] = iou;
        a.gt_index[i] = g;
      }
    }
    a.positive[i] = !gt.empty() && a.max_iou[i] >= u;
  }
  return a;
}

/// Index of the first ground-truth box containing p (with margin), if any.
inline std::optional<std::size_t> containing_box(const std::vector<GroundTruth>& gt, Vec3 p, double margin) {
  for (std::size_t g = 0; g < gt.size(); ++g)
    if (gt[g].box.contains(p, margin)) return g;
  return std::nullopt;
}

/// Regression target of one seed for one primitive kind: the owning object's
/// center, nearest face center or nearest edge center.
inline Vec3 primitive_target(const Box3& box, Vec3 seed, PrimitiveKind kind) {
  auto nearest = [&](const auto& pts) {
    Vec3 best = pts[0];
    for (const auto& q : pts)
      if (squared_distance(q, seed) < squared_distance(best, seed)) best = q;
    return best;
  };
  switch (kind) {
    case PrimitiveKind::center: return box.center;
    case PrimitiveKind::face: return nearest(face_centers(box));
    case PrimitiveKind::edge: return nearest(edge_centers(box));
  }
  return box.center;
}

inline constexpr double kSeedOwnershipMargin = 0.05;

struct LossBreakdown {
  double total = 0.0;
  double vote = 0.0;
  double size = 0.0;
  std::vector<double> objectness;
  std::vector<double> classification;
  std::vector<double> residual;
};

/// Summed training loss of one scene. Vote and size terms regress toward
/// ground-truth primitives; each stage adds objectness BCE over all
/// proposals plus class CE and residual smooth-L1 over its positives.
inline Var scene_loss(Tape& tape, const ForwardPass& fp, const Scene& scene, const ModelConfig& cfg,
                      const TrainConfig& tc, LossBreakdown* breakdown = nullptr) {
  std::vector<Var> terms;
  std::vector<double> weights;
  LossBreakdown lb;
  const double beta = tc.smooth_l1_beta;

  // votes
  std::vector<std::optional<std::size_t>> owner(fp.seeds.size());
  std::size_t owned = 0;
  for (std::size_t s = 0; s < fp.seeds.size(); ++s) {
    owner[s] = containing_box(scene.gt, fp.seeds[s], kSeedOwnershipMargin);
    owned += owner[s].has_value();
  }
  if (owned > 0) {
    for (PrimitiveKind kind : kAllPrimitiveKinds) {
      const auto k = static_cast<std::size_t>(kind);
      Tensor target = Tensor::matrix(fp.seeds.size(), 3);
      std::vector<double> w(fp.seeds.size(), 0.0);
      for (std::size_t s = 0; s < fp.seeds.size(); ++s) {
        if (!owner[s]) continue;
        const Vec3 t = primitive_target(scene.gt[*owner[s]].box, fp.seeds[s], kind);
        target.at(s, 0) = t.x;
        target.at(s, 1) = t.y;
        target.at(s, 2) = t.z;
        w[s] = 1.0 / double(owned);
      }
      Var l = tape.smooth_l1(fp.votes[k], target, w, beta);
      lb.vote += tape.value(l)[0];
      terms.push_back(l);
      weights.push_back(tc.vote_weight);
    }
  }

  // initial size
  {
    const auto& boxes = fp.cascade.boxes[0];
    Tensor target = Tensor::matrix(boxes.size(), 3);
    std::vector<double> w(boxes.size(), 0.0);
    std::size_t n = 0;
    for (std::size_t i = 0; i < boxes.size(); ++i)
      if (auto g = containing_box(scene.gt, boxes[i].center, 0.0)) {
        for (std::size_t a = 0; a < 3; ++a) target.at(i, a) = std::log(scene.gt[*g].box.size[a] / cfg.anchor_size);
        w[i] = 1.0;
        ++n;
      }
    if (n > 0) {
      for (double& v : w) v /= double(n);
      Var l = tape.smooth_l1(fp.proposals.size_out, target, w, beta);
      lb.size = tape.value(l)[0];
      terms.push_back(l);
      weights.push_back(tc.size_weight);
    }
  }

  // cascade stages
  const HeadLayout L{cfg.num_classes};
  for (std::size_t t = 0; t < fp.cascade.outputs.size(); ++t) {
    const auto& boxes = fp.cascade.boxes[t];
    const std::size_t n = boxes.size();
    TargetAssignment a = assign_targets(boxes, scene.gt, cfg.cascade.thresholds[t]);
    Var out = fp.cascade.outputs[t];
    std::vector<double> obj_t(n), obj_w(n, 1.0 / double(n));
    std::size_t npos = 0;
    for (std::size_t i = 0; i < n; ++i) {
      obj_t[i] = a.positive[i] ? 1.0 : 0.0;
      npos += a.positive[i];
    }
    Var obj = tape.bce_with_logits(tape.slice_cols(out, 0, 1), obj_t, obj_w);
    terms.push_back(obj);
    weights.push_back(tc.objectness_weight);
    lb.objectness.push_back(tape.value(obj)[0]);
    double cls_v = 0.0, res_v = 0.0;
    if (npos > 0) {
      std::vector<std::size_t> labels(n, 0);
      std::vector<double> w(n, 0.0);
      Tensor res_target = Tensor::matrix(n, 6);
      for (std::size_t i = 0; i < n; ++i) {
        if (!a.positive[i]) continue;
        const auto& g = scene.gt[a.gt_index[i]];
        labels[i] = g.class_id;
        w[i] = 1.0 / double(npos);
        const BoxResidual r = encode_residual(g.box, boxes[i]);
        for (std::size_t j = 0; j < 3; ++j) {
          res_target.at(i, j) = r.d_center[j];
          res_target.at(i, 3 + j) = r.d_size[j];
        }
      }
      Var cls = tape.softmax_cross_entropy(tape.slice_cols(out, L.class_begin(), L.residual_begin()), labels, w);
      Var res = tape.smooth_l1(tape.slice_cols(out, L.residual_begin(), L.width()), res_target, w, beta);
      terms.push_back(cls);
      weights.push_back(tc.class_weight);
      terms.push_back(res);
      weights.push_back(tc.residual_weight);
      cls_v = tape.value(cls)[0];
      res_v = tape.value(res)[0];
    }
    lb.classification.push_back(cls_v);
    lb.residual.push_back(res_v);
  }

  Var total = tape.weighted_sum(terms, weights);
  lb.total = tape.value(total)[0];
  if (breakdown) *breakdown = lb;
  return total;
}

}  // namespace ctxdet
