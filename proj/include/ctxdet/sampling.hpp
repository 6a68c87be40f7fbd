#pragma once

// Point-set machinery: farthest-point sampling, ball-query neighbourhoods,
// vote generation and vote clustering.

#include <algorithm>
#include <cstddef>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ctxdet/geometry.hpp"
#include "ctxdet/tensor.hpp"

namespace ctxdet {

class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class PrimitiveKind { center = 0, face = 1, edge = 2 };
inline constexpr std::size_t kNumPrimitiveKinds = 3;
inline constexpr PrimitiveKind kAllPrimitiveKinds[] = {PrimitiveKind::center, PrimitiveKind::face,
                                                       PrimitiveKind::edge};

inline const char* kind_name(PrimitiveKind k) {
  switch (k) {
    case PrimitiveKind::center: return "center";
    case PrimitiveKind::face: return "face";
    case PrimitiveKind::edge: return "edge";
  }
  return "?";
}

struct PointSet {
  std::vector<Vec3> positions;
  std::optional<Tensor> features;  // n x D when present

  std::size_t size() const { return positions.size(); }

  void validate() const {
    if (positions.empty()) throw ArgumentError("point set is empty");
    for (const auto& p : positions)
      if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z))
        throw ArgumentError("point set contains a non-finite position");
    if (features && features->rows() != positions.size())
      throw DimensionError("point set has " + std::to_string(positions.size()) +
                           " positions but " + std::to_string(features->rows()) + " feature rows");
  }
};

struct VoteSet {
  std::vector<Vec3> origins;
  std::vector<Vec3> votes;
  Tensor features;  // m x D
  PrimitiveKind kind = PrimitiveKind::center;

  std::size_t size() const { return votes.size(); }
};

struct ClusterSet {
  std::vector<Vec3> centers;
  std::vector<std::size_t> center_votes;             // vote index each center came from
  std::vector<std::vector<std::size_t>> members;     // vote indices, center vote first
  std::optional<Tensor> features;                    // N x D' once built downstream

  std::size_t size() const { return centers.size(); }
};

/// Greedy max-min subset starting from index 0, in selection order.
/// Ties in the max-min distance go to the lowest index.
inline std::vector<std::size_t> farthest_point_sample(const std::vector<Vec3>& pts, std::size_t k) {
  const std::size_t n = pts.size();
  if (k < 1 || k > n)
    throw ArgumentError("farthest_point_sample: k=" + std::to_string(k) + " must lie in [1, " +
                        std::to_string(n) + "]");
  std::vector<std::size_t> picked;
  picked.reserve(k);
  std::vector<double> min_d(n, std::numeric_limits<double>::infinity());
  std::vector<char> taken(n, 0);
  std::size_t cur = 0;
  for (std::size_t s = 0; s < k; ++s) {
    picked.push_back(cur);
    taken[cur] = 1;
    if (s + 1 == k) break;
    std::size_t best = n;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      const double d = squared_distance(pts[i], pts[cur]);
      if (d < min_d[i]) min_d[i] = d;
      if (min_d[i] > best_d) {
        best_d = min_d[i];
        best = i;
      }
    }
    cur = best;
  }
  return picked;
}

inline std::vector<std::size_t> farthest_point_sample(const PointSet& p, std::size_t k) {
  return farthest_point_sample(p.positions, k);
}

/// For each center, up to max_pts indices within radius, nearest first, ties by index.
inline std::vector<std::vector<std::size_t>> ball_query(const std::vector<Vec3>& pts,
                                                        const std::vector<Vec3>& centers,
                                                        double radius, std::size_t max_pts) {
  if (!(radius > 0.0)) throw ArgumentError("ball_query: radius must be positive");
  if (max_pts < 1) throw ArgumentError("ball_query: max_pts must be at least 1");
  const double r2 = radius * radius;
  std::vector<std::vector<std::size_t>> out(centers.size());
  std::vector<std::pair<double, std::size_t>> cand;
  for (std::size_t c = 0; c < centers.size(); ++c) {
    cand.clear();
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const double d = squared_distance(pts[i], centers[c]);
      if (d <= r2) cand.emplace_back(d, i);
    }
    const std::size_t keep = std::min(max_pts, cand.size());
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(keep), cand.end());
    out[c].reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) out[c].push_back(cand[i].second);
  }
  return out;
}

inline std::vector<std::vector<std::size_t>> ball_query(const PointSet& p,
                                                        const std::vector<Vec3>& centers,
                                                        double radius, std::size_t max_pts) {
  return ball_query(p.positions, centers, radius, max_pts);
}

/// Offsets come from the first three output channels of `head`; features pass through.
inline VoteSet generate_votes(const PointSet& seeds, const Mlp& head, PrimitiveKind kind) {
  if (!seeds.features) throw StateError("generate_votes: seeds carry no features");
  seeds.validate();
  const Tensor offsets = mlp_forward(*seeds.features, head);
  if (offsets.cols() < 3) throw ConfigError("generate_votes: vote head must emit 3 offset channels");
  VoteSet v;
  v.kind = kind;
  v.origins = seeds.positions;
  v.votes.resize(seeds.size());
  for (std::size_t i = 0; i < seeds.size(); ++i)
    v.votes[i] = seeds.positions[i] + Vec3{offsets.at(i, 0), offsets.at(i, 1), offsets.at(i, 2)};
  v.features = *seeds.features;
  return v;
}

/// Cluster centers are farthest-point samples of the vote positions; members
/// are the ball-query neighbourhood of each center. The center vote itself is
/// always the first member even when coincident votes would crowd it out.
inline ClusterSet cluster_votes(const std::vector<Vec3>& votes, std::size_t n_clusters,
                                double radius, std::size_t max_pts = 16) {
  if (n_clusters > votes.size())
    throw ArgumentError("cluster_votes: " + std::to_string(n_clusters) + " clusters requested from " +
                        std::to_string(votes.size()) + " votes");
  ClusterSet cs;
  cs.center_votes = farthest_point_sample(votes, n_clusters);
  for (std::size_t idx : cs.center_votes) cs.centers.push_back(votes[idx]);
  auto groups = ball_query(votes, cs.centers, radius, max_pts);
  cs.members.resize(n_clusters);
  for (std::size_t c = 0; c < n_clusters; ++c) {
    auto& m = cs.members[c];
    m.push_back(cs.center_votes[c]);
    for (std::size_t idx : groups[c]) {
      if (m.size() == max_pts) break;
      if (idx != cs.center_votes[c]) m.push_back(idx);
    }
  }
  return cs;
}

inline ClusterSet cluster_votes(const VoteSet& v, std::size_t n_clusters, double radius,
                                std::size_t max_pts = 16) {
  return cluster_votes(v.votes, n_clusters, radius, max_pts);
}

}  // namespace ctxdet
