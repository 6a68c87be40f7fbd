#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>

#include "ctxdet/sampling.hpp"

using namespace ctxdet;

namespace {

std::vector<Vec3> random_points(std::size_t n, std::mt19937_64& rng, double extent = 3.0) {
  std::uniform_real_distribution<double> u(-extent, extent);
  std::vector<Vec3> p(n);
  for (auto& v : p) v = {u(rng), u(rng), u(rng)};
  return p;
}

// Independent O(nk) reimplementation of greedy max-min selection.
std::vector<std::size_t> fps_oracle(const std::vector<Vec3>& pts, std::size_t k) {
  std::vector<std::size_t> picked{0};
  while (picked.size() < k) {
    std::size_t best = 0;
    double best_d = -1;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (std::find(picked.begin(), picked.end(), i) != picked.end()) continue;
      double d = 1e300;
      for (std::size_t j : picked) d = std::min(d, squared_distance(pts[i], pts[j]));
      if (d > best_d) {
        best_d = d;
        best = i;
      }
    }
    picked.push_back(best);
  }
  return picked;
}

Mlp constant_head(std::size_t d, Vec3 bias) {
  Mlp m = make_mlp({d, 3});
  m[0].bias = Tensor::vector({bias.x, bias.y, bias.z});
  return m;
}

}  // namespace

TEST(Fps, KEqualsNReturnsAPermutationStartingAtZero) {
  std::mt19937_64 rng(1);
  auto pts = random_points(20, rng);
  auto idx = farthest_point_sample(pts, 20);
  EXPECT_EQ(idx.front(), 0u);
  std::set<std::size_t> s(idx.begin(), idx.end());
  EXPECT_EQ(s.size(), 20u);
}

TEST(Fps, PicksTheFarthestPointSecond) {
  std::vector<Vec3> pts{{0, 0, 0}, {10, 0, 0}, {5, 0, 0}};
  EXPECT_EQ(farthest_point_sample(pts, 2), (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(farthest_point_sample(pts, 1), (std::vector<std::size_t>{0}));
}

TEST(Fps, MatchesBruteForceGreedy) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    auto pts = random_points(60, rng);
    EXPECT_EQ(farthest_point_sample(pts, 15), fps_oracle(pts, 15));
  }
}

TEST(Fps, InvalidKIsRejected) {
  std::vector<Vec3> pts(3);
  EXPECT_THROW(farthest_point_sample(pts, 0), ArgumentError);
  EXPECT_THROW(farthest_point_sample(pts, 4), ArgumentError);
}

TEST(Fps, MinimumSpacingNeverIncreasesAlongTheSequence) {
  std::mt19937_64 rng(3);
  auto pts = random_points(200, rng);
  auto idx = farthest_point_sample(pts, 40);
  double prev = 1e300;
  for (std::size_t s = 1; s < idx.size(); ++s) {
    double d = 1e300;
    for (std::size_t j = 0; j < s; ++j) d = std::min(d, squared_distance(pts[idx[s]], pts[idx[j]]));
    EXPECT_LE(d, prev);
    prev = d;
  }
}

TEST(BallQuery, HugeRadiusTakesUpToMaxPts) {
  std::mt19937_64 rng(4);
  auto pts = random_points(30, rng);
  auto g = ball_query(pts, {pts[0], pts[5]}, 100.0, 8);
  for (const auto& l : g) EXPECT_EQ(l.size(), 8u);
  EXPECT_EQ(ball_query(pts, {pts[0]}, 100.0, 64)[0].size(), 30u);
}

TEST(BallQuery, TinyRadiusOnAPointFindsOnlyThatPoint) {
  std::mt19937_64 rng(5);
  auto pts = random_points(30, rng);
  EXPECT_EQ(ball_query(pts, {pts[7]}, 1e-9, 4)[0], (std::vector<std::size_t>{7}));
}

TEST(BallQuery, MatchesDistanceScanOnFixedScene) {
  std::vector<Vec3> pts{{0, 0, 0}, {1, 0, 0}, {0, 2, 0}, {1, 1, 1}, {-1, -1, 0}};
  std::vector<Vec3> centers{{0, 0, 0}, {1, 1, 0}};
  const double r = 1.5;
  auto got = ball_query(pts, centers, r, 16);
  for (std::size_t c = 0; c < centers.size(); ++c) {
    std::vector<std::pair<double, std::size_t>> want;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const double d = distance(pts[i], centers[c]);
      if (d <= r) want.push_back({d, i});
    }
    std::sort(want.begin(), want.end());
    std::vector<std::size_t> idx;
    for (auto& w : want) idx.push_back(w.second);
    EXPECT_EQ(got[c], idx);
  }
  // Spot check the first center by hand: (0,0,0), (1,0,0), (-1,-1,0) at 0, 1, 1.414.
  EXPECT_EQ(got[0], (std::vector<std::size_t>{0, 1, 4}));
}

TEST(BallQuery, BadArgumentsAreRejected) {
  std::vector<Vec3> pts(2);
  EXPECT_THROW(ball_query(pts, pts, 0.0, 4), ArgumentError);
  EXPECT_THROW(ball_query(pts, pts, 1.0, 0), ArgumentError);
}

TEST(Votes, ZeroHeadLeavesSeedsInPlace) {
  std::mt19937_64 rng(6);
  PointSet seeds{random_points(10, rng), Tensor::matrix(10, 4, 0.3)};
  auto v = generate_votes(seeds, constant_head(4, {0, 0, 0}), PrimitiveKind::face);
  EXPECT_EQ(v.votes, seeds.positions);
  EXPECT_EQ(v.origins, seeds.positions);
  EXPECT_EQ(v.kind, PrimitiveKind::face);
}

TEST(Votes, ConstantBiasShiftsEveryVote) {
  std::mt19937_64 rng(7);
  PointSet seeds{random_points(10, rng), Tensor::matrix(10, 4, -1.0)};
  auto v = generate_votes(seeds, constant_head(4, {1, 0, 0}), PrimitiveKind::center);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(v.votes[i], (seeds.positions[i] + Vec3{1, 0, 0}));
}

TEST(Votes, SeedsWithoutFeaturesAreAStateError) {
  PointSet seeds{{{0, 0, 0}}, std::nullopt};
  EXPECT_THROW(generate_votes(seeds, constant_head(4, {}), PrimitiveKind::edge), StateError);
}

TEST(Clusters, CoincidentVotesFormOneCluster) {
  std::vector<Vec3> votes(9, Vec3{1, 1, 1});
  auto cs = cluster_votes(votes, 1, 0.1, 16);
  ASSERT_EQ(cs.size(), 1u);
  EXPECT_EQ(cs.members[0].size(), 9u);
  EXPECT_EQ(cs.members[0].front(), cs.center_votes[0]);
}

TEST(Clusters, SeparatedBlobsStayApart) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 0.05);
  std::vector<Vec3> votes;
  for (int i = 0; i < 20; ++i) votes.push_back({n(rng), n(rng), n(rng)});
  for (int i = 0; i < 20; ++i) votes.push_back({5 + n(rng), n(rng), n(rng)});
  auto cs = cluster_votes(votes, 2, 0.5, 64);
  ASSERT_EQ(cs.size(), 2u);
  for (std::size_t c = 0; c < 2; ++c) {
    const bool left = cs.centers[c].x < 2.5;
    EXPECT_EQ(cs.members[c].size(), 20u);
    for (std::size_t m : cs.members[c]) EXPECT_EQ(m < 20, left);
  }
}

TEST(Clusters, OneClusterPerVoteWithTinyRadiusIsSingletons) {
  std::mt19937_64 rng(9);
  auto votes = random_points(12, rng);
  auto cs = cluster_votes(votes, 12, 1e-9, 8);
  for (std::size_t c = 0; c < 12; ++c) EXPECT_EQ(cs.members[c], (std::vector<std::size_t>{cs.center_votes[c]}));
}

TEST(Clusters, MoreClustersThanVotesIsRejected) {
  std::vector<Vec3> votes(3);
  EXPECT_THROW(cluster_votes(votes, 4, 1.0), ArgumentError);
}
