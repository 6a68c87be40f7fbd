#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <random>
#include <set>

#include "ctxdet/geometry.hpp"

using namespace ctxdet;

namespace {

Box3 box(Vec3 c, Vec3 s) { return {c, s}; }

Box3 random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> c(-1.0, 1.0), s(0.2, 2.0);
  return {{c(rng), c(rng), c(rng)}, {s(rng), s(rng), s(rng)}};
}

// Overlap of two intervals written independently of the library.
double overlap(double a0, double a1, double b0, double b1) { return std::max(0.0, std::min(a1, b1) - std::max(a0, b0)); }

std::set<std::array<double, 3>> as_set(const auto& pts) {
  std::set<std::array<double, 3>> out;
  for (const Vec3& p : pts) out.insert({p.x, p.y, p.z});
  return out;
}

}  // namespace

TEST(Box, ValidityRequiresPositiveFiniteSize) {
  EXPECT_TRUE(box({0, 0, 0}, {1, 1, 1}).valid());
  EXPECT_FALSE(box({0, 0, 0}, {1, -1, 1}).valid());
  EXPECT_FALSE(box({0, 0, 0}, {1, 0, 1}).valid());
  EXPECT_FALSE(box({NAN, 0, 0}, {1, 1, 1}).valid());
  EXPECT_THROW(box({0, 0, 0}, {1, 1, -2}).validate(), GeometryError);
}

TEST(FaceCenters, UnitCubeIsAxisSymmetric) {
  auto f = face_centers(box({0, 0, 0}, {2, 2, 2}));
  EXPECT_EQ(as_set(f), as_set(std::vector<Vec3>{{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}}));
}

TEST(FaceCenters, TranslateWithTheBox) {
  auto a = face_centers(box({0, 0, 0}, {2, 2, 2}));
  auto b = face_centers(box({1, 2, 3}, {2, 2, 2}));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(b[i], (a[i] + Vec3{1, 2, 3}));
}

TEST(FaceCenters, PlusXFaceOfElongatedBox) {
  auto f = face_centers(box({0, 0, 0}, {4, 2, 6}));
  EXPECT_EQ(f[0], (Vec3{2, 0, 0}));
}

TEST(EdgeCenters, UnitCubeHasTwoUnitCoordinates) {
  auto e = edge_centers(box({0, 0, 0}, {2, 2, 2}));
  EXPECT_EQ(as_set(e).size(), 12u);
  for (const Vec3& p : e) {
    int unit = 0, zero = 0;
    for (std::size_t i = 0; i < 3; ++i) {
      if (std::abs(p[i]) == 1.0) ++unit;
      if (p[i] == 0.0) ++zero;
    }
    EXPECT_EQ(unit, 2);
    EXPECT_EQ(zero, 1);
  }
}

TEST(EdgeCenters, MatchCornerPairAverages) {
  const Box3 b = box({0.5, -1, 2}, {2, 4, 6});
  std::vector<Vec3> corners;
  for (int m = 0; m < 8; ++m)
    corners.push_back({b.center.x + ((m & 1) ? 0.5 : -0.5) * b.size.x, b.center.y + ((m & 2) ? 0.5 : -0.5) * b.size.y,
                       b.center.z + ((m & 4) ? 0.5 : -0.5) * b.size.z});
  std::vector<Vec3> mids;
  for (int i = 0; i < 8; ++i)
    for (int j = i + 1; j < 8; ++j)
      if (std::popcount(unsigned(i ^ j)) == 1) mids.push_back((corners[i] + corners[j]) * 0.5);
  ASSERT_EQ(mids.size(), 12u);
  EXPECT_EQ(as_set(edge_centers(b)), as_set(mids));
}

TEST(Iou, IdenticalBoxesGiveOne) {
  const Box3 b = box({0.3, 0.1, -2}, {1, 2, 3});
  EXPECT_EQ(iou3d(b, b), 1.0);
}

TEST(Iou, HalfShiftedCubesGiveOneThird) {
  // Overlap 1*2*2 = 4, union 8 + 8 - 4 = 12.
  EXPECT_NEAR(iou3d(box({0, 0, 0}, {2, 2, 2}), box({1, 0, 0}, {2, 2, 2})), 1.0 / 3.0, 1e-12);
}

TEST(Iou, DisjointBoxesGiveZero) { EXPECT_EQ(iou3d(box({0, 0, 0}, {1, 1, 1}), box({10, 0, 0}, {1, 1, 1})), 0.0); }

TEST(Iou, TouchingFacesGiveZero) { EXPECT_EQ(iou3d(box({0, 0, 0}, {1, 1, 1}), box({1, 0, 0}, {1, 1, 1})), 0.0); }

TEST(Iou, SymmetricBoundedAndMatchesIntervalOracle) {
  std::mt19937_64 rng(12);
  for (int i = 0; i < 2000; ++i) {
    const Box3 a = random_box(rng), b = random_box(rng);
    const double ab = iou3d(a, b);
    EXPECT_EQ(ab, iou3d(b, a));
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 1.0);
    double inter = 1.0;
    for (std::size_t k = 0; k < 3; ++k)
      inter *= overlap(a.center[k] - a.size[k] / 2, a.center[k] + a.size[k] / 2, b.center[k] - b.size[k] / 2,
                       b.center[k] + b.size[k] / 2);
    const double va = a.size.x * a.size.y * a.size.z, vb = b.size.x * b.size.y * b.size.z;
    EXPECT_NEAR(ab, inter / (va + vb - inter), 1e-12);
  }
}

TEST(Iou, ContainedBoxGivesVolumeRatio) {
  EXPECT_NEAR(iou3d(box({0, 0, 0}, {4, 4, 4}), box({0.5, 0.5, 0.5}, {2, 2, 2})), 8.0 / 64.0, 1e-15);
}

TEST(Nms, SingleDetectionSurvives) {
  std::vector<Detection> d{{box({0, 0, 0}, {1, 1, 1}), 2, 0.4}};
  EXPECT_EQ(nms(d, 0.25), d);
}

TEST(Nms, SameClassDuplicateIsSuppressed) {
  std::vector<Detection> d{{box({0, 0, 0}, {1, 1, 1}), 0, 0.8}, {box({0, 0, 0}, {1, 1, 1}), 0, 0.9}};
  auto kept = nms(d, 0.5);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].objectness, 0.9);
  EXPECT_EQ(nms_indices(d, 0.5), (std::vector<std::size_t>{1}));
}

TEST(Nms, DifferentClassesDoNotSuppress) {
  std::vector<Detection> d{{box({0, 0, 0}, {1, 1, 1}), 0, 0.9}, {box({0, 0, 0}, {1, 1, 1}), 1, 0.8}};
  EXPECT_EQ(nms(d, 0.5).size(), 2u);
}

TEST(Nms, EqualScoresKeepInputOrder) {
  std::vector<Detection> d{{box({5, 0, 0}, {1, 1, 1}), 0, 0.5}, {box({0, 0, 0}, {1, 1, 1}), 0, 0.5}};
  EXPECT_EQ(nms_indices(d, 0.25), (std::vector<std::size_t>{0, 1}));
}

TEST(Nms, KeptSetHasNoSameClassOverlapAboveThreshold) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Detection> d;
    for (int i = 0; i < 30; ++i) d.push_back({random_box(rng), std::size_t(i % 3), u(rng)});
    auto kept = nms(d, 0.25);
    for (std::size_t i = 0; i < kept.size(); ++i) {
      if (i) {
        EXPECT_GE(kept[i - 1].objectness, kept[i].objectness);
      }
      for (std::size_t j = i + 1; j < kept.size(); ++j)
        if (kept[i].class_id == kept[j].class_id) {
          EXPECT_LT(iou3d(kept[i].box, kept[j].box), 0.25);
        }
    }
  }
  EXPECT_THROW(nms({}, 0.0), GeometryError);
}

TEST(Residual, EqualBoxesEncodeToZero) {
  const Box3 b = box({1, 2, 3}, {0.5, 1, 2});
  EXPECT_EQ(encode_residual(b, b), (BoxResidual{{0, 0, 0}, {0, 0, 0}}));
}

TEST(Residual, DoubledSizeIsLogTwo) {
  auto r = encode_residual(box({0, 0, 0}, {4, 4, 4}), box({0, 0, 0}, {2, 2, 2}));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(r.d_size[i], std::log(2.0));
}

TEST(Residual, DecodeInvertsEncode) {
  std::mt19937_64 rng(17);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Box3 gt = random_box(rng), anchor = random_box(rng);
    const Box3 back = decode_residual(encode_residual(gt, anchor), anchor);
    for (std::size_t k = 0; k < 3; ++k)
      worst = std::max({worst, std::abs(back.center[k] - gt.center[k]), std::abs(back.size[k] - gt.size[k])});
  }
  EXPECT_LT(worst, 1e-9);
}

TEST(Detection, ValidationChecksScoreAndClass) {
  Detection d{box({0, 0, 0}, {1, 1, 1}), 1, 0.5};
  EXPECT_NO_THROW(validate_detection(d, 2));
  d.objectness = 1.5;
  EXPECT_THROW(validate_detection(d, 2), GeometryError);
  d.objectness = 0.5;
  EXPECT_THROW(validate_detection(d, 1), GeometryError);
}
