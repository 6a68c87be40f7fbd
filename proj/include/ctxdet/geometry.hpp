#pragma once

// Axis-aligned 3D boxes: primitive targets, IoU, NMS and the residual
// parameterisation used by the refinement cascade.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctxdet {

class GeometryError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  double operator[](std::size_t i) const { return i == 0 ? x : (i == 1 ? y : z); }
  double& operator[](std::size_t i) { return i == 0 ? x : (i == 1 ? y : z); }

  friend Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3 operator*(Vec3 a, double s) { return {a.x * s, a.y * s, a.z * s}; }
  friend Vec3 operator*(double s, Vec3 a) { return a * s; }
  friend bool operator==(const Vec3&, const Vec3&) = default;

  double squared_norm() const { return x * x + y * y + z * z; }
  double norm() const { return std::sqrt(squared_norm()); }
};

inline double squared_distance(Vec3 a, Vec3 b) { return (a - b).squared_norm(); }
inline double distance(Vec3 a, Vec3 b) { return (a - b).norm(); }

/// Axis-aligned box: center and full extents (w, l, h) along x, y, z.
struct Box3 {
  Vec3 center;
  Vec3 size;

  bool valid() const {
    for (std::size_t i = 0; i < 3; ++i)
      if (!std::isfinite(center[i]) || !std::isfinite(size[i]) || !(size[i] > 0.0)) return false;
    return true;
  }
  void validate() const {
    if (!valid()) throw GeometryError("box must have finite coordinates and positive size");
  }

  double volume() const { return size.x * size.y * size.z; }
  double min(std::size_t axis) const { return center[axis] - 0.5 * size[axis]; }
  double max(std::size_t axis) const { return center[axis] + 0.5 * size[axis]; }

  bool contains(Vec3 p, double margin = 0.0) const {
    for (std::size_t i = 0; i < 3; ++i)
      if (p[i] < min(i) - margin || p[i] > max(i) + margin) return false;
    return true;
  }

  friend bool operator==(const Box3&, const Box3&) = default;
};

struct BoxResidual {
  Vec3 d_center;  // offset divided by anchor size, per axis
  Vec3 d_size;    // ln(size / anchor size), per axis

  friend bool operator==(const BoxResidual&, const BoxResidual&) = default;
};

struct Detection {
  Box3 box;
  std::size_t class_id = 0;
  double objectness = 0.0;

  friend bool operator==(const Detection&, const Detection&) = default;
};

inline void validate_detection(const Detection& d, std::size_t num_classes) {
  d.box.validate();
  if (!(d.objectness >= 0.0 && d.objectness <= 1.0))
    throw GeometryError("objectness must lie in [0,1], got " + std::to_string(d.objectness));
  if (d.class_id >= num_classes)
    throw GeometryError("class id " + std::to_string(d.class_id) + " outside [0," +
                        std::to_string(num_classes) + ")");
}

/// Face centroids in the order +x, -x, +y, -y, +z, -z.
inline std::array<Vec3, 6> face_centers(const Box3& b) {
  const Vec3 c = b.center, h = b.size * 0.5;
  return {{{c.x + h.x, c.y, c.z},
           {c.x - h.x, c.y, c.z},
           {c.x, c.y + h.y, c.z},
           {c.x, c.y - h.y, c.z},
           {c.x, c.y, c.z + h.z},
           {c.x, c.y, c.z - h.z}}};
}

/// Edge midpoints. Edges parallel to x come first, then y, then z; within
/// each group the two remaining half-extent signs run (-,-), (+,-), (-,+), (+,+).
inline std::array<Vec3, 12> edge_centers(const Box3& b) {
  const Vec3 c = b.center, h = b.size * 0.5;
  std::array<Vec3, 12> out{};
  constexpr double s[4][2] = {{-1, -1}, {1, -1}, {-1, 1}, {1, 1}};
  for (int k = 0; k < 4; ++k) {
    out[k] = {c.x, c.y + s[k][0] * h.y, c.z + s[k][1] * h.z};
    out[4 + k] = {c.x + s[k][0] * h.x, c.y, c.z + s[k][1] * h.z};
    out[8 + k] = {c.x + s[k][0] * h.x, c.y + s[k][1] * h.y, c.z};
  }
  return out;
}

inline double intersection_volume(const Box3& a, const Box3& b) {
  double vol = 1.0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double lo = std::max(a.min(i), b.min(i));
    const double hi = std::min(a.max(i), b.max(i));
    if (hi <= lo) return 0.0;
    vol *= hi - lo;
  }
  return vol;
}

inline double iou3d(const Box3& a, const Box3& b) {
  const double inter = intersection_volume(a, b);
  if (inter <= 0.0) return 0.0;
  // Summing through min/max keeps the union independent of argument order,
  // even when the compiler fuses a multiply into the addition.
  const double va = a.volume(), vb = b.volume();
  const double uni = std::min(va, vb) + std::max(va, vb) - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

/// Greedy per-class NMS; returns indices of the kept detections in score
/// order (stable for equal scores).
inline std::vector<std::size_t> nms_indices(const std::vector<Detection>& dets, double iou_thresh) {
  if (!(iou_thresh > 0.0 && iou_thresh <= 1.0))
    throw GeometryError("nms threshold must lie in (0,1]");
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].objectness > dets[b].objectness;
  });
  std::vector<std::size_t> kept;
  for (std::size_t idx : order) {
    const Detection& d = dets[idx];
    bool suppressed = false;
    for (std::size_t k : kept)
      if (dets[k].class_id == d.class_id && iou3d(dets[k].box, d.box) >= iou_thresh) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(idx);
  }
  return kept;
}

/// Greedy per-class suppression. Output is ordered by objectness descending,
/// ties by input index.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh) {
  std::vector<Detection> kept;
  for (std::size_t i : nms_indices(dets, iou_thresh)) kept.push_back(dets[i]);
  return kept;
}

inline BoxResidual encode_residual(const Box3& gt, const Box3& anchor) {
  BoxResidual r;
  for (std::size_t i = 0; i < 3; ++i) {
    r.d_center[i] = (gt.center[i] - anchor.center[i]) / anchor.size[i];
    r.d_size[i] = std::log(gt.size[i] / anchor.size[i]);
  }
  return r;
}

inline Box3 decode_residual(const BoxResidual& r, const Box3& anchor) {
  Box3 b;
  for (std::size_t i = 0; i < 3; ++i) {
    b.center[i] = anchor.center[i] + r.d_center[i] * anchor.size[i];
    b.size[i] = anchor.size[i] * std::exp(r.d_size[i]);
  }
  return b;
}

}  // namespace ctxdet
