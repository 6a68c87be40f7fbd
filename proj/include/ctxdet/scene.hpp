#pragma once

// Synthetic indoor scenes and the plain-text scene / prediction formats.
//
// Scene file:
//   scene <id> <n_points> <n_boxes> <C>
//   x y z                      (n_points lines)
//   class cx cy cz w l h       (n_boxes lines)
//
// Prediction file, one detection per line, ordered by scene id then score:
//   scene_id class objectness cx cy cz w l h
//
// Numbers are written in shortest round-trip form, so reading a written
// file reproduces every double exactly.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

#include "ctxdet/config.hpp"
#include "ctxdet/geometry.hpp"

namespace ctxdet {

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GroundTruth {
  Box3 box;
  std::size_t class_id = 0;

  friend bool operator==(const GroundTruth&, const GroundTruth&) = default;
};

struct Scene {
  std::string id;
  std::vector<Vec3> points;
  std::vector<GroundTruth> gt;
  std::size_t num_classes = 0;

  void validate() const {
    if (id.empty() || id.find_first_of(" \t\n") != std::string::npos)
      throw ParseError("scene id must be a non-empty token");
    if (points.empty()) throw ParseError("scene '" + id + "' has no points");
    for (const auto& g : gt) {
      if (!g.box.valid()) throw ParseError("scene '" + id + "' has an invalid box");
      if (g.class_id >= num_classes) throw ParseError("scene '" + id + "' has a class id out of range");
    }
  }

  friend bool operator==(const Scene&, const Scene&) = default;
};

using PredictionMap = std::map<std::string, std::vector<Detection>>;

// ---- randomness -----------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Independent stream seed for item `index` of a run seeded with `seed`.
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t index) {
  return splitmix64(seed ^ splitmix64(index));
}

// ---- synthesis ------------------------------------------------------------

inline std::string synth_scene_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%05zu", index);
  return buf;
}

namespace detail {

inline Vec3 sample_on_surface(const Box3& b, std::mt19937_64& rng) {
  const Vec3 s = b.size;
  const double areas[3] = {s.y * s.z, s.x * s.z, s.x * s.y};  // faces normal to x, y, z
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double total = 2.0 * (areas[0] + areas[1] + areas[2]);
  double pick = u(rng) * total;
  std::size_t axis = 0;
  for (; axis < 2; ++axis) {
    if (pick < 2.0 * areas[axis]) break;
    pick -= 2.0 * areas[axis];
  }
  const double side = u(rng) < 0.5 ? -0.5 : 0.5;
  Vec3 p;
  for (std::size_t i = 0; i < 3; ++i)
    p[i] = i == axis ? b.center[i] + side * s[i] : b.center[i] + (u(rng) - 0.5) * s[i];
  return p;
}

inline double surface_area(const Box3& b) {
  const Vec3 s = b.size;
  return 2.0 * (s.x * s.y + s.y * s.z + s.x * s.z);
}

}  // namespace detail

/// Scene `index` of the synthetic set. Fully determined by (cfg.seed, index).
inline Scene synth_scene(const SynthConfig& cfg, std::size_t index) {
  cfg.validate();
  std::mt19937_64 rng(stream_seed(cfg.seed, index));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t num_classes = cfg.class_priors.size();
  Scene scene;
  scene.id = synth_scene_id(index);
  scene.num_classes = num_classes;

  const std::size_t n_obj =
      cfg.min_objects + static_cast<std::size_t>(u(rng) * double(cfg.max_objects - cfg.min_objects + 1));
  const double half_room = 0.5 * cfg.room_extent;
  std::size_t attempts = 0;
  while (scene.gt.size() < std::min(n_obj, cfg.max_objects)) {
    if (++attempts > 1000)
      throw GenerationError("scene " + std::to_string(index) + ": object placement failed after 1000 attempts");
    GroundTruth g;
    g.class_id = std::min(num_classes - 1, static_cast<std::size_t>(u(rng) * double(num_classes)));
    const ClassPrior& prior = cfg.class_priors[g.class_id];
    for (std::size_t i = 0; i < 3; ++i)
      g.box.size[i] = prior.size[i] * (1.0 + prior.jitter * (2.0 * u(rng) - 1.0));
    if (cfg.allow_swap_xy && u(rng) < 0.5) std::swap(g.box.size.x, g.box.size.y);
    const double span_x = cfg.room_extent - g.box.size.x, span_y = cfg.room_extent - g.box.size.y;
    if (span_x <= 0 || span_y <= 0) continue;
    g.box.center = {-half_room + 0.5 * g.box.size.x + u(rng) * span_x,
                    -half_room + 0.5 * g.box.size.y + u(rng) * span_y, 0.5 * g.box.size.z};
    Box3 grown = g.box;
    grown.size.x += cfg.min_gap;
    grown.size.y += cfg.min_gap;
    const bool clash = std::any_of(scene.gt.begin(), scene.gt.end(), [&](const GroundTruth& o) {
      return intersection_volume(grown, o.box) > 0.0;
    });
    if (clash) continue;
    scene.gt.push_back(g);
  }

  std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
  std::size_t object_points = 0;
  for (const auto& g : scene.gt) {
    const auto n = static_cast<std::size_t>(std::lround(detail::surface_area(g.box) * cfg.points_per_surface));
    for (std::size_t i = 0; i < std::max<std::size_t>(n, 1); ++i) {
      Vec3 p = detail::sample_on_surface(g.box, rng);
      p = p + Vec3{noise(rng), noise(rng), noise(rng)};
      scene.points.push_back(p);
    }
    object_points += std::max<std::size_t>(n, 1);
  }
  const auto clutter = static_cast<std::size_t>(
      std::lround(double(object_points) * cfg.clutter_fraction / (1.0 - cfg.clutter_fraction)));
  for (std::size_t i = 0; i < clutter; ++i)
    scene.points.push_back({-half_room + u(rng) * cfg.room_extent, -half_room + u(rng) * cfg.room_extent,
                            u(rng) * 2.5});
  std::shuffle(scene.points.begin(), scene.points.end(), rng);
  if (scene.points.size() > cfg.max_points) scene.points.resize(cfg.max_points);
  return scene;
}

// ---- number formatting ----------------------------------------------------

inline std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace detail {

inline std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> out;
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

inline double parse_double(const std::string& tok, std::size_t lineno) {
  double v = 0.0;
  auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
    throw ParseError("line " + std::to_string(lineno) + ": bad number '" + tok + "'");
  return v;
}

inline std::size_t parse_index(const std::string& tok, std::size_t lineno) {
  std::size_t v = 0;
  auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
    throw ParseError("line " + std::to_string(lineno) + ": bad integer '" + tok + "'");
  return v;
}

}  // namespace detail

// ---- scene I/O ------------------------------------------------------------

inline void write_scene(std::ostream& out, const Scene& s) {
  s.validate();
  out << "scene " << s.id << ' ' << s.points.size() << ' ' << s.gt.size() << ' ' << s.num_classes << '\n';
  for (const auto& p : s.points)
    out << fmt_double(p.x) << ' ' << fmt_double(p.y) << ' ' << fmt_double(p.z) << '\n';
  for (const auto& g : s.gt)
    out << g.class_id << ' ' << fmt_double(g.box.center.x) << ' ' << fmt_double(g.box.center.y) << ' '
        << fmt_double(g.box.center.z) << ' ' << fmt_double(g.box.size.x) << ' '
        << fmt_double(g.box.size.y) << ' ' << fmt_double(g.box.size.z) << '\n';
}

inline Scene read_scene(std::istream& in) {
  std::string line;
  std::size_t lineno = 0;
  auto next = [&](const std::string& section) {
    if (!std::getline(in, line))
      throw ParseError("truncated scene file: missing " + section + " (after line " +
                       std::to_string(lineno) + ")");
    ++lineno;
    return detail::split_ws(line);
  };
  Scene s;
  auto head = next("header");
  if (head.size() != 5 || head[0] != "scene")
    throw ParseError("line 1: expected 'scene <id> <n_points> <n_boxes> <C>'");
  s.id = head[1];
  const std::size_t n_points = detail::parse_index(head[2], lineno);
  const std::size_t n_boxes = detail::parse_index(head[3], lineno);
  s.num_classes = detail::parse_index(head[4], lineno);
  if (n_points == 0) throw ParseError("line 1: a scene needs at least one point");
  s.points.reserve(n_points);
  for (std::size_t i = 0; i < n_points; ++i) {
    auto t = next("point section");
    if (t.size() != 3) throw ParseError("line " + std::to_string(lineno) + ": expected 'x y z'");
    s.points.push_back({detail::parse_double(t[0], lineno), detail::parse_double(t[1], lineno),
                        detail::parse_double(t[2], lineno)});
  }
  for (std::size_t i = 0; i < n_boxes; ++i) {
    auto t = next("box section");
    if (t.size() != 7)
      throw ParseError("line " + std::to_string(lineno) + ": expected 'class cx cy cz w l h'");
    GroundTruth g;
    g.class_id = detail::parse_index(t[0], lineno);
    g.box.center = {detail::parse_double(t[1], lineno), detail::parse_double(t[2], lineno),
                    detail::parse_double(t[3], lineno)};
    g.box.size = {detail::parse_double(t[4], lineno), detail::parse_double(t[5], lineno),
                  detail::parse_double(t[6], lineno)};
    if (!g.box.valid())
      throw ParseError("line " + std::to_string(lineno) + ": box sizes must be positive and finite");
    if (g.class_id >= s.num_classes)
      throw ParseError("line " + std::to_string(lineno) + ": class id out of range");
    s.gt.push_back(g);
  }
  return s;
}

inline void save_scene(const std::filesystem::path& path, const Scene& s) {
  std::ofstream f(path);
  if (!f) throw ParseError("cannot open '" + path.string() + "' for writing");
  write_scene(f, s);
}

inline Scene load_scene(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ParseError("cannot open '" + path.string() + "'");
  try {
    return read_scene(f);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

/// Every `*.scene` file in `dir`, in filename order.
inline std::vector<Scene> load_scene_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ParseError("'" + dir.string() + "' is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".scene") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<Scene> out;
  for (const auto& f : files) out.push_back(load_scene(f));
  return out;
}

// ---- prediction I/O -------------------------------------------------------

inline void write_predictions(std::ostream& out, const PredictionMap& preds) {
  for (const auto& [id, dets] : preds) {
    std::vector<std::size_t> order(dets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].objectness > dets[b].objectness; });
    for (std::size_t i : order) {
      const Detection& d = dets[i];
      out << id << ' ' << d.class_id << ' ' << fmt_double(d.objectness) << ' '
          << fmt_double(d.box.center.x) << ' ' << fmt_double(d.box.center.y) << ' '
          << fmt_double(d.box.center.z) << ' ' << fmt_double(d.box.size.x) << ' '
          << fmt_double(d.box.size.y) << ' ' << fmt_double(d.box.size.z) << '\n';
    }
  }
}

/// Parses a prediction file. When num_classes is non-zero, class ids are checked against it.
inline PredictionMap read_predictions(std::istream& in, std::size_t num_classes = 0) {
  PredictionMap out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto t = detail::split_ws(line);
    if (t.empty()) continue;
    if (t.size() != 9)
      throw ParseError("line " + std::to_string(lineno) +
                       ": expected 'scene_id class objectness cx cy cz w l h'");
    Detection d;
    d.class_id = detail::parse_index(t[1], lineno);
    d.objectness = detail::parse_double(t[2], lineno);
    d.box.center = {detail::parse_double(t[3], lineno), detail::parse_double(t[4], lineno),
                    detail::parse_double(t[5], lineno)};
    d.box.size = {detail::parse_double(t[6], lineno), detail::parse_double(t[7], lineno),
                  detail::parse_double(t[8], lineno)};
    if (!(d.objectness >= 0.0 && d.objectness <= 1.0))
      throw ParseError("line " + std::to_string(lineno) + ": objectness must lie in [0,1]");
    if (!d.box.valid()) throw ParseError("line " + std::to_string(lineno) + ": invalid box");
    if (num_classes && d.class_id >= num_classes)
      throw ParseError("line " + std::to_string(lineno) + ": class id out of range");
    out[t[0]].push_back(d);
  }
  return out;
}

inline void save_predictions(const std::filesystem::path& path, const PredictionMap& preds) {
  std::ofstream f(path);
  if (!f) throw ParseError("cannot open '" + path.string() + "' for writing");
  write_predictions(f, preds);
}

inline PredictionMap load_predictions(const std::filesystem::path& path, std::size_t num_classes = 0) {
  std::ifstream f(path);
  if (!f) throw ParseError("cannot open '" + path.string() + "'");
  try {
    return read_predictions(f, num_classes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

}  // namespace ctxdet
