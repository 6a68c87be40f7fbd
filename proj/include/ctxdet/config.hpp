#pragma once

// Flat key=value configuration shared by every CLI subcommand.
//
// Lines are `key = value`; `#` starts a comment. Unknown keys are rejected.
// Lists are comma separated. Every key has a default (see PipelineConfig).

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "ctxdet/context.hpp"

namespace ctxdet {

class ConfigParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CascadeConfig {
  std::vector<double> thresholds{0.5, 0.55, 0.6};

  std::size_t stages() const { return thresholds.size(); }

  void validate() const {
    if (thresholds.empty()) throw ConfigError("cascade needs at least one stage");
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
      if (!(thresholds[i] > 0.0 && thresholds[i] < 1.0))
        throw ConfigError("cascade thresholds must lie in (0,1)");
      if (i > 0 && !(thresholds[i] > thresholds[i - 1]))
        throw ConfigError("cascade thresholds must be strictly ascending");
    }
  }
};

/// Per-class size prior: nominal extents (w, l, h) and relative jitter.
struct ClassPrior {
  Vec3 size;
  double jitter = 0.15;
};

struct SynthConfig {
  std::uint64_t seed = 7;
  std::size_t min_objects = 2;
  std::size_t max_objects = 4;
  std::vector<ClassPrior> class_priors{
      {{0.6, 0.6, 0.7}, 0.15},   // nightstand-like
      {{1.4, 0.8, 0.75}, 0.15},  // table-like
      {{0.9, 0.45, 1.8}, 0.15},  // cabinet-like
      {{2.0, 1.0, 0.5}, 0.15},   // bed-like
  };
  double points_per_surface = 60.0;  // surface samples per square metre
  std::size_t max_points = 1024;     // scenes are subsampled to at most this many points
  double clutter_fraction = 0.1;
  double room_extent = 6.0;          // square room [-e/2, e/2]^2, 2.5 m tall
  double min_gap = 0.3;              // clearance between objects' footprints
  double noise_sigma = 0.01;
  bool allow_swap_xy = true;         // randomly exchange footprint extents

  void validate() const {
    if (min_objects < 1 || max_objects < min_objects) throw ConfigError("bad object count range");
    if (class_priors.empty()) throw ConfigError("at least one class prior is required");
    for (const auto& p : class_priors)
      if (!(p.size.x > 0 && p.size.y > 0 && p.size.z > 0) || p.jitter < 0 || p.jitter >= 1)
        throw ConfigError("class priors need positive sizes and jitter in [0,1)");
    if (!(points_per_surface > 0)) throw ConfigError("points_per_surface must be positive");
    if (!(clutter_fraction >= 0 && clutter_fraction < 1))
      throw ConfigError("clutter_fraction must lie in [0,1)");
    if (!(room_extent > 0)) throw ConfigError("room_extent must be positive");
    if (max_points < 1) throw ConfigError("max_points must be positive");
  }
};

struct ModelConfig {
  std::size_t num_classes = 4;
  std::size_t num_seeds = 256;
  std::size_t feature_dim = 32;
  double encoder_radius = 1.2;
  std::size_t encoder_max_pts = 64;
  std::size_t encoder_support = 256;  // FPS subset the neighbourhoods draw from; 0 = all points
  std::size_t num_clusters = 32;
  double cluster_radius = 0.3;
  std::size_t cluster_max_pts = 16;
  double primitive_pool_radius = 1.0;
  std::size_t head_hidden = 128;
  std::size_t box_pool_dim = 64;
  double box_pool_scale = 1.25;     // neighbourhood = box scaled by this ...
  double box_pool_margin = 0.1;     // ... plus this many metres per side
  std::size_t box_pool_max_pts = 64;
  double anchor_size = 1.0;
  double max_center_shift = 1.0;    // residual clamp, in box sizes
  double max_log_scale = 1.5;       // residual clamp on log size ratios
  double nms_iou = 0.25;
  double ln_eps = 1e-5;
  CascadeConfig cascade;
  ContextConfig context;

  void validate() const {
    if (num_classes < 1) throw ConfigError("num_classes must be positive");
    if (num_seeds < 1 || feature_dim < 1 || num_clusters < 1 || head_hidden < 1 || box_pool_dim < 1)
      throw ConfigError("model widths and counts must be positive");
    if (num_clusters > num_seeds) throw ConfigError("num_clusters cannot exceed num_seeds");
    if (!(encoder_radius > 0 && cluster_radius > 0 && primitive_pool_radius > 0))
      throw ConfigError("radii must be positive");
    if (!(nms_iou > 0 && nms_iou <= 1)) throw ConfigError("nms_iou must lie in (0,1]");
    if (!(ln_eps > 0)) throw ConfigError("ln_eps must be positive");
    cascade.validate();
  }
};

struct TrainConfig {
  std::uint64_t seed = 11;
  std::size_t epochs = 40;
  std::size_t batch_size = 1;
  double learning_rate = 2e-3;
  std::vector<std::size_t> decay_epochs{28, 36};
  double decay_rate = 0.1;
  double grad_clip = 10.0;
  double smooth_l1_beta = 0.1;
  double vote_weight = 1.0;
  double size_weight = 1.0;
  double objectness_weight = 1.0;
  double class_weight = 1.0;
  double residual_weight = 1.0;

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (learning_rate < 0) throw ConfigError("learning_rate cannot be negative");
    if (!(smooth_l1_beta > 0)) throw ConfigError("smooth_l1_beta must be positive");
  }
};

struct PipelineConfig {
  SynthConfig synth;
  ModelConfig model;
  TrainConfig train;
  std::size_t train_scenes = 200;
  std::size_t eval_scenes = 50;
  double count_confidence = 0.95;

  void validate() const {
    synth.validate();
    model.validate();
    train.validate();
    if (synth.class_priors.size() != model.num_classes)
      throw ConfigError("synth class priors (" + std::to_string(synth.class_priors.size()) +
                        ") must match num_classes (" + std::to_string(model.num_classes) + ")");
    if (synth.max_points < model.num_seeds)
      throw ConfigError("max_points must be at least num_seeds");
    if (!(count_confidence > 0 && count_confidence < 1))
      throw ConfigError("count_confidence must lie in (0,1)");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_scalar(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  T out{};
  if constexpr (std::is_same_v<T, bool>) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigParseError("key '" + key + "': expected true/false, got '" + v + "'");
  } else {
    if (!(is >> out) || !(is >> std::ws).eof())
      throw ConfigParseError("key '" + key + "': cannot parse '" + v + "'");
  }
  return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& v) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(parse_scalar<T>(key, item));
  }
  return out;
}

template <typename T>
std::string format_value(const T& v) {
  std::ostringstream os;
  os.precision(17);
  if constexpr (std::is_same_v<T, bool>)
    os << (v ? "true" : "false");
  else
    os << v;
  return os.str();
}

template <typename T>
std::string format_list(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += format_value(v[i]);
  }
  return out;
}

}  // namespace detail

/// Binds every config key to a field of a PipelineConfig.
class ConfigBinder {
 public:
  explicit ConfigBinder(PipelineConfig& c) {
    auto& s = c.synth;
    auto& m = c.model;
    auto& t = c.train;
    scalar("train_scenes", c.train_scenes);
    scalar("eval_scenes", c.eval_scenes);
    scalar("count_confidence", c.count_confidence);

    scalar("synth.seed", s.seed);
    scalar("synth.min_objects", s.min_objects);
    scalar("synth.max_objects", s.max_objects);
    scalar("synth.points_per_surface", s.points_per_surface);
    scalar("synth.max_points", s.max_points);
    scalar("synth.clutter_fraction", s.clutter_fraction);
    scalar("synth.room_extent", s.room_extent);
    scalar("synth.min_gap", s.min_gap);
    scalar("synth.noise_sigma", s.noise_sigma);
    scalar("synth.allow_swap_xy", s.allow_swap_xy);
    entries_.push_back(
        {"synth.class_sizes",
         [&s](const std::string& key, const std::string& v) {
           auto vals = detail::parse_list<double>(key, v);
           if (vals.empty() || vals.size() % 3 != 0)
             throw ConfigParseError("synth.class_sizes needs w,l,h triples");
           s.class_priors.resize(vals.size() / 3);
           for (std::size_t i = 0; i < s.class_priors.size(); ++i)
             s.class_priors[i].size = {vals[3 * i], vals[3 * i + 1], vals[3 * i + 2]};
         },
         [&s] {
           std::vector<double> vals;
           for (const auto& p : s.class_priors) vals.insert(vals.end(), {p.size.x, p.size.y, p.size.z});
           return detail::format_list(vals);
         }});
    entries_.push_back({"synth.class_jitter",
                        [&s](const std::string& key, const std::string& v) {
                          const double j = detail::parse_scalar<double>(key, v);
                          for (auto& p : s.class_priors) p.jitter = j;
                        },
                        [&s] {
                          return detail::format_value(s.class_priors.empty() ? 0.0
                                                                             : s.class_priors[0].jitter);
                        }});

    scalar("model.num_classes", m.num_classes);
    scalar("model.num_seeds", m.num_seeds);
    scalar("model.feature_dim", m.feature_dim);
    scalar("model.encoder_radius", m.encoder_radius);
    scalar("model.encoder_max_pts", m.encoder_max_pts);
    scalar("model.encoder_support", m.encoder_support);
    scalar("model.num_clusters", m.num_clusters);
    scalar("model.cluster_radius", m.cluster_radius);
    scalar("model.cluster_max_pts", m.cluster_max_pts);
    scalar("model.primitive_pool_radius", m.primitive_pool_radius);
    scalar("model.head_hidden", m.head_hidden);
    scalar("model.box_pool_dim", m.box_pool_dim);
    scalar("model.box_pool_scale", m.box_pool_scale);
    scalar("model.box_pool_margin", m.box_pool_margin);
    scalar("model.box_pool_max_pts", m.box_pool_max_pts);
    scalar("model.anchor_size", m.anchor_size);
    scalar("model.max_center_shift", m.max_center_shift);
    scalar("model.max_log_scale", m.max_log_scale);
    scalar("model.nms_iou", m.nms_iou);
    scalar("model.ln_eps", m.ln_eps);
    list("cascade.thresholds", m.cascade.thresholds);
    scalar("context.gcm", m.context.enable_gcm);
    scalar("context.pcm", m.context.enable_pcm);
    scalar("context.hcm", m.context.enable_hcm);
    scalar("context.attention_scale", m.context.attention_scale);
    scalar("context.pcm_across_clusters", m.context.pcm_across_clusters);

    scalar("train.seed", t.seed);
    scalar("train.epochs", t.epochs);
    scalar("train.batch_size", t.batch_size);
    scalar("train.learning_rate", t.learning_rate);
    list("train.decay_epochs", t.decay_epochs);
    scalar("train.decay_rate", t.decay_rate);
    scalar("train.grad_clip", t.grad_clip);
    scalar("train.smooth_l1_beta", t.smooth_l1_beta);
    scalar("train.vote_weight", t.vote_weight);
    scalar("train.size_weight", t.size_weight);
    scalar("train.objectness_weight", t.objectness_weight);
    scalar("train.class_weight", t.class_weight);
    scalar("train.residual_weight", t.residual_weight);
  }

  void set(const std::string& key, const std::string& value) {
    for (auto& e : entries_)
      if (e.key == key) return e.set(key, value);
    throw ConfigParseError("unknown config key '" + key + "'");
  }

  std::string dump() const {
    std::string out;
    for (const auto& e : entries_) out += e.key + " = " + e.get() + "\n";
    return out;
  }

 private:
  struct Entry {
    std::string key;
    std::function<void(const std::string&, const std::string&)> set;
    std::function<std::string()> get;
  };

  template <typename T>
  void scalar(const char* key, T& field) {
    entries_.push_back({key,
                        [&field](const std::string& k, const std::string& v) {
                          field = detail::parse_scalar<T>(k, v);
                        },
                        [&field] { return detail::format_value(field); }});
  }
  template <typename T>
  void list(const char* key, std::vector<T>& field) {
    entries_.push_back({key,
                        [&field](const std::string& k, const std::string& v) {
                          field = detail::parse_list<T>(k, v);
                        },
                        [&field] { return detail::format_list(field); }});
  }

  std::vector<Entry> entries_;
};

/// Apply `key = value` lines to cfg.
inline void parse_config(std::istream& in, PipelineConfig& cfg) {
  ConfigBinder binder(cfg);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigParseError("config line " + std::to_string(lineno) + ": expected key = value");
    try {
      binder.set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const ConfigParseError& e) {
      throw ConfigParseError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline PipelineConfig load_config(const std::string& path) {
  PipelineConfig cfg;
  std::ifstream f(path);
  if (!f) throw ConfigParseError("cannot open config '" + path + "'");
  parse_config(f, cfg);
  cfg.validate();
  return cfg;
}

inline std::string dump_config(const PipelineConfig& cfg) {
  PipelineConfig copy = cfg;
  return ConfigBinder(copy).dump();
}

}  // namespace ctxdet
