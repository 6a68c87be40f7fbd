#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "ctxdet/checkpoint.hpp"
#include "ctxdet/config.hpp"
#include "ctxdet/context.hpp"

namespace ctxdet {

/// One refinement stage: a box-neighbourhood encoder and a head emitting
/// [objectness | class logits (C) | residual (6)] per proposal.
struct StageParams {
  Mlp pool;
  Mlp head;
};

struct ModelParams {
  Mlp encoder;                                  // 3 -> D -> D
  std::array<Mlp, kNumPrimitiveKinds> vote;     // D -> D -> 3
  ContextParams context;
  Mlp size_head;                                // 6D -> H -> 3
  std::vector<StageParams> stages;

  /// Visits every learnable tensor with its checkpoint name, in a fixed order.
  template <typename F>
  void for_each(F&& f) {
    auto visit_mlp = [&](const std::string& prefix, Mlp& m) {
      for (std::size_t i = 0; i < m.size(); ++i) {
        f(prefix + ".l" + std::to_string(i) + ".weight", m[i].weight);
        f(prefix + ".l" + std::to_string(i) + ".bias", m[i].bias);
      }
    };
    auto visit_linear = [&](const std::string& prefix, LinearParams& l) {
      f(prefix + ".weight", l.weight);
      f(prefix + ".bias", l.bias);
    };
    auto visit_attention = [&](const std::string& prefix, AttentionParams& a) {
      visit_linear(prefix + ".theta", a.theta);
      visit_linear(prefix + ".phi", a.phi);
      visit_linear(prefix + ".g", a.g);
      f(prefix + ".ln.gain", a.ln.gain);
      f(prefix + ".ln.bias", a.ln.bias);
    };
    visit_mlp("encoder", encoder);
    for (PrimitiveKind k : kAllPrimitiveKinds) {
      const auto i = static_cast<std::size_t>(k);
      visit_mlp(std::string("vote.") + kind_name(k), vote[i]);
    }
    for (PrimitiveKind k : kAllPrimitiveKinds)
      visit_attention(std::string("gcm.") + kind_name(k), context.gcm[static_cast<std::size_t>(k)]);
    for (PrimitiveKind k : kAllPrimitiveKinds) {
      auto& p = context.pcm[static_cast<std::size_t>(k)];
      visit_mlp(std::string("pcm.") + kind_name(k) + ".mlp", p.mlp);
      visit_attention(std::string("pcm.") + kind_name(k) + ".attn", p.attn);
    }
    for (PrimitiveKind k : kAllPrimitiveKinds)
      visit_mlp(std::string("hcm.") + kind_name(k), context.hcm[static_cast<std::size_t>(k)]);
    visit_mlp("size_head", size_head);
    for (std::size_t s = 0; s < stages.size(); ++s) {
      visit_mlp("stage" + std::to_string(s) + ".pool", stages[s].pool);
      visit_mlp("stage" + std::to_string(s) + ".head", stages[s].head);
    }
  }

  template <typename F>
  void for_each(F&& f) const {
    const_cast<ModelParams*>(this)->for_each(
        [&](const std::string& name, Tensor& t) { f(name, static_cast<const Tensor&>(t)); });
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
  }

  void zero_grad() {
    for_each([](const std::string&, Tensor& t) { t.zero_grad(); });
  }

  std::vector<NamedTensor> to_named() const {
    std::vector<NamedTensor> out;
    for_each([&](const std::string& name, const Tensor& t) { out.push_back({name, Tensor(t.shape(), t.storage())}); });
    return out;
  }

  /// Loads values by name; shapes must match and every tensor must be present.
  void from_named(const std::vector<NamedTensor>& entries) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e.value;
    std::size_t used = 0;
    for_each([&](const std::string& name, Tensor& t) {
      auto it = by_name.find(name);
      if (it == by_name.end()) throw CheckpointError("checkpoint lacks tensor '" + name + "'");
      if (it->second->shape() != t.shape())
        throw CheckpointError("tensor '" + name + "' has shape " + shape_str(it->second->shape()) +
                              ", model expects " + shape_str(t.shape()));
      t.storage() = it->second->storage();
      ++used;
    });
    if (used != entries.size()) throw CheckpointError("checkpoint holds tensors the model does not use");
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    auto na = a.to_named(), nb = b.to_named();
    if (na.size() != nb.size()) return false;
    for (std::size_t i = 0; i < na.size(); ++i)
      if (na[i].name != nb[i].name || !(na[i].value == nb[i].value)) return false;
    return true;
  }
};

/// Width of a proposal feature row: for each primitive kind, the cluster
/// feature and the pooled primitive-context feature.
inline std::size_t proposal_dim(const ModelConfig& m) { return 2 * kNumPrimitiveKinds * m.feature_dim; }

/// Input width of a refinement head: proposal features, pooled box
/// neighbourhood, and the log extents of the current box.
inline std::size_t stage_head_input(const ModelConfig& m) { return proposal_dim(m) + m.box_pool_dim + 3; }
inline std::size_t stage_head_output(const ModelConfig& m) { return 1 + m.num_classes + 6; }

/// Zero-valued parameters with the shapes implied by `m`.
inline ModelParams make_model(const ModelConfig& m) {
  m.validate();
  const std::size_t D = m.feature_dim, H = m.head_hidden;
  ModelParams p;
  p.encoder = make_mlp({3, D, D});
  for (auto& v : p.vote) v = make_mlp({D, D, 3});
  for (std::size_t k = 0; k < kNumPrimitiveKinds; ++k) {
    p.context.gcm[k] = AttentionParams(D);
    p.context.gcm[k].ln.eps = m.ln_eps;
    p.context.pcm[k].mlp = make_mlp({3 + D, D, D});
    p.context.pcm[k].attn = AttentionParams(D);
    p.context.pcm[k].attn.ln.eps = m.ln_eps;
    p.context.hcm[k] = make_mlp({2 * D, D, D});
  }
  p.size_head = make_mlp({proposal_dim(m), H, 3});
  p.stages.resize(m.cascade.stages());
  for (auto& s : p.stages) {
    s.pool = make_mlp({3, m.box_pool_dim, m.box_pool_dim});
    s.head = make_mlp({stage_head_input(m), H, stage_head_output(m)});
  }
  return p;
}

/// Glorot-uniform weights, zero biases, unit LayerNorm gains. Output layers of
/// the vote, size and residual heads start small so the untrained model
/// votes at the seeds and keeps proposal boxes in place.
inline ModelParams init_model(const ModelConfig& m, std::uint64_t seed) {
  ModelParams p = make_model(m);
  std::mt19937_64 rng(seed);
  auto glorot = [&](Mlp& mlp, double last_scale) {
    for (std::size_t i = 0; i < mlp.size(); ++i) {
      auto& w = mlp[i].weight;
      const double lim = std::sqrt(6.0 / double(w.rows() + w.cols()));
      std::uniform_real_distribution<double> u(-lim, lim);
      const double s = i + 1 == mlp.size() ? last_scale : 1.0;
      for (double& v : w.data()) v = s * u(rng);
    }
  };
  auto glorot_linear = [&](LinearParams& l) {
    const double lim = std::sqrt(6.0 / double(l.weight.rows() + l.weight.cols()));
    std::uniform_real_distribution<double> u(-lim, lim);
    for (double& v : l.weight.data()) v = u(rng);
  };
  glorot(p.encoder, 1.0);
  for (auto& v : p.vote) glorot(v, 0.1);
  for (std::size_t k = 0; k < kNumPrimitiveKinds; ++k) {
    for (auto* a : {&p.context.gcm[k], &p.context.pcm[k].attn}) {
      glorot_linear(a->theta);
      glorot_linear(a->phi);
      glorot_linear(a->g);
    }
    glorot(p.context.pcm[k].mlp, 1.0);
    glorot(p.context.hcm[k], 0.1);
  }
  glorot(p.size_head, 0.1);
  for (auto& s : p.stages) {
    glorot(s.pool, 1.0);
    glorot(s.head, 0.1);
  }
  return p;
}

inline void save_model(const std::string& path, const ModelParams& p) {
  save_checkpoint(path, p.to_named());
}

inline ModelParams load_model(const std::string& path, const ModelConfig& m) {
  ModelParams p = make_model(m);
  p.from_named(load_checkpoint(path));
  return p;
}

}  // namespace ctxdet
