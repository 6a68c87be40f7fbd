#pragma once

// Context layers over primitive and cluster feature maps:
//
//   geometric context   F' = LN(softmax(s * theta(F) phi(F)^T) g(F))
//   proposal context    k_p = maxpool_i LN(SA(MLP(c_i)))      per cluster
//   hybrid context      K_h = MLP([maxpool(K); maxpool(G)]) + K_P
//
// All layers are built on a Tape so they can be differentiated.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "ctxdet/sampling.hpp"
#include "ctxdet/tape.hpp"

namespace ctxdet {

struct AttentionParams {
  LinearParams theta;
  LinearParams phi;
  LinearParams g;
  LayerNormParams ln;

  AttentionParams() = default;
  explicit AttentionParams(std::size_t d)
      : theta(d, d), phi(d, d), g(d, d), ln(d) {}

  std::size_t out_dim() const { return g.out_dim(); }

  void validate(std::size_t d_in) const {
    if (theta.in_dim() != d_in || phi.in_dim() != d_in || g.in_dim() != d_in)
      throw ConfigError("attention transforms expect width " + std::to_string(theta.in_dim()) +
                        " but features have width " + std::to_string(d_in));
    if (theta.out_dim() != phi.out_dim() || theta.out_dim() != g.out_dim())
      throw ConfigError("attention transforms theta/phi/g must share their output width");
    if (ln.dim() != g.out_dim()) throw ConfigError("attention layer norm width mismatch");
  }
};

struct ContextConfig {
  bool enable_gcm = true;
  bool enable_pcm = true;
  bool enable_hcm = true;
  double attention_scale = 0.0;      // <= 0 selects 1/sqrt(D')
  bool pcm_across_clusters = false;  // attend across cluster vectors instead of within clusters

  double scale_for(std::size_t width) const {
    return attention_scale > 0.0 ? attention_scale : 1.0 / std::sqrt(static_cast<double>(width));
  }

  std::string label() const {
    return std::string(enable_gcm ? "G" : "-") + (enable_pcm ? "P" : "-") + (enable_hcm ? "H" : "-");
  }

  /// The eight on/off combinations, all-off first, all-on last.
  static std::vector<ContextConfig> all_combinations() {
    std::vector<ContextConfig> out;
    for (int mask = 0; mask < 8; ++mask) {
      ContextConfig c;
      c.enable_gcm = mask & 1;
      c.enable_pcm = mask & 2;
      c.enable_hcm = mask & 4;
      out.push_back(c);
    }
    return out;
  }
};

struct PcmParams {
  Mlp mlp;               // per-vote encoder, D_in -> ... -> D'
  AttentionParams attn;  // D' -> D'
};

struct ContextParams {
  std::array<AttentionParams, kNumPrimitiveKinds> gcm;
  std::array<PcmParams, kNumPrimitiveKinds> pcm;
  std::array<Mlp, kNumPrimitiveKinds> hcm;  // 2D' -> ... -> D'
};

/// LN(softmax(scale * theta(F) phi(F)^T) g(F)) over the rows of F.
inline Var self_attention(Tape& tape, Var f, AttentionParams& p, double scale) {
  p.validate(tape.value(f).cols());
  Var q = tape.linear(f, p.theta);
  Var k = tape.linear(f, p.phi);
  Var v = tape.linear(f, p.g);
  Var a = tape.row_softmax(tape.scale(tape.matmul_nt(q, k), scale));
  return tape.layer_norm(tape.matmul(a, v), p.ln);
}

/// Geometric context for one primitive kind; output has one row per input row.
inline Var gcm(Tape& tape, Var features, AttentionParams& p, double scale) {
  return self_attention(tape, features, p, scale);
}

/// Attention applied independently inside each row segment of x.
inline Var segment_self_attention(Tape& tape, Var x, const std::vector<std::size_t>& offsets,
                                  AttentionParams& p, double scale) {
  p.validate(tape.value(x).cols());
  Var q = tape.linear(x, p.theta);
  Var k = tape.linear(x, p.phi);
  Var v = tape.linear(x, p.g);
  std::vector<Var> parts;
  parts.reserve(offsets.size() - 1);
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const std::size_t b = offsets[s], e = offsets[s + 1];
    Var qs = tape.slice_rows(q, b, e), ks = tape.slice_rows(k, b, e), vs = tape.slice_rows(v, b, e);
    Var a = tape.row_softmax(tape.scale(tape.matmul_nt(qs, ks), scale));
    parts.push_back(tape.matmul(a, vs));
  }
  return tape.layer_norm(tape.concat_rows(parts), p.ln);
}

/// Per-cluster vote inputs c_i. Row segments [offsets[s], offsets[s+1]) hold
/// the votes of cluster s.
struct ClusterInputs {
  Var rows;
  std::vector<std::size_t> offsets;

  std::size_t clusters() const { return offsets.size() - 1; }
};

/// Reorder each cluster's rows lexicographically and drop exact duplicates,
/// so everything downstream depends on the cluster only as a set.
inline ClusterInputs canonicalize_clusters(Tape& tape, const ClusterInputs& in) {
  const Tensor& x = tape.value(in.rows);
  auto less = [&](std::size_t a, std::size_t b) {
    return std::lexicographical_compare(x.row(a).begin(), x.row(a).end(), x.row(b).begin(),
                                        x.row(b).end());
  };
  auto equal = [&](std::size_t a, std::size_t b) {
    return std::equal(x.row(a).begin(), x.row(a).end(), x.row(b).begin());
  };
  std::vector<std::size_t> order;
  std::vector<std::size_t> offsets{0};
  for (std::size_t s = 0; s + 1 < in.offsets.size(); ++s) {
    std::vector<std::size_t> seg;
    for (std::size_t r = in.offsets[s]; r < in.offsets[s + 1]; ++r) seg.push_back(r);
    if (seg.empty()) throw StateError("proposal context: cluster " + std::to_string(s) + " is empty");
    std::stable_sort(seg.begin(), seg.end(), less);
    seg.erase(std::unique(seg.begin(), seg.end(), equal), seg.end());
    order.insert(order.end(), seg.begin(), seg.end());
    offsets.push_back(order.size());
  }
  return {tape.gather_rows(in.rows, std::move(order)), std::move(offsets)};
}

struct PcmOutput {
  Var k_pre;  // N x D': max-pooled MLP(c_i), before attention
  Var k_p;    // N x D': proposal-context features (== k_pre when disabled)
};

/// Proposal context over clusters. With `enabled` false the attention branch
/// is skipped and K_P is the plain max-pooled cluster encoding.
inline PcmOutput pcm(Tape& tape, const ClusterInputs& clusters, PcmParams& p, double scale,
                     bool enabled = true, bool across_clusters = false) {
  if (clusters.offsets.size() < 2) throw StateError("proposal context: no clusters");
  ClusterInputs canon = canonicalize_clusters(tape, clusters);
  Var h = tape.mlp(canon.rows, p.mlp);
  PcmOutput out;
  out.k_pre = tape.segment_max_pool(h, canon.offsets);
  if (!enabled) {
    out.k_p = out.k_pre;
  } else if (across_clusters) {
    out.k_p = self_attention(tape, out.k_pre, p.attn, scale);
  } else {
    Var att = segment_self_attention(tape, h, canon.offsets, p.attn, scale);
    out.k_p = tape.segment_max_pool(att, canon.offsets);
  }
  return out;
}

/// Hybrid context: one scene vector from pooled cluster and primitive
/// features, broadcast and added to every row of K_P.
inline Var hcm(Tape& tape, Var primitives, Var k_p, Var k_pre, Mlp& mlp) {
  const Shape kp = tape.value(k_p).shape();
  if (tape.value(k_pre).shape() != kp)
    throw ConfigError("hybrid context: pre-attention cluster features " +
                      shape_str(tape.value(k_pre).shape()) + " vs K_P " + shape_str(kp));
  Var s = tape.concat_cols({tape.max_pool_rows(k_pre), tape.max_pool_rows(primitives)});
  check_mlp_chain(mlp, tape.value(s).cols());
  if (mlp.back().out_dim() != kp[1])
    throw ConfigError("hybrid context: MLP emits width " + std::to_string(mlp.back().out_dim()) +
                      " but K_P has width " + std::to_string(kp[1]));
  Var scene = tape.mlp(s, mlp);
  return tape.add(tape.broadcast_rows(scene, kp[0]), k_p);
}

/// Feature maps the context layers read and write. The primitive maps are
/// indexed by PrimitiveKind.
struct ContextState {
  Var seed_features;                                      // G: P x D, before any attention
  std::array<Var, kNumPrimitiveKinds> primitive_features; // per kind, P x D
  std::array<ClusterInputs, kNumPrimitiveKinds> clusters; // per kind, vote inputs
  std::array<Var, kNumPrimitiveKinds> cluster_features;   // per kind, N x D' (output)
};

/// Geometric context stage: each kind's primitive map is replaced by its
/// attended version, or passed through when disabled.
inline void apply_primitive_context(Tape& tape, ContextState& st, ContextParams& params,
                                    const ContextConfig& cfg) {
  for (PrimitiveKind kind : kAllPrimitiveKinds) {
    const auto k = static_cast<std::size_t>(kind);
    if (!cfg.enable_gcm) continue;
    const double scale = cfg.scale_for(params.gcm[k].out_dim());
    st.primitive_features[k] = gcm(tape, st.primitive_features[k], params.gcm[k], scale);
  }
}

/// Proposal and hybrid context stages: fills cluster_features per kind.
inline void apply_cluster_context(Tape& tape, ContextState& st, ContextParams& params,
                                  const ContextConfig& cfg) {
  for (PrimitiveKind kind : kAllPrimitiveKinds) {
    const auto k = static_cast<std::size_t>(kind);
    const double scale = cfg.scale_for(params.pcm[k].attn.out_dim());
    PcmOutput po = pcm(tape, st.clusters[k], params.pcm[k], scale, cfg.enable_pcm,
                       cfg.pcm_across_clusters);
    st.cluster_features[k] =
        cfg.enable_hcm ? hcm(tape, st.seed_features, po.k_p, po.k_pre, params.hcm[k]) : po.k_p;
  }
}

inline void apply_context(Tape& tape, ContextState& st, ContextParams& params,
                          const ContextConfig& cfg) {
  apply_primitive_context(tape, st, params, cfg);
  apply_cluster_context(tape, st, params, cfg);
}

}  // namespace ctxdet
