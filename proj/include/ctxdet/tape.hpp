#pragma once

// Reverse-mode differentiation over an explicit operation record.
//
// Every op appends a node holding its value and a closure that pushes the
// node's gradient into its inputs. backward() walks the record in reverse.
// Parameters enter as leaves that reference caller-owned tensors; their
// gradients stay on the tape until accumulate_param_grads() adds them into
// Tensor::grad(), so several tapes can be evaluated independently and merged
// in a fixed order.

#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ctxdet/tensor.hpp"

namespace ctxdet {

struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
  bool valid() const { return id != std::numeric_limits<std::size_t>::max(); }
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor t) { return push(std::move(t), false, {}); }

  /// A differentiable leaf owned by the tape (used by gradient checks).
  Var leaf(Tensor t) { return push(std::move(t), true, {}); }

  /// A leaf that references a parameter tensor; one node per tensor per tape.
  Var param(Tensor& t) {
    if (auto it = param_ids_.find(&t); it != param_ids_.end()) return Var{it->second};
    Node n;
    n.ref = &t;
    n.param = &t;
    n.needs_grad = true;
    nodes_.push_back(std::move(n));
    const std::size_t id = nodes_.size() - 1;
    param_ids_.emplace(&t, id);
    return Var{id};
  }

  const Tensor& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.ref ? *n.ref : n.own;
  }

  /// Gradient of the last backward() target with respect to v (zeros if v was not reached).
  std::vector<double> grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty()) return std::vector<double>(value(v).size(), 0.0);
    return n.grad;
  }

  void backward(Var loss) {
    if (value(loss).size() != 1)
      throw DimensionError("backward: target must be a single element, got " +
                           shape_str(value(loss).shape()));
    for (auto& n : nodes_) n.grad.clear();
    grad_ref(loss.id)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty() || !n.backward) continue;
      current_ = i;
      n.backward(*this);
    }
  }

  void accumulate_param_grads() {
    for (auto& n : nodes_) {
      if (!n.param || n.grad.empty()) continue;
      auto& g = n.param->grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  }

  // ---- linear algebra ----------------------------------------------------

  Var matmul(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    Tensor out = ctxdet::matmul(A, B);
    const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
    return push(std::move(out), any(a, b), [=, this](Tape&) {
      const double* g = grad_ptr(self());
      if (needs(a))
        kernel::gemm_nt(n, m, k, g, value(b).data().data(), grad_ref(a.id).data(), true);
      if (needs(b))
        kernel::gemm_tn(k, n, m, value(a).data().data(), g, grad_ref(b.id).data(), true);
    });
  }

  /// a * b^T
  Var matmul_nt(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    kernel::require_matrix(A, "matmul_nt");
    kernel::require_matrix(B, "matmul_nt");
    if (A.cols() != B.cols())
      throw DimensionError("matmul_nt: widths differ for " + shape_str(A.shape()) + " and " +
                           shape_str(B.shape()));
    const std::size_t n = A.rows(), k = A.cols(), m = B.rows();
    Tensor out = Tensor::matrix(n, m);
    kernel::gemm_nt(n, k, m, A.data().data(), B.data().data(), out.data().data(), false);
    return push(std::move(out), any(a, b), [=, this](Tape&) {
      const double* g = grad_ptr(self());
      if (needs(a))
        kernel::gemm_nn(n, m, k, g, value(b).data().data(), grad_ref(a.id).data(), true);
      if (needs(b))
        kernel::gemm_tn(m, n, k, g, value(a).data().data(), grad_ref(b.id).data(), true);
    });
  }

  Var add(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.shape() != B.shape())
      throw DimensionError("add: shapes " + shape_str(A.shape()) + " and " + shape_str(B.shape()));
    Tensor out = A;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
    return push(std::move(out), any(a, b), [=, this](Tape&) {
      add_into(a, grad_ptr(self()), 1.0);
      add_into(b, grad_ptr(self()), 1.0);
    });
  }

  Var sub(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.shape() != B.shape())
      throw DimensionError("sub: shapes " + shape_str(A.shape()) + " and " + shape_str(B.shape()));
    Tensor out = A;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
    return push(std::move(out), any(a, b), [=, this](Tape&) {
      add_into(a, grad_ptr(self()), 1.0);
      add_into(b, grad_ptr(self()), -1.0);
    });
  }

  /// x[n x m] + bias[m] broadcast over rows.
  Var add_bias(Var x, Var bias) {
    const Tensor& X = value(x);
    const Tensor& B = value(bias);
    kernel::require_matrix(X, "add_bias");
    if (B.size() != X.cols())
      throw DimensionError("add_bias: bias " + shape_str(B.shape()) + " for input " +
                           shape_str(X.shape()));
    const std::size_t n = X.rows(), m = X.cols();
    Tensor out = X;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < m; ++c) out.at(r, c) += B[c];
    return push(std::move(out), any(x, bias), [=, this](Tape&) {
      const double* g = grad_ptr(self());
      add_into(x, g, 1.0);
      if (needs(bias)) {
        auto& gb = grad_ref(bias.id);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < m; ++c) gb[c] += g[r * m + c];
      }
    });
  }

  /// Elementwise product of two same-shape tensors.
  Var mul(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.shape() != B.shape())
      throw DimensionError("mul: shapes " + shape_str(A.shape()) + " and " + shape_str(B.shape()));
    Tensor out = A;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
    return push(std::move(out), any(a, b), [=, this](Tape&) {
      const double* g = grad_ptr(self());
      if (needs(a)) {
        auto& ga = grad_ref(a.id);
        const Tensor& Bv = value(b);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * Bv[i];
      }
      if (needs(b)) {
        auto& gb = grad_ref(b.id);
        const Tensor& Av = value(a);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * Av[i];
      }
    });
  }

  Var scale(Var x, double s) {
    Tensor out = value(x);
    for (double& v : out.data()) v *= s;
    return push(std::move(out), any(x), [=, this](Tape&) { add_into(x, grad_ptr(self()), s); });
  }

  /// ReLU with subgradient 0 at 0.
  Var relu(Var x) {
    Tensor out = value(x);
    for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
    return push(std::move(out), any(x), [=, this](Tape&) {
      if (!needs(x)) return;
      const double* g = grad_ptr(self());
      const Tensor& X = value(x);
      auto& gx = grad_ref(x.id);
      for (std::size_t i = 0; i < gx.size(); ++i)
        if (X[i] > 0.0) gx[i] += g[i];
    });
  }

  Var row_softmax(Var x) {
    Tensor out = ctxdet::row_softmax(value(x));
    const std::size_t n = out.rows(), m = out.cols();
    return push(std::move(out), any(x), [=, this](Tape&) {
      if (!needs(x)) return;
      const double* g = grad_ptr(self());
      const Tensor& y = value(self());
      auto& gx = grad_ref(x.id);
      for (std::size_t r = 0; r < n; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < m; ++c) dot += g[r * m + c] * y.at(r, c);
        for (std::size_t c = 0; c < m; ++c) gx[r * m + c] += y.at(r, c) * (g[r * m + c] - dot);
      }
    });
  }

  Var layer_norm(Var x, Var gain, Var bias, double eps) {
    const Tensor& X = value(x);
    LayerNormParams p;
    p.gain = value(gain);
    p.bias = value(bias);
    p.eps = eps;
    auto stats = std::make_shared<LayerNormStats>();
    Tensor out = ctxdet::layer_norm(X, p, stats.get());
    const std::size_t n = X.rows(), d = X.cols();
    return push(std::move(out), any(x, gain, bias), [=, this](Tape&) {
      const double* g = grad_ptr(self());
      const Tensor& Xv = value(x);
      const Tensor& G = value(gain);
      std::vector<double> xhat(d), gh(d);
      for (std::size_t r = 0; r < n; ++r) {
        const double mu = stats->mean[r], is = stats->inv_std[r];
        double sum_gh = 0.0, sum_gh_xhat = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          xhat[c] = (Xv.at(r, c) - mu) * is;
          gh[c] = g[r * d + c] * G[c];
          sum_gh += gh[c];
          sum_gh_xhat += gh[c] * xhat[c];
        }
        if (needs(x)) {
          auto& gx = grad_ref(x.id);
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t c = 0; c < d; ++c)
            gx[r * d + c] += is * (gh[c] - inv_d * sum_gh - xhat[c] * inv_d * sum_gh_xhat);
        }
        if (needs(gain)) {
          auto& gg = grad_ref(gain.id);
          for (std::size_t c = 0; c < d; ++c) gg[c] += g[r * d + c] * xhat[c];
        }
        if (needs(bias)) {
          auto& gb = grad_ref(bias.id);
          for (std::size_t c = 0; c < d; ++c) gb[c] += g[r * d + c];
        }
      }
    });
  }

  // ---- set and row manipulation -----------------------------------------

  /// Channel-wise max over rows -> 1 x D. Gradient routes to the winning row only.
  Var max_pool_rows(Var x) {
    const std::size_t n = value(x).rows();
    return segment_max_pool(x, {0, n});
  }

  /// Max-pool over consecutive row segments [offsets[s], offsets[s+1]).
  /// An empty segment yields a zero row that receives no gradient.
  Var segment_max_pool(Var x, std::vector<std::size_t> offsets) {
    const Tensor& X = value(x);
    kernel::require_matrix(X, "segment_max_pool");
    if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != X.rows())
      throw DimensionError("segment_max_pool: offsets must span [0, " + std::to_string(X.rows()) +
                           "]");
    const std::size_t segs = offsets.size() - 1, d = X.cols();
    Tensor out = Tensor::matrix(segs, d);
    std::vector<std::size_t> winner(segs * d, kNone);
    for (std::size_t s = 0; s < segs; ++s) {
      const std::size_t b = offsets[s], e = offsets[s + 1];
      if (e < b) throw DimensionError("segment_max_pool: offsets must be non-decreasing");
      for (std::size_t r = b; r < e; ++r)
        for (std::size_t c = 0; c < d; ++c)
          if (r == b || X.at(r, c) > out.at(s, c)) {
            out.at(s, c) = X.at(r, c);
            winner[s * d + c] = r;
          }
    }
    return push(std::move(out), any(x), [=, this](Tape&) {
      if (!needs(x)) return;
      const double* g = grad_ptr(self());
      auto& gx = grad_ref(x.id);
      for (std::size_t i = 0; i < winner.size(); ++i)
        if (winner[i] != kNone) gx[winner[i] * d + i % d] += g[i];
    });
  }

  Var gather_rows(Var x, std::vector<std::size_t> idx) {
    const Tensor& X = value(x);
    kernel::require_matrix(X, "gather_rows");
    if (idx.empty()) throw EmptyInputError("gather_rows: no rows requested");
    const std::size_t d = X.cols();
    Tensor out = Tensor::matrix(idx.size(), d);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] >= X.rows())
        throw DimensionError("gather_rows: row " + std::to_string(idx[i]) + " out of range for " +
                             shape_str(X.shape()));
      auto src = X.row(idx[i]);
      std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return push(std::move(out), any(x), [=, this](Tape&) {
      if (!needs(x)) return;
      const double* g = grad_ptr(self());
      auto& gx = grad_ref(x.id);
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t c = 0; c < d; ++c) gx[idx[i] * d + c] += g[i * d + c];
    });
  }

  Var slice_rows(Var x, std::size_t begin, std::size_t end) {
    const Tensor& X = value(x);
    kernel::require_matrix(X, "slice_rows");
    if (begin >= end || end > X.rows())
      throw DimensionError("slice_rows: bad range for " + shape_str(X.shape()));
    const std::size_t d = X.cols();
    Tensor out({end - begin, d},
               std::vector<double>(X.data().begin() + begin * d, X.data().begin() + end * d));
    return push(std::move(out), any(x), [=, this](Tape&) {
      if (!needs(x)) return;
      const double* g = grad_ptr(self());
      auto& gx = grad_ref(x.id);
      for (std::size_t i = 0; i < (end - begin) * d; ++i) gx[begin * d + i] += g[i];
    });
  }

  Var slice_cols(Var x, std::size_t begin, std::size_t end) {
    const Tensor& X = value(x);
    kernel::require_matrix(X, "slice_cols");
    if (begin >= end || end > X.cols())
      throw DimensionError("slice_cols: bad range for " + shape_str(X.shape()));
    const std::size_t n = X.rows(), d = X.cols(), w = end - begin;
    Tensor out = Tensor::matrix(n, w);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < w; ++c) out.at(r, c) = X.at(r, begin + c);
    return push(std::move(out), any(x), [=, this](Tape&) {
      if (!needs(x)) return;
      const double* g = grad_ptr(self());
      auto& gx = grad_ref(x.id);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < w; ++c) gx[r * d + begin + c] += g[r * w + c];
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw EmptyInputError("concat_cols: nothing to concatenate");
    const std::size_t n = value(parts[0]).rows();
    std::size_t total = 0;
    std::vector<std::size_t> widths;
    for (Var p : parts) {
      const Tensor& P = value(p);
      kernel::require_matrix(P, "concat_cols");
      if (P.rows() != n)
        throw DimensionError("concat_cols: row counts differ (" + std::to_string(P.rows()) +
                             " vs " + std::to_string(n) + ")");
      widths.push_back(P.cols());
      total += P.cols();
    }
    Tensor out = Tensor::matrix(n, total);
    bool grad = false;
    for (std::size_t k = 0, off = 0; k < parts.size(); off += widths[k], ++k) {
      const Tensor& P = value(parts[k]);
      grad = grad || needs(parts[k]);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < widths[k]; ++c) out.at(r, off + c) = P.at(r, c);
    }
    return push(std::move(out), grad, [=, this](Tape&) {
      const double* g = grad_ptr(self());
      for (std::size_t k = 0, off = 0; k < parts.size(); off += widths[k], ++k) {
        if (!needs(parts[k])) continue;
        auto& gp = grad_ref(parts[k].id);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < widths[k]; ++c) gp[r * widths[k] + c] += g[r * total + off + c];
      }
    });
  }

  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw EmptyInputError("concat_rows: nothing to concatenate");
    const std::size_t d = value(parts[0]).cols();
    std::vector<double> flat;
    std::vector<std::size_t> offsets{0};
    bool grad = false;
    for (Var p : parts) {
      const Tensor& P = value(p);
      kernel::require_matrix(P, "concat_rows");
      if (P.cols() != d) throw DimensionError("concat_rows: widths differ");
      flat.insert(flat.end(), P.data().begin(), P.data().end());
      offsets.push_back(offsets.back() + P.size());
      grad = grad || needs(p);
    }
    const std::size_t n = flat.size() / d;
    Tensor out({n, d}, std::move(flat));
    return push(std::move(out), grad, [=, this](Tape&) {
      const double* g = grad_ptr(self());
      for (std::size_t k = 0; k < parts.size(); ++k) {
        if (!needs(parts[k])) continue;
        auto& gp = grad_ref(parts[k].id);
        for (std::size_t i = offsets[k]; i < offsets[k + 1]; ++i) gp[i - offsets[k]] += g[i];
      }
    });
  }

  /// Repeat a 1 x D row n times.
  Var broadcast_rows(Var x, std::size_t n) {
    const Tensor& X = value(x);
    if (X.size() == 0 || (X.rank() == 2 && X.rows() != 1))
      throw DimensionError("broadcast_rows: expected a single row, got " + shape_str(X.shape()));
    const std::size_t d = X.size();
    Tensor out = Tensor::matrix(n, d);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) out.at(r, c) = X[c];
    return push(std::move(out), any(x), [=, this](Tape&) {
      if (!needs(x)) return;
      const double* g = grad_ptr(self());
      auto& gx = grad_ref(x.id);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) gx[c] += g[r * d + c];
    });
  }

  Var sum(Var x) {
    const Tensor& X = value(x);
    double s = 0.0;
    for (double v : X.data()) s += v;
    const std::size_t n = X.size();
    return push(Tensor({1}, s), any(x), [=, this](Tape&) {
      if (!needs(x)) return;
      const double g = grad_ptr(self())[0];
      auto& gx = grad_ref(x.id);
      for (std::size_t i = 0; i < n; ++i) gx[i] += g;
    });
  }

  /// sum_k w_k * s_k over scalar nodes.
  Var weighted_sum(const std::vector<Var>& scalars, const std::vector<double>& weights) {
    if (scalars.size() != weights.size() || scalars.empty())
      throw DimensionError("weighted_sum: need one weight per scalar");
    double s = 0.0;
    bool grad = false;
    for (std::size_t k = 0; k < scalars.size(); ++k) {
      if (value(scalars[k]).size() != 1) throw DimensionError("weighted_sum: non-scalar term");
      s += weights[k] * value(scalars[k])[0];
      grad = grad || needs(scalars[k]);
    }
    return push(Tensor({1}, s), grad, [=, this](Tape&) {
      const double g = grad_ptr(self())[0];
      for (std::size_t k = 0; k < scalars.size(); ++k)
        if (needs(scalars[k])) grad_ref(scalars[k].id)[0] += weights[k] * g;
    });
  }

  // ---- losses (all return a single-element node) --------------------------

  /// sum_r w_r * sum_c huber_beta(pred[r,c] - target[r,c]) with the
  /// smooth-L1 convention: 0.5 d^2 / beta when |d| < beta, |d| - 0.5 beta otherwise.
  Var smooth_l1(Var pred, const Tensor& target, std::vector<double> row_weights, double beta) {
    const Tensor& P = value(pred);
    kernel::require_matrix(P, "smooth_l1");
    if (P.shape() != target.shape())
      throw DimensionError("smooth_l1: prediction " + shape_str(P.shape()) + " vs target " +
                           shape_str(target.shape()));
    if (row_weights.size() != P.rows()) throw DimensionError("smooth_l1: one weight per row");
    if (!(beta > 0.0)) throw ConfigError("smooth_l1: beta must be positive");
    const std::size_t n = P.rows(), d = P.cols();
    std::vector<double> dloss(n * d, 0.0);
    double loss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      const double w = row_weights[r];
      if (w == 0.0) continue;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = P.at(r, c) - target.at(r, c);
        const double a = std::abs(diff);
        if (a < beta) {
          loss += w * 0.5 * diff * diff / beta;
          dloss[r * d + c] = w * diff / beta;
        } else {
          loss += w * (a - 0.5 * beta);
          dloss[r * d + c] = w * (diff > 0 ? 1.0 : -1.0);
        }
      }
    }
    return push(Tensor({1}, loss), any(pred), [=, this](Tape&) {
      if (!needs(pred)) return;
      const double g = grad_ptr(self())[0];
      auto& gp = grad_ref(pred.id);
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g * dloss[i];
    });
  }

  /// sum_r w_r * BCE(sigmoid(logit_r), target_r) for an n x 1 logit column.
  Var bce_with_logits(Var logits, std::vector<double> targets, std::vector<double> weights) {
    const Tensor& L = value(logits);
    if (L.size() != targets.size() || targets.size() != weights.size())
      throw DimensionError("bce_with_logits: logits, targets and weights must align");
    double loss = 0.0;
    std::vector<double> dl(L.size(), 0.0);
    for (std::size_t i = 0; i < L.size(); ++i) {
      const double z = L[i], t = targets[i];
      // log(1 + exp(z)) - t z, evaluated without overflow
      const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
      loss += weights[i] * (softplus - t * z);
      const double sig = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
      dl[i] = weights[i] * (sig - t);
    }
    return push(Tensor({1}, loss), any(logits), [=, this](Tape&) {
      if (!needs(logits)) return;
      const double g = grad_ptr(self())[0];
      auto& gl = grad_ref(logits.id);
      for (std::size_t i = 0; i < gl.size(); ++i) gl[i] += g * dl[i];
    });
  }

  /// sum_r w_r * -log softmax(logits_r)[label_r].
  Var softmax_cross_entropy(Var logits, std::vector<std::size_t> labels,
                            std::vector<double> weights) {
    const Tensor& L = value(logits);
    kernel::require_matrix(L, "softmax_cross_entropy");
    if (labels.size() != L.rows() || weights.size() != L.rows())
      throw DimensionError("softmax_cross_entropy: one label and weight per row");
    const std::size_t n = L.rows(), c = L.cols();
    Tensor prob = ctxdet::row_softmax(L);
    double loss = 0.0;
    std::vector<double> dl(n * c, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
      if (weights[r] == 0.0) continue;
      if (labels[r] >= c) throw DimensionError("softmax_cross_entropy: label out of range");
      auto row = L.row(r);
      const double mx = *std::max_element(row.begin(), row.end());
      double lse = 0.0;
      for (double v : row) lse += std::exp(v - mx);
      lse = mx + std::log(lse);
      loss += weights[r] * (lse - row[labels[r]]);
      for (std::size_t k = 0; k < c; ++k)
        dl[r * c + k] = weights[r] * (prob.at(r, k) - (k == labels[r] ? 1.0 : 0.0));
    }
    return push(Tensor({1}, loss), any(logits), [=, this](Tape&) {
      if (!needs(logits)) return;
      const double g = grad_ptr(self())[0];
      auto& gl = grad_ref(logits.id);
      for (std::size_t i = 0; i < gl.size(); ++i) gl[i] += g * dl[i];
    });
  }

  // ---- parameterised layers ---------------------------------------------

  /// x W + b as one node; same arithmetic as matmul followed by add_bias.
  Var linear(Var x, LinearParams& p) {
    const Var w = param(p.weight), b = param(p.bias);
    const Tensor& X = value(x);
    const Tensor& W = value(w);
    const Tensor& B = value(b);
    Tensor out = ctxdet::matmul(X, W);
    if (B.size() != W.cols())
      throw DimensionError("linear: bias " + shape_str(B.shape()) + " for weight " + shape_str(W.shape()));
    const std::size_t n = X.rows(), k = X.cols(), m = W.cols();
    double* o = out.data().data();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < m; ++c) o[r * m + c] += B[c];
    return push(std::move(out), true, [=, this](Tape&) {
      const double* g = grad_ptr(self());
      if (needs(x)) kernel::gemm_nt(n, m, k, g, value(w).data().data(), grad_ref(x.id).data(), true);
      kernel::gemm_tn(k, n, m, value(x).data().data(), g, grad_ref(w.id).data(), true);
      double* gb = grad_ref(b.id).data();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) gb[c] += g[r * m + c];
    });
  }

  Var mlp(Var x, Mlp& layers) {
    check_mlp_chain(layers, value(x).cols());
    Var h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      h = linear(h, layers[i]);
      if (i + 1 < layers.size()) h = relu(h);
    }
    return h;
  }

  Var layer_norm(Var x, LayerNormParams& p) {
    return layer_norm(x, param(p.gain), param(p.bias), p.eps);
  }

 private:
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

  struct Node {
    Tensor own;
    const Tensor* ref = nullptr;
    Tensor* param = nullptr;
    std::vector<double> grad;
    bool needs_grad = false;
    std::function<void(Tape&)> backward;
  };

  Var push(Tensor value, bool needs_grad, std::function<void(Tape&)> bw) {
    Node n;
    n.own = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  // Id of the node whose backward closure is currently running.
  Var self() const { return Var{current_}; }

  bool needs(Var v) const { return nodes_[v.id].needs_grad; }
  bool any(Var a) const { return needs(a); }
  bool any(Var a, Var b) const { return needs(a) || needs(b); }
  bool any(Var a, Var b, Var c) const { return needs(a) || needs(b) || needs(c); }

  std::vector<double>& grad_ref(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign((n.ref ? *n.ref : n.own).size(), 0.0);
    return n.grad;
  }
  const double* grad_ptr(Var v) { return grad_ref(v.id).data(); }

  void add_into(Var v, const double* g, double s) {
    if (!needs(v)) return;
    Node& n = nodes_[v.id];
    if (n.grad.empty() && s == 1.0) {  // first contribution: copy instead of zero-fill + add
      n.grad.assign(g, g + (n.ref ? *n.ref : n.own).size());
      return;
    }
    auto& gv = grad_ref(v.id);
    for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += s * g[i];
  }

  std::deque<Node> nodes_;  // deque: value() references survive later ops
  std::unordered_map<const Tensor*, std::size_t> param_ids_;
  std::size_t current_ = kNone;
};

}  // namespace ctxdet
