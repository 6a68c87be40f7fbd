#pragma once

// Randomised finite-difference checks for every differentiable building
// block: the tensor ops, the context layers and the loss heads.

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "ctxdet/context.hpp"
#include "ctxdet/grad_check.hpp"
#include "ctxdet/scene.hpp"

namespace ctxdet {

struct GradSuiteRow {
  std::string op;
  std::size_t trials = 0;
  std::size_t failures = 0;
  double max_rel_error = 0.0;
  double seconds = 0.0;
  std::string first_failure;

  bool passed() const { return trials > 0 && failures == 0; }
};

struct GradSuiteOptions {
  std::size_t trials = 100;
  double tol = 1e-4;
  double h = 1e-5;
  std::uint64_t seed = 2024;
};

/// Checks d(loss)/d(input) for every leaf and d(loss)/d(param) for every
/// listed parameter tensor. `f` must rebuild the graph from scratch.
inline GradCheckReport check_inputs_and_params(const TapeFn& f, std::vector<Tensor> inputs,
                                               const std::vector<Tensor*>& params, double tol, double h) {
  auto run = [&](bool with_grad, std::vector<double>* analytic) {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& x : inputs) leaves.push_back(tape.leaf(x));
    Var loss = f(tape, leaves);
    const double v = tape.value(loss)[0];
    if (with_grad) {
      for (Tensor* p : params) p->drop_grad();
      tape.backward(loss);
      tape.accumulate_param_grads();
      for (Var l : leaves) {
        const auto g = tape.grad(l);
        analytic->insert(analytic->end(), g.begin(), g.end());
      }
      for (Tensor* p : params) {
        const auto& g = p->grad();
        analytic->insert(analytic->end(), g.begin(), g.end());
        p->drop_grad();
      }
    }
    return v;
  };
  std::vector<double> analytic;
  const double base = run(true, &analytic);
  GradCheckReport rep;
  if (!std::isfinite(base)) {
    rep.failure = "non-finite loss at the unperturbed point";
    return rep;
  }
  std::vector<double*> probes;
  for (auto& x : inputs)
    for (double& v : x.data()) probes.push_back(&v);
  for (Tensor* p : params)
    for (double& v : p->data()) probes.push_back(&v);
  return grad_check_probes([&] { return run(false, nullptr); }, probes, analytic, tol, h);
}

namespace detail {

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline void randomize(Tensor& t, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.data()) v = u(rng);
}

inline void randomize(Mlp& m, std::mt19937_64& rng) {
  for (auto& l : m) {
    randomize(l.weight, rng);
    randomize(l.bias, rng, -0.5, 0.5);
  }
}

inline void randomize(AttentionParams& a, std::mt19937_64& rng) {
  for (auto* l : {&a.theta, &a.phi, &a.g}) {
    randomize(l->weight, rng);
    randomize(l->bias, rng, -0.5, 0.5);
  }
  randomize(a.ln.gain, rng, 0.5, 1.5);
  randomize(a.ln.bias, rng, -0.5, 0.5);
}

inline void collect(Mlp& m, std::vector<Tensor*>& out) {
  for (auto& l : m) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
}

inline void collect(AttentionParams& a, std::vector<Tensor*>& out) {
  for (auto* l : {&a.theta, &a.phi, &a.g}) {
    out.push_back(&l->weight);
    out.push_back(&l->bias);
  }
  out.push_back(&a.ln.gain);
  out.push_back(&a.ln.bias);
}

/// Random ragged segmentation of n rows into non-empty segments.
inline std::vector<std::size_t> random_offsets(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> off{0};
  while (off.back() < n) off.push_back(std::min(n, off.back() + pick(rng, 1, 3)));
  return off;
}

}  // namespace detail

/// One trial: returns the report for a freshly drawn fixture.
using GradTrial = std::function<GradCheckReport(std::mt19937_64&, double tol, double h)>;

struct GradSuiteCase {
  std::string op;
  GradTrial trial;
};

inline std::vector<GradSuiteCase> grad_suite_cases() {
  using detail::pick;
  std::vector<GradSuiteCase> cases;

  cases.push_back({"matmul", [](std::mt19937_64& rng, double tol, double h) {
                     const std::size_t n = pick(rng, 1, 5), k = pick(rng, 1, 5), m = pick(rng, 1, 5);
                     Tensor w = random_tensor({n, m}, rng);
                     return check_inputs_and_params(
                         [w](Tape& t, const std::vector<Var>& x) {
                           return t.sum(t.mul(t.matmul(x[0], x[1]), t.constant(w)));
                         },
                         {random_tensor({n, k}, rng), random_tensor({k, m}, rng)}, {}, tol, h);
                   }});

  cases.push_back({"softmax", [](std::mt19937_64& rng, double tol, double h) {
                     const std::size_t n = pick(rng, 1, 5), m = pick(rng, 1, 6);
                     Tensor w = random_tensor({n, m}, rng);
                     return check_inputs_and_params(
                         [w](Tape& t, const std::vector<Var>& x) {
                           return t.sum(t.mul(t.row_softmax(x[0]), t.constant(w)));
                         },
                         {random_tensor({n, m}, rng, -3.0, 3.0)}, {}, tol, h);
                   }});

  cases.push_back({"layer_norm", [](std::mt19937_64& rng, double tol, double h) {
                     const std::size_t n = pick(rng, 1, 4), d = pick(rng, 2, 6);
                     auto ln = std::make_shared<LayerNormParams>(d);
                     detail::randomize(ln->gain, rng, 0.5, 1.5);
                     detail::randomize(ln->bias, rng, -0.5, 0.5);
                     Tensor w = random_tensor({n, d}, rng);
                     return check_inputs_and_params(
                         [ln, w](Tape& t, const std::vector<Var>& x) {
                           return t.sum(t.mul(t.layer_norm(x[0], *ln), t.constant(w)));
                         },
                         {random_tensor({n, d}, rng)}, {&ln->gain, &ln->bias}, tol, h);
                   }});

  cases.push_back({"max_pool_set", [](std::mt19937_64& rng, double tol, double h) {
                     const std::size_t n = pick(rng, 1, 8), d = pick(rng, 1, 5);
                     const auto offsets = detail::random_offsets(n, rng);
                     Tensor w1 = random_tensor({1, d}, rng);
                     Tensor w2 = random_tensor({offsets.size() - 1, d}, rng);
                     return check_inputs_and_params(
                         [w1, w2, offsets](Tape& t, const std::vector<Var>& x) {
                           Var a = t.sum(t.mul(t.max_pool_rows(x[0]), t.constant(w1)));
                           Var b = t.sum(t.mul(t.segment_max_pool(x[0], offsets), t.constant(w2)));
                           return t.add(a, b);
                         },
                         {random_tensor({n, d}, rng)}, {}, tol, h);
                   }});

  cases.push_back({"mlp", [](std::mt19937_64& rng, double tol, double h) {
                     std::vector<std::size_t> widths{pick(rng, 1, 5)};
                     const std::size_t layers = pick(rng, 1, 3);
                     for (std::size_t i = 0; i < layers; ++i) widths.push_back(pick(rng, 1, 6));
                     auto m = std::make_shared<Mlp>(make_mlp(widths));
                     detail::randomize(*m, rng);
                     const std::size_t n = pick(rng, 1, 5);
                     Tensor w = random_tensor({n, widths.back()}, rng);
                     std::vector<Tensor*> params;
                     detail::collect(*m, params);
                     return check_inputs_and_params(
                         [m, w](Tape& t, const std::vector<Var>& x) {
                           return t.sum(t.mul(t.mlp(x[0], *m), t.constant(w)));
                         },
                         {random_tensor({n, widths.front()}, rng)}, params, tol, h);
                   }});

  cases.push_back({"gcm", [](std::mt19937_64& rng, double tol, double h) {
                     const std::size_t n = pick(rng, 1, 6), d = pick(rng, 2, 5);
                     auto a = std::make_shared<AttentionParams>(d);
                     detail::randomize(*a, rng);
                     Tensor w = random_tensor({n, d}, rng);
                     std::vector<Tensor*> params;
                     detail::collect(*a, params);
                     const double scale = 1.0 / std::sqrt(double(d));
                     return check_inputs_and_params(
                         [a, w, scale](Tape& t, const std::vector<Var>& x) {
                           return t.sum(t.mul(gcm(t, x[0], *a, scale), t.constant(w)));
                         },
                         {random_tensor({n, d}, rng)}, params, tol, h);
                   }});

  cases.push_back({"pcm", [](std::mt19937_64& rng, double tol, double h) {
                     const std::size_t n = pick(rng, 1, 7), din = pick(rng, 2, 5), d = pick(rng, 2, 4);
                     const bool across = pick(rng, 0, 1) == 1;
                     auto p = std::make_shared<PcmParams>();
                     p->mlp = make_mlp({din, d, d});
                     p->attn = AttentionParams(d);
                     detail::randomize(p->mlp, rng);
                     detail::randomize(p->attn, rng);
                     const auto offsets = detail::random_offsets(n, rng);
                     Tensor w = random_tensor({offsets.size() - 1, d}, rng);
                     std::vector<Tensor*> params;
                     detail::collect(p->mlp, params);
                     detail::collect(p->attn, params);
                     const double scale = 1.0 / std::sqrt(double(d));
                     return check_inputs_and_params(
                         [p, w, offsets, scale, across](Tape& t, const std::vector<Var>& x) {
                           PcmOutput o = pcm(t, ClusterInputs{x[0], offsets}, *p, scale, true, across);
                           return t.sum(t.mul(o.k_p, t.constant(w)));
                         },
                         {random_tensor({n, din}, rng)}, params, tol, h);
                   }});

  cases.push_back({"hcm", [](std::mt19937_64& rng, double tol, double h) {
                     const std::size_t P = pick(rng, 1, 5), N = pick(rng, 1, 4), d = pick(rng, 1, 4);
                     auto m = std::make_shared<Mlp>(make_mlp({2 * d, d, d}));
                     detail::randomize(*m, rng);
                     Tensor w = random_tensor({N, d}, rng);
                     std::vector<Tensor*> params;
                     detail::collect(*m, params);
                     return check_inputs_and_params(
                         [m, w](Tape& t, const std::vector<Var>& x) {
                           return t.sum(t.mul(hcm(t, x[0], x[1], x[2], *m), t.constant(w)));
                         },
                         {random_tensor({P, d}, rng), random_tensor({N, d}, rng), random_tensor({N, d}, rng)},
                         params, tol, h);
                   }});

  cases.push_back({"smooth_l1", [](std::mt19937_64& rng, double tol, double h) {
                     const std::size_t n = pick(rng, 1, 6), d = pick(rng, 1, 6);
                     Tensor target = random_tensor({n, d}, rng);
                     std::vector<double> w(n);
                     for (double& v : w) v = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
                     const double beta = std::uniform_real_distribution<double>(0.05, 0.5)(rng);
                     return check_inputs_and_params(
                         [target, w, beta](Tape& t, const std::vector<Var>& x) {
                           return t.smooth_l1(x[0], target, w, beta);
                         },
                         {random_tensor({n, d}, rng)}, {}, tol, h);
                   }});

  cases.push_back({"bce_with_logits", [](std::mt19937_64& rng, double tol, double h) {
                     const std::size_t n = pick(rng, 1, 8);
                     std::vector<double> targets(n), w(n);
                     for (std::size_t i = 0; i < n; ++i) {
                       targets[i] = double(pick(rng, 0, 1));
                       w[i] = std::uniform_real_distribution<double>(0.1, 1.0)(rng);
                     }
                     return check_inputs_and_params(
                         [targets, w](Tape& t, const std::vector<Var>& x) { return t.bce_with_logits(x[0], targets, w); },
                         {random_tensor({n, 1}, rng, -4.0, 4.0)}, {}, tol, h);
                   }});

  cases.push_back({"softmax_cross_entropy", [](std::mt19937_64& rng, double tol, double h) {
                     const std::size_t n = pick(rng, 1, 6), c = pick(rng, 2, 5);
                     std::vector<std::size_t> labels(n);
                     std::vector<double> w(n);
                     for (std::size_t i = 0; i < n; ++i) {
                       labels[i] = pick(rng, 0, c - 1);
                       w[i] = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
                     }
                     return check_inputs_and_params(
                         [labels, w](Tape& t, const std::vector<Var>& x) {
                           return t.softmax_cross_entropy(x[0], labels, w);
                         },
                         {random_tensor({n, c}, rng, -3.0, 3.0)}, {}, tol, h);
                   }});
  return cases;
}

inline std::vector<GradSuiteRow> run_grad_suite(const GradSuiteOptions& opt = {}) {
  std::vector<GradSuiteRow> rows;
  const auto cases = grad_suite_cases();
  for (std::size_t c = 0; c < cases.size(); ++c) {
    GradSuiteRow row;
    row.op = cases[c].op;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < opt.trials; ++i) {
      std::mt19937_64 rng(stream_seed(opt.seed, (std::uint64_t(c) << 32) | i));
      const GradCheckReport r = cases[c].trial(rng, opt.tol, opt.h);
      ++row.trials;
      row.max_rel_error = std::max(row.max_rel_error, r.max_rel_error);
      if (!r.passed) {
        if (row.failures++ == 0)
          row.first_failure = "trial " + std::to_string(i) +
                              (r.failure.empty() ? ": rel error " + std::to_string(r.max_rel_error) : ": " + r.failure);
      }
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(row);
  }
  return rows;
}

}  // namespace ctxdet
