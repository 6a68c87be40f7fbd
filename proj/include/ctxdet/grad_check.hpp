#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ctxdet/tape.hpp"

namespace ctxdet {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  bool passed = false;
  std::string failure;  // set when a non-finite value was met
};

/// Builds a scalar loss on `tape` from leaves holding the inputs.
using TapeFn = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Relative error with a floor on the denominator so gradients that are
/// zero analytically (e.g. sum of a softmax row) compare on an absolute scale.
inline double grad_rel_error(double analytic, double numeric, double floor = 1e-3) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Central finite differences with step h against the tape's gradient.
inline GradCheckReport grad_check(const TapeFn& f, const std::vector<Tensor>& inputs, double tol,
                                  double h = 1e-5) {
  GradCheckReport rep;
  auto evaluate = [&](const std::vector<Tensor>& xs, std::vector<std::vector<double>>* grads) {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& x : xs) leaves.push_back(tape.leaf(x));
    Var loss = f(tape, leaves);
    const double v = tape.value(loss)[0];
    if (grads) {
      tape.backward(loss);
      for (Var l : leaves) grads->push_back(tape.grad(l));
    }
    return v;
  };

  std::vector<std::vector<double>> analytic;
  const double base = evaluate(inputs, &analytic);
  if (!std::isfinite(base)) {
    rep.failure = "non-finite loss at the unperturbed point";
    return rep;
  }
  std::vector<Tensor> work = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      if (!std::isfinite(analytic[k][i])) {
        std::ostringstream os;
        os << "non-finite analytic gradient at input " << k << " element " << i;
        rep.failure = os.str();
        return rep;
      }
      const double x0 = work[k][i];
      work[k][i] = x0 + h;
      const double up = evaluate(work, nullptr);
      work[k][i] = x0 - h;
      const double down = evaluate(work, nullptr);
      work[k][i] = x0;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        std::ostringstream os;
        os << "non-finite loss when perturbing input " << k << " element " << i;
        rep.failure = os.str();
        return rep;
      }
      const double numeric = (up - down) / (2.0 * h);
      const double err = grad_rel_error(analytic[k][i], numeric);
      if (err > rep.max_rel_error || (k == 0 && i == 0)) {
        rep.max_rel_error = err;
        rep.worst_input = k;
        rep.worst_index = i;
        rep.analytic = analytic[k][i];
        rep.numeric = numeric;
      }
    }
  }
  rep.passed = rep.max_rel_error < tol;
  return rep;
}

/// Same comparison over selected scalars of externally owned state:
/// `eval` recomputes the loss, `probes` point at the perturbed scalars and
/// `analytic` holds their gradients in the same order.
inline GradCheckReport grad_check_probes(const std::function<double()>& eval,
                                         const std::vector<double*>& probes,
                                         const std::vector<double>& analytic, double tol,
                                         double h = 1e-5) {
  GradCheckReport rep;
  for (std::size_t i = 0; i < probes.size(); ++i) {
    double& x = *probes[i];
    const double x0 = x;
    x = x0 + h;
    const double up = eval();
    x = x0 - h;
    const double down = eval();
    x = x0;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      rep.failure = "non-finite loss when perturbing probe " + std::to_string(i);
      return rep;
    }
    const double numeric = (up - down) / (2.0 * h);
    const double err = grad_rel_error(analytic[i], numeric);
    if (err > rep.max_rel_error || i == 0) {
      rep.max_rel_error = err;
      rep.worst_index = i;
      rep.analytic = analytic[i];
      rep.numeric = numeric;
    }
  }
  rep.passed = rep.max_rel_error < tol;
  return rep;
}

/// Tensor of the given shape with entries uniform in [lo, hi).
inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.data()) v = u(rng);
  return t;
}

/// Reduce an arbitrary tensor node to a scalar via a fixed random projection,
/// so every output element contributes a distinct weight to the gradient.
inline Var project_to_scalar(Tape& tape, Var out, std::mt19937_64& rng) {
  Tensor w = random_tensor(tape.value(out).shape(), rng);
  return tape.sum(tape.mul(out, tape.constant(std::move(w))));
}

}  // namespace ctxdet
