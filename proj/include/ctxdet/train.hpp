#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctxdet/model.hpp"
#include "ctxdet/pipeline.hpp"

namespace ctxdet {

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t epoch)
      : std::runtime_error(what + " (epoch " + std::to_string(epoch) + ")"), epoch_(epoch) {}
  std::size_t epoch() const { return epoch_; }

 private:
  std::size_t epoch_;
};

class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// One update of every tensor in `params` from its accumulated gradient.
  void step(ModelParams& params, double lr) {
    ++t_;
    std::size_t slot = 0;
    const double c1 = 1.0 - std::pow(beta1_, double(t_));
    const double c2 = 1.0 - std::pow(beta2_, double(t_));
    params.for_each([&](const std::string&, Tensor& w) {
      if (m_.size() <= slot) {
        m_.emplace_back(w.size(), 0.0);
        v_.emplace_back(w.size(), 0.0);
      }
      auto& m = m_[slot];
      auto& v = v_[slot];
      const auto& g = w.grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
        w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
      ++slot;
    });
  }

 private:
  double beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

inline double learning_rate_at(const TrainConfig& tc, std::size_t epoch) {
  double lr = tc.learning_rate;
  for (std::size_t e : tc.decay_epochs)
    if (epoch >= e) lr *= tc.decay_rate;
  return lr;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double learning_rate = 0.0;
  double mean_loss = 0.0;
  double vote = 0.0;
  double size = 0.0;
  std::vector<double> objectness, classification, residual;  // per stage
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochRecord> history;
};

/// Called after every epoch; returning false stops training early.
using EpochCallback = std::function<bool(const EpochRecord&)>;

/// Mini-batch Adam over per-scene losses. Scene order is reshuffled every
/// epoch from train.seed; gradients are averaged over each batch and clipped
/// by global norm. The run is deterministic given (scenes, config).
inline TrainResult train_toy(const std::vector<Scene>& scenes, const ModelConfig& mc, const TrainConfig& tc,
                             const EpochCallback& on_epoch = {}) {
  if (scenes.empty()) throw ArgumentError("train_toy: dataset is empty");
  mc.validate();
  tc.validate();
  TrainResult res{init_model(mc, stream_seed(tc.seed, 0)), {}};
  ModelParams& params = res.params;
  Adam adam;
  std::mt19937_64 rng(stream_seed(tc.seed, 1));
  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t stages = mc.cascade.stages();

  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = learning_rate_at(tc, epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.learning_rate = lr;
    rec.objectness.assign(stages, 0.0);
    rec.classification.assign(stages, 0.0);
    rec.residual.assign(stages, 0.0);

    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      const std::size_t end = std::min(order.size(), start + tc.batch_size);
      params.zero_grad();
      for (std::size_t b = start; b < end; ++b) {
        const Scene& scene = scenes[order[b]];
        Tape tape;
        ForwardPass fp = forward(tape, scene.points, params, mc);
        LossBreakdown lb;
        Var loss = scene_loss(tape, fp, scene, mc, tc, &lb);
        if (!std::isfinite(lb.total))
          throw TrainingError("non-finite loss on scene '" + scene.id + "'", epoch);
        tape.backward(loss);
        tape.accumulate_param_grads();
        rec.mean_loss += lb.total;
        rec.vote += lb.vote;
        rec.size += lb.size;
        for (std::size_t t = 0; t < stages; ++t) {
          rec.objectness[t] += lb.objectness[t];
          rec.classification[t] += lb.classification[t];
          rec.residual[t] += lb.residual[t];
        }
      }
      const double inv = 1.0 / double(end - start);
      double norm2 = 0.0;
      params.for_each([&](const std::string&, Tensor& w) {
        for (double& g : w.grad()) {
          g *= inv;
          norm2 += g * g;
        }
      });
      if (!std::isfinite(norm2)) throw TrainingError("non-finite gradient", epoch);
      if (tc.grad_clip > 0 && std::sqrt(norm2) > tc.grad_clip) {
        const double s = tc.grad_clip / std::sqrt(norm2);
        params.for_each([&](const std::string&, Tensor& w) {
          for (double& g : w.grad()) g *= s;
        });
      }
      if (lr > 0.0) adam.step(params, lr);
    }
    const double n = double(scenes.size());
    rec.mean_loss /= n;
    rec.vote /= n;
    rec.size /= n;
    for (std::size_t t = 0; t < stages; ++t) {
      rec.objectness[t] /= n;
      rec.classification[t] /= n;
      rec.residual[t] /= n;
    }
    res.history.push_back(rec);
    if (on_epoch && !on_epoch(rec)) break;
  }
  params.for_each([](const std::string&, Tensor& w) { w.drop_grad(); });
  return res;
}

}  // namespace ctxdet
