#pragma once

// Two-stage training. Stage 1 updates only the compressor, the history gates
// and the history-index embeddings; stage 2 updates everything. Adam with
// bias correction:
//
//   m <- b1 m + (1 - b1) g          v <- b2 v + (1 - b2) g^2
//   p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
//
// Each stage starts from fresh moments. A batch is a set of whole episodes;
// the loss is the mean over their scored steps.

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "whc/agent.hpp"
#include "whc/env.hpp"
#include "whc/evaluation.hpp"

namespace whc {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  int stage = 2;
  double lr = 1e-3;
  std::size_t batch_size = 16;  // episodes
  std::size_t max_steps = 100;
  AdamConfig adam;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;  // 0: evaluate only after the last step

  void validate() const {
    if (stage != 1 && stage != 2) throw Error("train: stage must be 1 or 2");
    if (!(lr > 0)) throw Error("train: learning rate must be positive");
    if (batch_size == 0) throw Error("train: batch size must be >= 1");
    if (!(adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1)) {
      throw Error("train: Adam betas must lie in [0, 1)");
    }
    if (!(adam.eps > 0)) throw Error("train: Adam eps must be positive");
  }
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

template <typename T>
struct OptimizerState {
  struct Moments {
    std::vector<T> m, v;
  };
  std::map<std::string, Moments> moments;
  std::size_t step = 0;
};

inline bool in_stage1_set(const std::string& name) {
  return name.rfind("compressor.", 0) == 0 || name == "history_index" ||
         name.find(".gate.") != std::string::npos;
}

template <typename T>
ParamList<T> trainable_set(int stage, ModelParams<T>& params) {
  if (stage != 1 && stage != 2) throw Error("trainable_set: stage must be 1 or 2");
  auto all = params.parameters();
  if (stage == 2) return all;
  ParamList<T> out;
  for (auto& p : all)
    if (in_stage1_set(p.name)) out.push_back(p);
  return out;
}

/// One Adam update of `subset`. Any non-finite gradient aborts before a
/// single value changes.
template <typename T>
void optimizer_step(ParamList<T>& subset, const GradientMap<T>& grads, OptimizerState<T>& state,
                    const TrainConfig& cfg) {
  std::vector<const Tensor<T>*> g(subset.size());
  for (std::size_t i = 0; i < subset.size(); ++i) {
    auto it = grads.find(subset[i].tensor.id());
    if (it == grads.end()) throw Error("optimizer: no gradient for " + subset[i].name);
    if (it->second.shape() != subset[i].tensor.shape()) {
      throw ShapeError("optimizer: gradient shape mismatch for " + subset[i].name);
    }
    for (T x : it->second.data()) {
      if (!std::isfinite(x)) throw DivergenceError("non-finite gradient in " + subset[i].name);
    }
    g[i] = &it->second;
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const T b1 = static_cast<T>(cfg.adam.beta1), b2 = static_cast<T>(cfg.adam.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg.adam.beta1, t));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg.adam.beta2, t));
  const T lr = static_cast<T>(cfg.lr), eps = static_cast<T>(cfg.adam.eps);
  for (std::size_t i = 0; i < subset.size(); ++i) {
    auto value = subset[i].tensor.mutable_data();
    auto grad = g[i]->data();
    auto& mo = state.moments[subset[i].name];
    if (mo.m.size() != value.size()) {
      mo.m.assign(value.size(), T(0));
      mo.v.assign(value.size(), T(0));
    }
    for (std::size_t k = 0; k < value.size(); ++k) {
      mo.m[k] = b1 * mo.m[k] + (T(1) - b1) * grad[k];
      mo.v[k] = b2 * mo.v[k] + (T(1) - b2) * grad[k] * grad[k];
      value[k] -= lr * (mo.m[k] / c1) / (std::sqrt(mo.v[k] / c2) + eps);
    }
  }
}

/// Sum over the scored steps of one episode; histories share one cache.
template <typename T>
std::pair<Tensor<T>, std::size_t> episode_loss(const Episode& ep, const ModelParams<T>& params,
                                               const ModelConfig& cfg) {
  HistoryCache<T> cache;
  std::vector<Tensor<T>> losses;
  for (std::size_t t = 0; t < ep.steps.size(); ++t) {
    if (!ep.steps[t].scored) continue;
    losses.push_back(step_loss(make_labeled_step(ep, t, cfg.max_histories()), params, cfg, &cache));
  }
  if (losses.empty()) return {Tensor<T>::scalar(T(0)), 0};
  return {sum(concat(losses, 0)), losses.size()};
}

struct LogRecord {
  int stage = 0;
  std::size_t step = 0;
  double loss = 0;
  std::optional<double> val_element_acc, val_step_acc;

  std::string line() const {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", loss);
    std::string s = "{\"stage\":" + std::to_string(stage) + ",\"step\":" + std::to_string(step) +
                    ",\"loss\":" + buf;
    if (val_element_acc) {
      std::snprintf(buf, sizeof buf, "%.6f", *val_element_acc);
      s += std::string(",\"val_element_acc\":") + buf;
      std::snprintf(buf, sizeof buf, "%.6f", *val_step_acc);
      s += std::string(",\"val_step_acc\":") + buf;
    }
    return s + "}";
  }
};

using TrainingLog = std::vector<LogRecord>;

/// Values of every parameter outside a stage's trainable set.
template <typename T>
std::map<std::string, std::vector<T>> frozen_snapshot(int stage, ModelParams<T>& params) {
  std::map<std::string, std::vector<T>> out;
  for (auto& p : params.parameters()) {
    if (stage == 1 && in_stage1_set(p.name)) continue;
    if (stage == 2) continue;
    out.emplace(p.name, std::vector<T>(p.tensor.data().begin(), p.tensor.data().end()));
  }
  return out;
}

namespace detail {

/// Marks parameters outside the trainable set as frozen for the lifetime of
/// the guard so no graph is recorded through them.
template <typename T>
class FreezeGuard {
 public:
  FreezeGuard(ModelParams<T>& params, int stage) : all_(params.parameters()) {
    for (auto& p : all_) {
      if (stage == 1 && !in_stage1_set(p.name)) p.tensor.set_requires_grad(false);
    }
  }
  ~FreezeGuard() {
    for (auto& p : all_) p.tensor.set_requires_grad(true);
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  ParamList<T> all_;
};

}  // namespace detail

using LogSink = std::function<void(const LogRecord&)>;

/// Runs one stage for cfg.max_steps optimizer steps over `train`.
template <typename T>
TrainingLog train_stage(ModelParams<T>& params, const ModelConfig& model_cfg,
                        const TrainConfig& cfg, std::span<const Episode> train,
                        std::span<const Episode> val = {}, const LogSink& sink = {}) {
  cfg.validate();
  TrainingLog log;
  if (cfg.max_steps == 0) return log;
  if (train.empty()) throw Error("train: empty training set");
  detail::FreezeGuard<T> freeze(params, cfg.stage);
  auto subset = trainable_set(cfg.stage, params);
  OptimizerState<T> state;

  std::vector<std::size_t> order(train.size());
  std::size_t cursor = order.size(), epoch = 0;
  const std::uint64_t shuffle_seed =
      substream_seed(substream_seed(cfg.seed, "shuffle"), static_cast<std::uint64_t>(cfg.stage));

  for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
    std::vector<const Episode*> batch;
    while (batch.size() < std::min(cfg.batch_size, train.size())) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), 0);
        SplitMix64 rng(substream_seed(shuffle_seed, epoch++));
        rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(&train[order[cursor++]]);
    }
    std::size_t total_steps = 0;
    for (auto* ep : batch) total_steps += ep->scored_steps();
    if (total_steps == 0) throw Error("train: batch has no scored steps");

    for (auto& p : subset) p.tensor.zero_grad();
    double loss_sum = 0;
    const std::string where = "stage " + std::to_string(cfg.stage) + " step " + std::to_string(step);
    for (auto* ep : batch) {
      std::pair<Tensor<T>, std::size_t> res;
      try {
        res = episode_loss(*ep, params, model_cfg);
      } catch (const NonFiniteError& e) {
        throw DivergenceError("loss diverged at " + where + ": " + e.what());
      }
      auto& [loss, n] = res;
      if (n == 0) continue;
      loss_sum += static_cast<double>(loss.item());
      if (!std::isfinite(loss.item())) throw DivergenceError("loss diverged at " + where);
      backward(scale(loss, T(1) / static_cast<T>(total_steps)));
    }
    GradientMap<T> grads;
    for (auto& p : subset) {
      auto g = p.tensor.grad();
      grads.emplace(p.tensor.id(),
                    g.empty() ? Tensor<T>::zeros(p.tensor.shape())
                              : Tensor<T>(p.tensor.shape(), std::vector<T>(g.begin(), g.end())));
    }
    optimizer_step(subset, grads, state, cfg);
    for (auto& p : subset) p.tensor.zero_grad();

    LogRecord rec{cfg.stage, step, loss_sum / static_cast<double>(total_steps), {}, {}};
    const bool eval_now =
        !val.empty() && ((cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.max_steps);
    if (eval_now) {
      auto results = evaluate(params, model_cfg, val);
      rec.val_element_acc = element_accuracy(results);
      rec.val_step_acc = step_accuracy(results);
    }
    if (sink) sink(rec);
    log.push_back(rec);
  }
  return log;
}

struct Schedule {
  TrainConfig base{2, 1e-3, 16, 300, {}, 0, 0};    // no-history model, all parameters
  TrainConfig stage1{1, 1e-3, 16, 200, {}, 0, 0};  // compressor, gates, history index
  TrainConfig stage2{2, 3e-4, 16, 300, {}, 0, 0};  // everything

  void set_seed(std::uint64_t seed) {
    base.seed = stage1.seed = stage2.seed = seed;
  }
};

template <typename T>
struct TrainResult {
  TrainingLog log;
  std::map<std::string, std::vector<T>> frozen_before, frozen_after;

  bool freeze_held() const { return frozen_before == frozen_after; }
};

/// Stage 1 then stage 2 on a model that already holds trained no-history
/// weights (or a fresh one).
template <typename T>
TrainResult<T> run_training(ModelParams<T>& params, const ModelConfig& model_cfg,
                            const Schedule& schedule, std::span<const Episode> train,
                            std::span<const Episode> val = {}, const LogSink& sink = {}) {
  if (train.empty()) throw Error("train: empty training set");
  TrainResult<T> out;
  out.frozen_before = frozen_snapshot(1, params);
  auto l1 = train_stage(params, model_cfg, schedule.stage1, train, val, sink);
  out.frozen_after = frozen_snapshot(1, params);
  if (!out.freeze_held()) throw Error("stage 1 modified a frozen parameter");
  auto l2 = train_stage(params, model_cfg, schedule.stage2, train, val, sink);
  out.log = std::move(l1);
  out.log.insert(out.log.end(), l2.begin(), l2.end());
  return out;
}

/// Trains the no-history model; its weights initialize every history mode.
template <typename T>
ModelParams<T> train_base_model(const ModelConfig& cfg, std::uint64_t seed, const Schedule& s,
                                std::span<const Episode> train, std::span<const Episode> val = {},
                                TrainingLog* log = nullptr, const LogSink& sink = {}) {
  auto base_cfg = cfg;
  base_cfg.history = HistoryEncoding::none;
  auto params = init_model<T>(cfg, substream_seed(seed, "init"));
  auto bc = s.base;
  bc.stage = 2;
  auto l = train_stage(params, base_cfg, bc, train, val, sink);
  if (log) log->insert(log->end(), l.begin(), l.end());
  return params;
}

}  // namespace whc
