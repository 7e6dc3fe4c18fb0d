#pragma once

// Multi-model experiments: the history-mode comparison and the ablation
// sweeps. Every model starts from the same trained no-history weights; rows
// differ only in the setting under study.

#include <string>
#include <vector>

#include "whc/config.hpp"
#include "whc/evaluation.hpp"
#include "whc/training.hpp"

namespace whc {

/// Copies every tensor of `src` whose name and shape also exist in `dst`.
/// Returns how many tensors were copied.
template <typename T>
std::size_t copy_shared_parameters(ModelParams<T>& src, ModelParams<T>& dst) {
  std::map<std::string, Tensor<T>> by_name;
  for (auto& p : src.parameters()) by_name.emplace(p.name, p.tensor);
  std::size_t n = 0;
  for (auto& p : dst.parameters()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end() || it->second.shape() != p.tensor.shape()) continue;
    std::copy(it->second.data().begin(), it->second.data().end(), p.tensor.mutable_data().begin());
    ++n;
  }
  return n;
}

template <typename T>
Report evaluate_report(const ModelParams<T>& params, const ModelConfig& cfg,
                       std::span<const Episode> episodes, const std::string& label,
                       const std::function<void(const std::string&)>& on_warning = {}) {
  auto results = evaluate(params, cfg, episodes);
  std::vector<std::string> ids;
  for (const auto& ep : episodes) ids.push_back(ep.task_id);
  auto r = make_report(label, results, token_accounting(cfg, episodes), on_warning, ids);
  r.metadata["history"] = encoding_name(cfg.history);
  r.metadata["max_histories"] = std::to_string(cfg.max_histories());
  r.metadata["queries"] = std::to_string(cfg.compressor.queries);
  r.metadata["fusion"] = cfg.compressor.fusion ? "on" : "off";
  return r;
}

/// Two-stage training of `model` initialized from the no-history weights.
template <typename T>
ModelParams<T> train_from_base(ModelParams<T>& base, const ModelConfig& model,
                               const RunConfig& cfg, const Dataset& ds, TrainingLog* log = nullptr,
                               const LogSink& sink = {}) {
  auto params = init_model<T>(model, substream_seed(cfg.seed, "init"));
  copy_shared_parameters(base, params);
  auto res = run_training(params, model, cfg.schedule, ds.train, ds.val, sink);
  if (log) log->insert(log->end(), res.log.begin(), res.log.end());
  return params;
}

/// none / truncate / prune / ours under one seed.
template <typename T>
std::vector<Report> compare_modes(const RunConfig& cfg, const Dataset& ds,
                                  const LogSink& sink = {},
                                  const std::vector<HistoryEncoding>& modes = {
                                      HistoryEncoding::none, HistoryEncoding::truncate,
                                      HistoryEncoding::prune, HistoryEncoding::compressor}) {
  auto none_cfg = cfg.model;
  none_cfg.history = HistoryEncoding::none;
  auto base = train_base_model<T>(cfg.model, cfg.seed, cfg.schedule, ds.train, ds.val, nullptr, sink);
  std::vector<Report> rows;
  for (auto mode : modes) {
    auto m = cfg.model;
    m.history = mode;
    if (mode == HistoryEncoding::none) {
      rows.push_back(evaluate_report(base, m, ds.test, encoding_name(mode)));
      continue;
    }
    auto params = train_from_base(base, m, cfg, ds, nullptr, sink);
    rows.push_back(evaluate_report(params, m, ds.test, encoding_name(mode)));
  }
  return rows;
}

enum class AblationAxis { history_count, compressed_length, fusion };

inline const char* axis_name(AblationAxis a) {
  switch (a) {
    case AblationAxis::history_count: return "history_count";
    case AblationAxis::compressed_length: return "compressed_length";
    case AblationAxis::fusion: return "fusion";
  }
  return "?";
}

inline AblationAxis parse_axis(const std::string& s) {
  if (s == "history_count") return AblationAxis::history_count;
  if (s == "compressed_length") return AblationAxis::compressed_length;
  if (s == "fusion") return AblationAxis::fusion;
  throw Error("unknown ablation axis '" + s + "'");
}

inline std::vector<std::size_t> default_axis_values(AblationAxis a) {
  switch (a) {
    case AblationAxis::history_count: return {0, 1, 2, 3, 4, 5};
    case AblationAxis::compressed_length: return {2, 4, 8, 16};
    case AblationAxis::fusion: return {1, 0};
  }
  return {};
}

/// One trained model per axis value; history_count 0 is the no-history model.
template <typename T>
std::vector<Report> run_ablation(AblationAxis axis, std::vector<std::size_t> values,
                                 const RunConfig& cfg, const Dataset& ds,
                                 const LogSink& sink = {}) {
  if (values.empty()) values = default_axis_values(axis);
  for (auto v : values) {
    if (axis == AblationAxis::history_count && cfg.paper_strict && v > 5) {
      throw ConfigError("history_count " + std::to_string(v) + " exceeds 5 in paper_strict mode");
    }
    if (axis == AblationAxis::compressed_length && v == 0) {
      throw ConfigError("compressed_length values must be >= 1");
    }
    if (axis == AblationAxis::fusion && v > 1) throw ConfigError("fusion values must be 0 or 1");
  }
  auto base = train_base_model<T>(cfg.model, cfg.seed, cfg.schedule, ds.train, ds.val, nullptr, sink);
  std::vector<Report> rows;
  for (auto v : values) {
    auto m = cfg.model;
    m.history = HistoryEncoding::compressor;
    std::string label;
    switch (axis) {
      case AblationAxis::history_count:
        m.compressor.max_histories = v;
        label = std::to_string(v);
        break;
      case AblationAxis::compressed_length:
        m.compressor.queries = v;
        label = std::to_string(v);
        break;
      case AblationAxis::fusion:
        m.compressor.fusion = v == 1;
        label = v == 1 ? "with fusion" : "without fusion";
        break;
    }
    if (axis == AblationAxis::history_count && v == 0) {
      m.history = HistoryEncoding::none;
      rows.push_back(evaluate_report(base, m, ds.test, label));
      continue;
    }
    auto params = train_from_base(base, m, cfg, ds, nullptr, sink);
    rows.push_back(evaluate_report(params, m, ds.test, label));
  }
  return rows;
}

}  // namespace whc
