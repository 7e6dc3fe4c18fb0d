#pragma once

// Step-level metrics (element / step accuracy, micro and per-task macro),
// history token accounting, and report rendering.

#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "whc/agent.hpp"
#include "whc/env.hpp"

namespace whc {

struct StepResult {
  std::string task_id;
  std::size_t step_index = 0;
  std::int32_t predicted_id = 0;
  Operation predicted_op = Operation::click;
  std::vector<std::int32_t> gold_ids;
  Operation gold_op = Operation::click;

  bool element_correct() const {
    return std::find(gold_ids.begin(), gold_ids.end(), predicted_id) != gold_ids.end();
  }
  bool step_correct() const { return element_correct() && predicted_op == gold_op; }
};

enum class Metric { element, step };

namespace detail {

inline bool correct(const StepResult& r, Metric m) {
  return m == Metric::element ? r.element_correct() : r.step_correct();
}

inline double micro(std::span<const StepResult> results, Metric m) {
  if (results.empty()) throw Error("accuracy of an empty result set");
  std::size_t hits = 0;
  for (const auto& r : results) hits += correct(r, m) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

}  // namespace detail

inline double element_accuracy(std::span<const StepResult> results) {
  return detail::micro(results, Metric::element);
}

inline double step_accuracy(std::span<const StepResult> results) {
  return detail::micro(results, Metric::step);
}

/// Mean over tasks of the per-task micro metric. Tasks named in `task_ids`
/// that have no results are left out, and `on_warning` hears about them.
inline double macro(Metric m, std::span<const StepResult> results,
                    std::span<const std::string> task_ids = {},
                    const std::function<void(const std::string&)>& on_warning = {}) {
  std::map<std::string, std::pair<std::size_t, std::size_t>> per_task;  // hits, steps
  for (const auto& r : results) {
    auto& [hits, steps] = per_task[r.task_id];
    hits += detail::correct(r, m) ? 1 : 0;
    ++steps;
  }
  for (const auto& id : task_ids) {
    if (!per_task.count(id) && on_warning) on_warning("task " + id + " has no scored steps; excluded from macro average");
  }
  if (per_task.empty()) throw Error("macro accuracy of an empty result set");
  double total = 0;
  for (const auto& [id, hs] : per_task)
    total += static_cast<double>(hs.first) / static_cast<double>(hs.second);
  return total / static_cast<double>(per_task.size());
}

struct TokenStats {
  double mean = 0;
  double stddev = 0;  // population
  std::size_t max = 0;
  std::size_t histories = 0;

  /// "mean±std" with integral values printed without decimals.
  std::string formatted() const {
    auto fmt = [](double v) {
      char buf[32];
      if (v == std::floor(v)) {
        std::snprintf(buf, sizeof buf, "%.0f", v);
      } else {
        std::snprintf(buf, sizeof buf, "%.1f", v);
      }
      return std::string(buf);
    };
    return fmt(mean) + "\xC2\xB1" + fmt(stddev);
  }
};

inline TokenStats token_stats(const std::vector<std::size_t>& counts) {
  TokenStats s;
  s.histories = counts.size();
  if (counts.empty()) return s;
  double sum = 0;
  for (auto c : counts) {
    sum += static_cast<double>(c);
    s.max = std::max(s.max, c);
  }
  s.mean = sum / static_cast<double>(counts.size());
  double var = 0;
  for (auto c : counts) var += (static_cast<double>(c) - s.mean) * (static_cast<double>(c) - s.mean);
  s.stddev = std::sqrt(var / static_cast<double>(counts.size()));
  return s;
}

/// Encoder-consumed tokens per history instance over every scored step.
inline TokenStats token_accounting(const ModelConfig& cfg, std::span<const Episode> episodes) {
  std::vector<std::size_t> counts;
  for (const auto& ep : episodes) {
    for (std::size_t t = 0; t < ep.steps.size(); ++t) {
      if (!ep.steps[t].scored) continue;
      auto ex = make_labeled_step(ep, t, cfg.max_histories());
      const auto& hs = ex.input.histories;
      switch (cfg.history) {
        case HistoryEncoding::none:
          counts.insert(counts.end(), hs.size(), 0);
          break;
        case HistoryEncoding::compressor:
          counts.insert(counts.end(), hs.size(), cfg.compressor.queries);
          break;
        default:
          for (const auto& s : baseline_encode(cfg.history, hs, cfg.baseline))
            counts.push_back(s.size());
      }
    }
  }
  return token_stats(counts);
}

/// Teacher-forced predictions on every scored step.
template <typename T>
std::vector<StepResult> evaluate(const ModelParams<T>& params, const ModelConfig& cfg,
                                 std::span<const Episode> episodes) {
  NoGradGuard guard;
  std::vector<StepResult> out;
  for (const auto& ep : episodes) {
    HistoryCache<T> cache;
    for (std::size_t t = 0; t < ep.steps.size(); ++t) {
      if (!ep.steps[t].scored) continue;
      auto ex = make_labeled_step(ep, t, cfg.max_histories());
      auto pred = predict(ex.input, params, cfg, &cache);
      out.push_back({ep.task_id, t, pred.element_id, pred.operation, ex.gold_ids, ex.gold_op});
    }
  }
  return out;
}

struct Report {
  std::string mode;
  double element_acc = 0, macro_element_acc = 0, step_acc = 0, macro_step_acc = 0;
  TokenStats tokens;
  std::size_t steps = 0, tasks = 0;
  std::map<std::string, std::string> metadata;
};

inline Report make_report(const std::string& mode, std::span<const StepResult> results,
                          const TokenStats& tokens,
                          const std::function<void(const std::string&)>& on_warning = {},
                          std::span<const std::string> task_ids = {}) {
  Report r;
  r.mode = mode;
  r.element_acc = element_accuracy(results);
  r.step_acc = step_accuracy(results);
  r.macro_element_acc = macro(Metric::element, results, task_ids, on_warning);
  r.macro_step_acc = macro(Metric::step, results, task_ids, {});
  r.tokens = tokens;
  r.steps = results.size();
  std::set<std::string> ids;
  for (const auto& x : results) ids.insert(x.task_id);
  r.tasks = ids.size();
  return r;
}

inline std::string format_fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

/// Aligned plain-text table, accuracies in percent.
inline std::string report_table(const std::vector<Report>& rows, const std::string& label = "mode") {
  std::vector<std::vector<std::string>> cells{
      {label, "Element Acc", "Macro Ele Acc", "Step Acc", "Macro Step Acc", "tokens/history",
       "max tokens"}};
  for (const auto& r : rows) {
    cells.push_back({r.mode, format_fixed(100 * r.element_acc, 2),
                     format_fixed(100 * r.macro_element_acc, 2), format_fixed(100 * r.step_acc, 2),
                     format_fixed(100 * r.macro_step_acc, 2), r.tokens.formatted(),
                     std::to_string(r.tokens.max)});
  }
  auto width_of = [](const std::string& s) {
    std::size_t n = 0;
    for (unsigned char c : s) n += (c & 0xC0) != 0x80;  // count code points
    return n;
  };
  std::vector<std::size_t> widths(cells.front().size(), 0);
  for (const auto& row : cells)
    for (std::size_t i = 0; i < row.size(); ++i) widths[i] = std::max(widths[i], width_of(row[i]));
  std::string out;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    for (std::size_t i = 0; i < cells[r].size(); ++i) {
      const auto& c = cells[r][i];
      const std::string pad(widths[i] - width_of(c), ' ');
      out += i == 0 ? c + pad : "  " + pad + c;
    }
    out += '\n';
    if (r == 0) {
      std::size_t total = 0;
      for (auto w : widths) total += w + 2;
      out += std::string(total - 2, '-') + '\n';
    }
  }
  return out;
}

inline nlohmann::ordered_json report_to_json(const Report& r) {
  nlohmann::ordered_json j;
  j["mode"] = r.mode;
  j["element_acc"] = r.element_acc;
  j["macro_element_acc"] = r.macro_element_acc;
  j["step_acc"] = r.step_acc;
  j["macro_step_acc"] = r.macro_step_acc;
  j["tokens_per_history"] = r.tokens.formatted();
  j["tokens_mean"] = r.tokens.mean;
  j["tokens_std"] = r.tokens.stddev;
  j["tokens_max"] = r.tokens.max;
  j["steps"] = r.steps;
  j["tasks"] = r.tasks;
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
  for (const auto& [k, v] : r.metadata) meta[k] = v;
  j["metadata"] = meta;
  return j;
}

}  // namespace whc
