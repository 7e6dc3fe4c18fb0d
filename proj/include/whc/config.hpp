#pragma once

// Run configuration as a JSON document. Every key is optional and falls back
// to the desk default; unknown keys and wrongly typed values are rejected.
//
//   {
//     "seed": 7, "precision": 32, "paper_strict": false, "history": "ours",
//     "model": {"vocab_size", "width", "heads", "encoder_layers",
//               "integration": "gated_cross" | "prefix",
//               "view": "candidates" | "full",
//               "compressor": {"queries", "layers", "heads", "max_histories",
//                              "fusion_window", "fusion"}},
//     "baselines": {"prune_top_k", "truncate_len",
//                   "summarizer": {"endpoint", "timeout_ms", "budget"}},
//     "data": {"tasks": [{"kind", "num_items", "episode_length", "verbosity",
//                         "memory_depth", "vocab_seed"}],
//              "train", "val", "test"},
//     "training": {"base" | "stage1" | "stage2":
//                    {"lr", "batch_size", "max_steps", "beta1", "beta2", "eps",
//                     "eval_every"}}
//   }
//
// WHC_SEED and WHC_PRECISION in the environment override the file.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "json.hpp"
#include "whc/agent.hpp"
#include "whc/env.hpp"
#include "whc/training.hpp"

namespace whc {

using ordered_json = nlohmann::ordered_json;

class ConfigError : public Error {
 public:
  using Error::Error;
};

struct RunConfig {
  std::uint64_t seed = 7;
  int precision = 32;
  bool paper_strict = false;
  ModelConfig model;
  DatasetPlan data;
  Schedule schedule;

  static RunConfig desk() {
    RunConfig c;
    TaskSpec spec;
    spec.kind = TaskKind::memory_recall;
    c.data.specs = {spec};
    c.data.train = 2000;
    c.data.val = 100;
    c.data.test = 200;
    return c;
  }

  /// Model dimensions used in the original experiments.
  static RunConfig paper() {
    RunConfig c = desk();
    c.paper_strict = true;
    c.model.width = 768;
    c.model.heads = 12;
    c.model.compressor = CompressorConfig::paper();
    return c;
  }

  void validate() const {
    if (precision != 32 && precision != 64) throw ConfigError("config: precision must be 32 or 64");
    if (paper_strict && model.compressor.max_histories > 5) {
      throw ConfigError("config: paper_strict allows at most 5 histories, got " +
                        std::to_string(model.compressor.max_histories));
    }
    try {
      model.validate();
      for (const auto& s : data.specs) s.validate();
      schedule.base.validate();
      schedule.stage1.validate();
      schedule.stage2.validate();
      model.baseline.pruner.validate();
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }
};

namespace detail {

/// Reads keys from one JSON object and remembers which were consumed.
class ObjectReader {
 public:
  ObjectReader(const ordered_json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: " + where() + " must be an object");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    const auto& v = *it;
    const std::string name = path_.empty() ? key : path_ + "." + key;
    if constexpr (std::is_same_v<V, bool>) {
      if (!v.is_boolean()) throw ConfigError("config: " + name + " must be a boolean");
    } else if constexpr (std::is_integral_v<V>) {
      if (!v.is_number_integer() || (std::is_unsigned_v<V> && v.is_number_integer() &&
                                     !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
        throw ConfigError("config: " + name + " must be a non-negative integer");
      }
    } else if constexpr (std::is_floating_point_v<V>) {
      if (!v.is_number()) throw ConfigError("config: " + name + " must be a number");
    } else {
      if (!v.is_string()) throw ConfigError("config: " + name + " must be a string");
    }
    out = v.get<V>();
  }

  const ordered_json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string sub(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("config: unknown key '" + sub(it.key().c_str()) + "'");
    }
  }

 private:
  std::string where() const { return path_.empty() ? "top level" : "'" + path_ + "'"; }

  const ordered_json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void read_train(const ordered_json& j, const std::string& path, TrainConfig& t) {
  ObjectReader r(j, path);
  r.get("lr", t.lr);
  r.get("batch_size", t.batch_size);
  r.get("max_steps", t.max_steps);
  r.get("beta1", t.adam.beta1);
  r.get("beta2", t.adam.beta2);
  r.get("eps", t.adam.eps);
  r.get("eval_every", t.eval_every);
  r.finish();
}

inline ordered_json train_json(const TrainConfig& t) {
  return {{"lr", t.lr},       {"batch_size", t.batch_size}, {"max_steps", t.max_steps},
          {"beta1", t.adam.beta1}, {"beta2", t.adam.beta2}, {"eps", t.adam.eps},
          {"eval_every", t.eval_every}};
}

inline const char* integration_name(HistoryIntegration h) {
  return h == HistoryIntegration::prefix ? "prefix" : "gated_cross";
}

inline const char* view_name(CurrentView v) { return v == CurrentView::full ? "full" : "candidates"; }

}  // namespace detail

inline ordered_json model_config_to_json(const ModelConfig& m) {
  const auto& c = m.compressor;
  ordered_json j;
  j["vocab_size"] = m.vocab_size;
  j["width"] = m.width;
  j["heads"] = m.heads;
  j["encoder_layers"] = m.encoder_layers;
  j["integration"] = detail::integration_name(m.integration);
  j["view"] = detail::view_name(m.view);
  j["compressor"] = {{"queries", c.queries},
                     {"layers", c.layers},
                     {"heads", c.heads},
                     {"max_histories", c.max_histories},
                     {"fusion_window", c.fusion_window},
                     {"fusion", c.fusion}};
  return j;
}

inline void read_model(const ordered_json& j, const std::string& path, ModelConfig& m) {
  detail::ObjectReader r(j, path);
  r.get("vocab_size", m.vocab_size);
  r.get("width", m.width);
  r.get("heads", m.heads);
  r.get("encoder_layers", m.encoder_layers);
  std::string integration = detail::integration_name(m.integration);
  r.get("integration", integration);
  if (integration == "prefix") {
    m.integration = HistoryIntegration::prefix;
  } else if (integration == "gated_cross") {
    m.integration = HistoryIntegration::gated_cross;
  } else {
    throw ConfigError("config: " + r.sub("integration") + " must be gated_cross or prefix");
  }
  std::string view = detail::view_name(m.view);
  r.get("view", view);
  if (view == "full") {
    m.view = CurrentView::full;
  } else if (view == "candidates") {
    m.view = CurrentView::candidates;
  } else {
    throw ConfigError("config: " + r.sub("view") + " must be candidates or full");
  }
  if (const auto* c = r.child("compressor")) {
    detail::ObjectReader rc(*c, r.sub("compressor"));
    rc.get("queries", m.compressor.queries);
    rc.get("layers", m.compressor.layers);
    rc.get("heads", m.compressor.heads);
    rc.get("max_histories", m.compressor.max_histories);
    rc.get("fusion_window", m.compressor.fusion_window);
    rc.get("fusion", m.compressor.fusion);
    rc.finish();
  }
  m.compressor.width = m.width;
  r.finish();
}

inline ModelConfig model_config_from_json(const ordered_json& j) {
  ModelConfig m;
  read_model(j, "model", m);
  return m;
}

inline ordered_json run_config_to_json(const RunConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["precision"] = c.precision;
  j["paper_strict"] = c.paper_strict;
  j["history"] = encoding_name(c.model.history);
  j["model"] = model_config_to_json(c.model);
  const auto& b = c.model.baseline;
  j["baselines"] = {{"prune_top_k", b.pruner.top_k},
                    {"truncate_len", b.truncate_len},
                    {"summarizer",
                     {{"endpoint", b.summarizer.endpoint},
                      {"timeout_ms", b.summarizer.timeout.count()},
                      {"budget", b.summarizer.budget}}}};
  ordered_json tasks = ordered_json::array();
  for (const auto& s : c.data.specs) tasks.push_back(spec_to_json(s));
  j["data"] = {{"tasks", tasks}, {"train", c.data.train}, {"val", c.data.val}, {"test", c.data.test}};
  j["training"] = {{"base", detail::train_json(c.schedule.base)},
                   {"stage1", detail::train_json(c.schedule.stage1)},
                   {"stage2", detail::train_json(c.schedule.stage2)}};
  return j;
}

/// Layers `j` over the desk defaults.
inline RunConfig run_config_from_json(const ordered_json& j) {
  RunConfig c = RunConfig::desk();
  detail::ObjectReader r(j, "");
  r.get("seed", c.seed);
  r.get("precision", c.precision);
  r.get("paper_strict", c.paper_strict);
  std::string history = encoding_name(c.model.history);
  r.get("history", history);
  try {
    c.model.history = parse_encoding(history);
  } catch (const Error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (const auto* m = r.child("model")) read_model(*m, "model", c.model);
  if (const auto* b = r.child("baselines")) {
    detail::ObjectReader rb(*b, "baselines");
    rb.get("prune_top_k", c.model.baseline.pruner.top_k);
    rb.get("truncate_len", c.model.baseline.truncate_len);
    if (const auto* s = rb.child("summarizer")) {
      detail::ObjectReader rs(*s, "baselines.summarizer");
      auto& sc = c.model.baseline.summarizer;
      rs.get("endpoint", sc.endpoint);
      std::int64_t ms = sc.timeout.count();
      rs.get("timeout_ms", ms);
      sc.timeout = std::chrono::milliseconds(ms);
      rs.get("budget", sc.budget);
      rs.finish();
    }
    rb.finish();
  }
  if (const auto* d = r.child("data")) {
    detail::ObjectReader rd(*d, "data");
    if (const auto* tasks = rd.child("tasks")) {
      if (!tasks->is_array() || tasks->empty()) {
        throw ConfigError("config: data.tasks must be a nonempty array");
      }
      c.data.specs.clear();
      for (std::size_t i = 0; i < tasks->size(); ++i) {
        TaskSpec s;
        detail::ObjectReader rt((*tasks)[i], "data.tasks[" + std::to_string(i) + "]");
        std::string kind = task_kind_name(s.kind);
        rt.get("kind", kind);
        try {
          s.kind = parse_task_kind(kind);
        } catch (const Error& e) {
          throw ConfigError(std::string("config: ") + e.what());
        }
        rt.get("num_items", s.num_items);
        rt.get("episode_length", s.episode_length);
        rt.get("verbosity", s.verbosity);
        rt.get("memory_depth", s.memory_depth);
        rt.get("vocab_seed", s.vocab_seed);
        rt.finish();
        c.data.specs.push_back(s);
      }
    }
    rd.get("train", c.data.train);
    rd.get("val", c.data.val);
    rd.get("test", c.data.test);
    rd.finish();
  }
  if (const auto* t = r.child("training")) {
    detail::ObjectReader rt(*t, "training");
    if (const auto* s = rt.child("base")) detail::read_train(*s, "training.base", c.schedule.base);
    if (const auto* s = rt.child("stage1")) detail::read_train(*s, "training.stage1", c.schedule.stage1);
    if (const auto* s = rt.child("stage2")) detail::read_train(*s, "training.stage2", c.schedule.stage2);
    rt.finish();
  }
  r.finish();
  c.schedule.stage1.stage = 1;
  c.schedule.base.stage = c.schedule.stage2.stage = 2;
  c.schedule.set_seed(c.seed);
  return c;
}

/// Environment overrides for seed and precision only.
inline void apply_env_overrides(RunConfig& c) {
  if (const char* s = std::getenv("WHC_SEED")) {
    try {
      std::size_t used = 0;
      c.seed = std::stoull(s, &used);
      if (used != std::string(s).size()) throw std::invalid_argument(s);
    } catch (const std::exception&) {
      throw ConfigError(std::string("WHC_SEED is not an unsigned integer: '") + s + "'");
    }
  }
  if (const char* p = std::getenv("WHC_PRECISION")) {
    const std::string v = p;
    if (v != "32" && v != "64") throw ConfigError("WHC_PRECISION must be 32 or 64, got '" + v + "'");
    c.precision = std::stoi(v);
  }
  c.schedule.set_seed(c.seed);
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path.string());
  ordered_json j;
  try {
    j = ordered_json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON (" + e.what() + ")");
  }
  auto c = run_config_from_json(j);
  c.validate();
  return c;
}

}  // namespace whc
