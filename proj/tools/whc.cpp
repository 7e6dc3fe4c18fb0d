// whc: data generation, training, evaluation and experiments from the shell.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "whc/checkpoint.hpp"
#include "whc/config.hpp"
#include "whc/experiments.hpp"
#include "whc/grad_check.hpp"

namespace fs = std::filesystem;
using namespace whc;

namespace {

constexpr int kExitFailure = 1;  // command ran, verification failed
constexpr int kExitError = 2;    // config, schema or IO problem

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::optional<int> precision;
  std::size_t threads = 1;
  bool quiet = false;
};

RunConfig resolve_config(const Globals& g) {
  RunConfig cfg = g.config.empty() ? RunConfig::desk() : load_run_config(g.config);
  apply_env_overrides(cfg);
  if (g.seed) cfg.seed = *g.seed;
  if (g.precision) cfg.precision = *g.precision;
  cfg.schedule.set_seed(cfg.seed);
  cfg.validate();
  return cfg;
}

void require_single_thread(const Globals& g, const char* command) {
  if (g.threads > 1) {
    throw ConfigError(std::string("--threads > 1 is not allowed for ") + command +
                      " (its outputs depend on execution order)");
  }
}

void write_text(const fs::path& path, const std::string& text) {
  detail::write_atomically(path, text.data(), text.size());
}

fs::path ensure_out(const Globals& g) {
  std::error_code ec;
  fs::create_directories(g.out, ec);
  if (ec) throw Error("cannot create output directory " + g.out + ": " + ec.message());
  return fs::path(g.out);
}

Dataset obtain_dataset(const RunConfig& cfg, const std::string& data_dir) {
  if (!data_dir.empty()) return load_dataset(data_dir);
  return build_dataset(cfg.data, cfg.seed);
}

LogSink progress(const Globals& g, std::ofstream* log_file) {
  return [&g, log_file](const LogRecord& r) {
    if (log_file) *log_file << r.line() << '\n';
    if (!g.quiet && (r.val_step_acc || r.step % 50 == 0)) std::cerr << r.line() << '\n';
  };
}

std::string reports_json(const std::vector<Report>& rows, const RunConfig& cfg,
                         const std::string& kind) {
  ordered_json j;
  j["kind"] = kind;
  j["seed"] = cfg.seed;
  j["precision"] = cfg.precision;
  j["config"] = run_config_to_json(cfg);
  ordered_json arr = ordered_json::array();
  for (const auto& r : rows) arr.push_back(report_to_json(r));
  j["rows"] = arr;
  return j.dump(2) + "\n";
}

void emit_reports(const Globals& g, const std::vector<Report>& rows, const RunConfig& cfg,
                  const std::string& kind, const std::string& label) {
  const auto table = report_table(rows, label);
  std::cout << table;
  auto out = ensure_out(g);
  write_text(out / (kind + ".txt"), table);
  write_text(out / (kind + ".json"), reports_json(rows, cfg, kind));
}

template <typename T>
int cmd_train(const Globals& g, const std::string& data_dir, const std::string& mode) {
  require_single_thread(g, "train");
  auto cfg = resolve_config(g);
  if (!mode.empty()) cfg.model.history = parse_encoding(mode);
  auto ds = obtain_dataset(cfg, data_dir);
  auto out = ensure_out(g);
  std::ofstream log(out / "train_log.jsonl", std::ios::binary | std::ios::trunc);
  if (!log) throw Error("cannot write " + (out / "train_log.jsonl").string());
  auto sink = progress(g, &log);
  auto base_run = cfg;
  base_run.model.history = HistoryEncoding::none;
  auto base = train_base_model<T>(cfg.model, cfg.seed, cfg.schedule, ds.train, ds.val, nullptr, sink);
  save_checkpoint(out / "base.whck", base, base_run);
  if (cfg.model.history == HistoryEncoding::none) {
    save_checkpoint(out / "model.whck", base, cfg);
    return 0;
  }
  auto params = init_model<T>(cfg.model, substream_seed(cfg.seed, "init"));
  copy_shared_parameters(base, params);
  try {
    run_training(params, cfg.model, cfg.schedule, ds.train, ds.val, sink);
  } catch (const DivergenceError&) {
    save_checkpoint(out / "last_good.whck", params, cfg);
    throw;
  }
  save_checkpoint(out / "model.whck", params, cfg);
  return 0;
}

template <typename T>
int cmd_eval(const Globals& g, const std::string& checkpoint, const std::string& data_dir,
             const std::string& split) {
  require_single_thread(g, "eval");
  auto [params, cfg] = load_checkpoint<T>(checkpoint);
  if (g.seed) cfg.seed = *g.seed;
  auto ds = obtain_dataset(cfg, data_dir);
  const std::vector<Episode>* eps = split == "val" ? &ds.val : split == "train" ? &ds.train : &ds.test;
  if (eps->empty()) throw Error("split '" + split + "' is empty");
  auto report = evaluate_report(params, cfg.model, *eps, encoding_name(cfg.model.history),
                                [](const std::string& w) { std::cerr << "warning: " << w << '\n'; });
  report.metadata["checkpoint"] = fs::path(checkpoint).filename().string();
  report.metadata["split"] = split;
  emit_reports(g, {report}, cfg, "report", "mode");
  return 0;
}

template <typename T>
int cmd_compare(const Globals& g, const std::string& task, const std::string& data_dir) {
  require_single_thread(g, "compare");
  auto cfg = resolve_config(g);
  if (!task.empty()) {
    for (auto& s : cfg.data.specs) s.kind = parse_task_kind(task);
    for (const auto& s : cfg.data.specs) s.validate();
  }
  auto ds = obtain_dataset(cfg, data_dir);
  auto rows = compare_modes<T>(cfg, ds, progress(g, nullptr));
  emit_reports(g, rows, cfg, "compare", "mode");
  return 0;
}

template <typename T>
int cmd_ablate(const Globals& g, const std::string& axis, const std::vector<std::size_t>& values,
               const std::string& data_dir) {
  require_single_thread(g, "ablate");
  auto cfg = resolve_config(g);
  auto ds = obtain_dataset(cfg, data_dir);
  const auto a = parse_axis(axis);
  auto rows = run_ablation<T>(a, values, cfg, ds, progress(g, nullptr));
  emit_reports(g, rows, cfg, std::string("ablation_") + axis_name(a), axis_name(a));
  return 0;
}

int cmd_gen_data(const Globals& g, const std::string& task) {
  auto cfg = resolve_config(g);
  if (!task.empty()) {
    for (auto& s : cfg.data.specs) s.kind = parse_task_kind(task);
    for (const auto& s : cfg.data.specs) s.validate();
  }
  auto dir = ensure_out(g) / "data";
  auto ds = make_dataset(cfg.data, cfg.seed, dir);
  std::cout << "wrote " << ds.train.size() << " train, " << ds.val.size() << " val, "
            << ds.test.size() << " test episodes to " << dir.string() << '\n';
  return 0;
}

int cmd_grad_check(const Globals& g, std::size_t seeds, std::size_t coords) {
  RunConfig cfg = resolve_config(g);
  GradCheckOptions opt;
  opt.seeds = seeds;
  opt.coords_per_tensor = coords;
  auto results = run_grad_check(opt, cfg.seed);
  bool ok = true;
  std::ostringstream text;
  for (const auto& r : results) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-18s max rel error %.3e  (%zu coords, worst %s)  %s\n",
                  r.block.c_str(), r.max_rel_error, r.coords, r.worst_tensor.c_str(),
                  r.passed(opt.tolerance) ? "ok" : "FAIL");
    text << buf;
    ok = ok && r.passed(opt.tolerance);
  }
  std::cout << text.str();
  write_text(ensure_out(g) / "grad_check.txt", text.str());
  return ok ? 0 : kExitFailure;
}

template <typename F>
int dispatch(const Globals& g, F&& f) {
  int precision = g.precision.value_or(0);
  if (!g.precision) {
    precision = 32;
    if (const char* p = std::getenv("WHC_PRECISION")) precision = std::string(p) == "64" ? 64 : 32;
    if (!g.config.empty()) {
      auto cfg = resolve_config(g);
      precision = cfg.precision;
    }
  }
  return precision == 64 ? f(double{}) : f(float{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"History-compressing web agent: data, training, evaluation"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand
  Globals g;
  app.add_option("--config", g.config, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "root seed");
  app.add_option("--out", g.out, "output directory")->capture_default_str();
  app.add_option("--precision", g.precision, "32 or 64")->check(CLI::IsMember({32, 64}));
  app.add_option("--threads", g.threads, "worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--quiet", g.quiet, "no progress on stderr");

  std::string task, data_dir, checkpoint, split = "test", mode, axis;
  std::vector<std::size_t> values;
  std::size_t seeds = 10, coords = 24;

  auto* gen = app.add_subcommand("gen-data", "write dataset splits and manifest under OUT/data");
  gen->add_option("--task", task, "override the task kind of every spec");

  auto* train = app.add_subcommand("train", "train the no-history model, then both stages");
  train->add_option("--data", data_dir, "dataset directory from gen-data");
  train->add_option("--mode", mode, "history mode: none, truncate, prune, summarize, ours");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--data", data_dir, "dataset directory from gen-data");
  eval->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));

  auto* ablate = app.add_subcommand("ablate", "sweep one setting, one model per value");
  ablate->add_option("--axis", axis, "history_count, compressed_length or fusion")->required();
  ablate->add_option("--values", values, "axis values (default: full sweep)")->delimiter(',');
  ablate->add_option("--data", data_dir, "dataset directory from gen-data");

  auto* grad = app.add_subcommand("grad-check", "verify gradients of every block");
  grad->add_option("--seeds", seeds, "random draws per block")->capture_default_str();
  grad->add_option("--coords", coords, "coordinates checked per tensor")->capture_default_str();

  auto* compare = app.add_subcommand("compare", "none / truncate / prune / ours on one seed");
  compare->add_option("--task", task, "override the task kind of every spec");
  compare->add_option("--data", data_dir, "dataset directory from gen-data");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(g, task);
    if (grad->parsed()) return cmd_grad_check(g, seeds, coords);
    if (eval->parsed() && !g.precision) {
      auto ck = read_checkpoint(checkpoint);
      g.precision = !ck.tensors.empty() && ck.tensors.front().dtype == DType::f64 ? 64 : 32;
    }
    return dispatch(g, [&](auto tag) -> int {
      using T = decltype(tag);
      if (train->parsed()) return cmd_train<T>(g, data_dir, mode);
      if (eval->parsed()) return cmd_eval<T>(g, checkpoint, data_dir, split);
      if (ablate->parsed()) return cmd_ablate<T>(g, axis, values, data_dir);
      return cmd_compare<T>(g, task, data_dir);
    });
  } catch (const CheckpointNotFound& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  }
}
