#pragma once

// Synthetic, history-dependent web episodes rendered as pseudo-HTML.
//
// Every page lists K items among V lexically similar distractor elements, in
// a fresh random order each step. What the agent must do depends on the task:
//
//   DISTINCT_CHOICE  pick any item not picked before. The current page shows
//                    no trace of earlier picks; only history pages carry the
//                    CLICKED marker on the element acted on.
//   MEMORY_RECALL    the page at step t-m carries a notice element holding
//                    CODE_j; at step t the gold element is item j, listed by
//                    its NAME token only. Steps t < m have nothing to recall
//                    and are unscored.
//   COPY_FORWARD     the instruction names an item; TYPE into it every step.

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "whc/rng.hpp"
#include "whc/step.hpp"
#include "whc/vocab.hpp"

namespace whc {

inline constexpr const char* kGeneratorVersion = "whc-env/1";
inline constexpr std::size_t kStateTokenCap = 2048;

enum class TaskKind { distinct_choice, memory_recall, copy_forward };

inline const char* task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::distinct_choice: return "distinct_choice";
    case TaskKind::memory_recall: return "memory_recall";
    case TaskKind::copy_forward: return "copy_forward";
  }
  return "?";
}

inline TaskKind parse_task_kind(const std::string& s) {
  if (s == "distinct_choice") return TaskKind::distinct_choice;
  if (s == "memory_recall") return TaskKind::memory_recall;
  if (s == "copy_forward") return TaskKind::copy_forward;
  throw Error("unknown task kind '" + s + "'");
}

struct TaskSpec {
  TaskKind kind = TaskKind::memory_recall;
  std::size_t num_items = 8;       // K
  std::size_t episode_length = 5;  // T
  std::size_t verbosity = 200;     // V distractor elements per page
  std::size_t memory_depth = 2;    // m
  std::uint64_t vocab_seed = 0;

  static constexpr std::size_t kMaxSections = 4;
  static constexpr std::size_t kMaxElementTokens = 6;  // OPEN CLICKED ATTR w w CLOSE

  std::size_t worst_case_state_tokens() const {
    return 3 + 2 * kMaxSections + (num_items + verbosity + 1) * kMaxElementTokens;
  }

  void validate() const {
    if (num_items < 2 || num_items > static_cast<std::size_t>(vocab::kMaxItems)) {
      throw Error("task spec: num_items must be in [2, 32]");
    }
    if (episode_length == 0) throw Error("task spec: episode_length must be positive");
    if (kind == TaskKind::distinct_choice && episode_length > num_items) {
      throw Error("task spec: distinct_choice requires episode_length <= num_items");
    }
    if (kind == TaskKind::memory_recall && memory_depth >= episode_length) {
      throw Error("task spec: memory_recall requires memory_depth < episode_length");
    }
    if (kind == TaskKind::memory_recall && memory_depth == 0) {
      throw Error("task spec: memory_recall requires memory_depth >= 1");
    }
    if (worst_case_state_tokens() > kStateTokenCap) {
      throw Error("task spec: pages could exceed the " + std::to_string(kStateTokenCap) +
                  "-token state cap");
    }
  }
};

// ---------------------------------------------------------------------------
// Page model and serialization

struct PageElement {
  vocab::Tag tag = vocab::Tag::div;
  std::optional<int> attr;
  TokenIds text;
  std::optional<std::int32_t> item_id;
  bool marked = false;

  std::size_t token_count() const { return 2 + (marked ? 1 : 0) + (attr ? 1 : 0) + text.size(); }
};

struct PageState {
  Operation mode = Operation::click;
  std::vector<std::vector<PageElement>> sections;
};

struct SerializedState {
  TokenIds tokens;
  std::vector<CandidateSpan> items;  // item elements in document order
};

/// OPEN_page MODE { OPEN_section { element }* CLOSE_section }* CLOSE_page
/// element := OPEN_tag [CLICKED] [ATTR] text+ CLOSE_tag
inline SerializedState serialize_state(const PageState& page) {
  using namespace vocab;
  SerializedState out;
  auto& t = out.tokens;
  t.push_back(open(Tag::page));
  t.push_back(kModeBase + static_cast<Token>(page.mode));
  for (const auto& section : page.sections) {
    if (section.empty()) continue;
    t.push_back(open(Tag::section));
    for (const auto& e : section) {
      const std::size_t start = t.size();
      t.push_back(open(e.tag));
      if (e.marked) t.push_back(kClicked);
      if (e.attr) t.push_back(attr(*e.attr));
      t.insert(t.end(), e.text.begin(), e.text.end());
      t.push_back(close(e.tag));
      if (e.item_id) out.items.push_back({*e.item_id, start, t.size() - start});
    }
    t.push_back(close(Tag::section));
  }
  t.push_back(close(Tag::page));
  return out;
}

// ---------------------------------------------------------------------------
// Episodes

struct EpisodeStep {
  TokenIds state_tokens;
  std::vector<CandidateSpan> candidates;  // items in document order
  std::vector<std::int32_t> gold_ids;
  Operation gold_op = Operation::click;
  std::int32_t taken_id = 0;  // element acted on along the reference trajectory
  bool scored = true;
};

struct Episode {
  std::string task_id;
  TaskKind kind = TaskKind::memory_recall;
  std::uint64_t seed = 0;
  TokenIds instruction;
  std::vector<EpisodeStep> steps;

  std::size_t scored_steps() const {
    std::size_t n = 0;
    for (const auto& s : steps) n += s.scored ? 1 : 0;
    return n;
  }
};

namespace detail {

class PageBuilder {
 public:
  PageBuilder(const TaskSpec& spec, SplitMix64& rng) : spec_(spec), rng_(rng) {
    // vocab_seed selects the word pool shared by instructions and distractors.
    std::vector<int> words(vocab::kNumWords);
    std::iota(words.begin(), words.end(), 0);
    SplitMix64 pool_rng(substream_seed(spec.vocab_seed, "word-pool"));
    pool_rng.shuffle(words);
    words.resize(256);
    pool_ = std::move(words);
  }

  vocab::Token random_word() { return vocab::word(pool_[rng_.below(pool_.size())]); }

  PageElement element(vocab::Token head) {
    PageElement e;
    e.tag = static_cast<vocab::Tag>(1 + rng_.below(vocab::kNumTags - 2));  // div..button
    if (rng_.bernoulli(0.5)) e.attr = static_cast<int>(rng_.below(vocab::kNumAttrs));
    e.text.push_back(head);
    if (rng_.bernoulli(0.5)) e.text.push_back(random_word());
    return e;
  }

  PageState page(Operation mode, std::optional<std::int32_t> notice_item) {
    std::vector<PageElement> all;
    for (std::size_t i = 0; i < spec_.num_items; ++i) {
      auto e = element(vocab::name(static_cast<int>(i)));
      e.item_id = static_cast<std::int32_t>(i);
      all.push_back(std::move(e));
    }
    for (std::size_t i = 0; i < spec_.verbosity; ++i) all.push_back(element(random_word()));
    if (notice_item) all.push_back(element(vocab::code(*notice_item)));
    rng_.shuffle(all);
    const std::size_t sections =
        std::min<std::size_t>(1 + rng_.below(TaskSpec::kMaxSections), all.size());
    std::vector<std::size_t> cuts{0};
    std::set<std::size_t> chosen;
    while (chosen.size() + 1 < sections) chosen.insert(1 + rng_.below(all.size() - 1));
    cuts.insert(cuts.end(), chosen.begin(), chosen.end());
    cuts.push_back(all.size());
    PageState p;
    p.mode = mode;
    for (std::size_t s = 0; s + 1 < cuts.size(); ++s) {
      p.sections.emplace_back(std::make_move_iterator(all.begin() + cuts[s]),
                              std::make_move_iterator(all.begin() + cuts[s + 1]));
    }
    return p;
  }

 private:
  const TaskSpec& spec_;
  SplitMix64& rng_;
  std::vector<int> pool_;
};

}  // namespace detail

/// Deterministic in (spec, seed).
inline Episode generate_episode(const TaskSpec& spec, std::uint64_t seed,
                                std::string task_id = "episode") {
  spec.validate();
  SplitMix64 rng(substream_seed(seed, task_kind_name(spec.kind)));
  detail::PageBuilder builder(spec, rng);
  const std::size_t K = spec.num_items, T = spec.episode_length, m = spec.memory_depth;

  Episode ep;
  ep.task_id = std::move(task_id);
  ep.kind = spec.kind;
  ep.seed = seed;
  ep.instruction.push_back(vocab::kTaskBase + static_cast<vocab::Token>(spec.kind));
  for (int i = 0; i < 4; ++i) ep.instruction.push_back(builder.random_word());

  std::vector<std::int32_t> taken(T);
  std::vector<bool> scored(T, true);
  std::int32_t copy_target = 0;
  switch (spec.kind) {
    case TaskKind::distinct_choice: {
      std::vector<std::int32_t> order(K);
      std::iota(order.begin(), order.end(), 0);
      rng.shuffle(order);
      std::copy_n(order.begin(), T, taken.begin());
      break;
    }
    case TaskKind::memory_recall:
      for (std::size_t t = 0; t < T; ++t) {
        taken[t] = static_cast<std::int32_t>(rng.below(K));
        scored[t] = t >= m;
      }
      break;
    case TaskKind::copy_forward:
      copy_target = static_cast<std::int32_t>(rng.below(K));
      ep.instruction.push_back(vocab::name(copy_target));
      std::fill(taken.begin(), taken.end(), copy_target);
      break;
  }

  for (std::size_t t = 0; t < T; ++t) {
    Operation mode = spec.kind == TaskKind::copy_forward
                         ? Operation::type
                         : (rng.bernoulli(0.5) ? Operation::click : Operation::select);
    std::optional<std::int32_t> notice;
    if (spec.kind == TaskKind::memory_recall && t + m < T) notice = taken[t + m];
    auto state = serialize_state(builder.page(mode, notice));
    EpisodeStep step;
    step.state_tokens = std::move(state.tokens);
    step.candidates = std::move(state.items);
    step.gold_op = mode;
    step.taken_id = taken[t];
    step.scored = scored[t];
    if (spec.kind == TaskKind::distinct_choice) {
      for (std::size_t i = 0; i < K; ++i) {
        auto id = static_cast<std::int32_t>(i);
        if (std::find(taken.begin(), taken.begin() + t, id) == taken.begin() + t)
          step.gold_ids.push_back(id);
      }
    } else {
      step.gold_ids = {taken[t]};
    }
    ep.steps.push_back(std::move(step));
  }
  return ep;
}

/// Ground truth for step t given the elements chosen at steps < t.
inline std::pair<std::vector<std::int32_t>, Operation> oracle_action(
    const Episode& ep, std::size_t t, std::span<const std::int32_t> chosen_so_far) {
  if (t >= ep.steps.size()) {
    throw Error("oracle_action: step " + std::to_string(t) + " outside episode of length " +
                std::to_string(ep.steps.size()));
  }
  const auto& step = ep.steps[t];
  if (ep.kind != TaskKind::distinct_choice) return {step.gold_ids, step.gold_op};
  std::vector<std::int32_t> acceptable;
  for (const auto& c : step.candidates) {
    if (std::find(chosen_so_far.begin(), chosen_so_far.end(), c.element_id) == chosen_so_far.end())
      acceptable.push_back(c.element_id);
  }
  std::sort(acceptable.begin(), acceptable.end());
  return {acceptable, step.gold_op};
}

inline std::size_t candidate_position(const EpisodeStep& step, std::int32_t id) {
  for (std::size_t i = 0; i < step.candidates.size(); ++i)
    if (step.candidates[i].element_id == id) return i;
  throw Error("element " + std::to_string(id) + " is not a candidate");
}

/// ACT OP POS triple for the reference action of a step.
inline TokenIds action_tokens(const EpisodeStep& step) {
  return {vocab::kAct, vocab::kOpBase + static_cast<vocab::Token>(step.gold_op),
          vocab::pos(static_cast<int>(candidate_position(step, step.taken_id)))};
}

/// Page of step j as remembered afterwards: the acted-on element is marked.
inline TokenIds history_state_tokens(const EpisodeStep& step) {
  const auto& span = step.candidates.at(candidate_position(step, step.taken_id));
  TokenIds out = step.state_tokens;
  out.insert(out.begin() + static_cast<std::ptrdiff_t>(span.start + 1), vocab::kClicked);
  return out;
}

inline HistoryInput history_input(const Episode& ep, std::size_t j) {
  HistoryInput h;
  h.state_tokens = history_state_tokens(ep.steps.at(j));
  for (std::size_t i = 0; i < j; ++i) {
    auto a = action_tokens(ep.steps[i]);
    h.action_tokens.insert(h.action_tokens.end(), a.begin(), a.end());
  }
  h.instruction_tokens = ep.instruction;
  h.step_index = j;
  return h;
}

/// Agent input for step t with at most `max_histories` of the most recent
/// earlier steps.
inline LabeledStep make_labeled_step(const Episode& ep, std::size_t t, std::size_t max_histories) {
  if (t >= ep.steps.size()) throw Error("make_labeled_step: step out of range");
  const auto& step = ep.steps[t];
  LabeledStep out;
  auto& in = out.input;
  const std::size_t first = t > max_histories ? t - max_histories : 0;
  for (std::size_t j = first; j < t; ++j) in.histories.push_back(history_input(ep, j));
  in.current_state_tokens = step.state_tokens;
  for (std::size_t i = 0; i < t; ++i) {
    auto a = action_tokens(ep.steps[i]);
    in.past_action_tokens.insert(in.past_action_tokens.end(), a.begin(), a.end());
  }
  in.instruction_tokens = ep.instruction;
  in.candidates = step.candidates;
  out.gold_ids = step.gold_ids;
  out.gold_op = step.gold_op;
  out.target_index = candidate_position(step, step.taken_id);
  return out;
}

// ---------------------------------------------------------------------------
// Dataset files
//
// One episode per line, keys in this order:
//   {"task_id", "kind", "seed", "instruction",
//    "steps": [{"state_tokens", "candidates": [{"id", "span_start", "span_len"}],
//               "gold_ids", "gold_op", "taken_id", "scored"}]}

using ordered_json = nlohmann::ordered_json;

inline ordered_json spec_to_json(const TaskSpec& s) {
  ordered_json j;
  j["kind"] = task_kind_name(s.kind);
  j["num_items"] = s.num_items;
  j["episode_length"] = s.episode_length;
  j["verbosity"] = s.verbosity;
  j["memory_depth"] = s.memory_depth;
  j["vocab_seed"] = s.vocab_seed;
  return j;
}

inline TaskSpec spec_from_json(const ordered_json& j) {
  TaskSpec s;
  s.kind = parse_task_kind(j.at("kind").get<std::string>());
  s.num_items = j.at("num_items").get<std::size_t>();
  s.episode_length = j.at("episode_length").get<std::size_t>();
  s.verbosity = j.at("verbosity").get<std::size_t>();
  s.memory_depth = j.at("memory_depth").get<std::size_t>();
  s.vocab_seed = j.at("vocab_seed").get<std::uint64_t>();
  return s;
}

inline ordered_json episode_to_json(const Episode& ep) {
  ordered_json j;
  j["task_id"] = ep.task_id;
  j["kind"] = task_kind_name(ep.kind);
  j["seed"] = ep.seed;
  j["instruction"] = ep.instruction;
  ordered_json steps = ordered_json::array();
  for (const auto& s : ep.steps) {
    ordered_json js;
    js["state_tokens"] = s.state_tokens;
    ordered_json cands = ordered_json::array();
    for (const auto& c : s.candidates) {
      ordered_json jc;
      jc["id"] = c.element_id;
      jc["span_start"] = c.start;
      jc["span_len"] = c.len;
      cands.push_back(std::move(jc));
    }
    js["candidates"] = std::move(cands);
    js["gold_ids"] = s.gold_ids;
    js["gold_op"] = operation_name(s.gold_op);
    js["taken_id"] = s.taken_id;
    js["scored"] = s.scored;
    steps.push_back(std::move(js));
  }
  j["steps"] = std::move(steps);
  return j;
}

inline Episode episode_from_json(const ordered_json& j) {
  Episode ep;
  ep.task_id = j.at("task_id").get<std::string>();
  ep.kind = parse_task_kind(j.at("kind").get<std::string>());
  ep.seed = j.at("seed").get<std::uint64_t>();
  ep.instruction = j.at("instruction").get<TokenIds>();
  for (const auto& js : j.at("steps")) {
    EpisodeStep s;
    s.state_tokens = js.at("state_tokens").get<TokenIds>();
    for (const auto& jc : js.at("candidates")) {
      s.candidates.push_back({jc.at("id").get<std::int32_t>(), jc.at("span_start").get<std::size_t>(),
                              jc.at("span_len").get<std::size_t>()});
    }
    s.gold_ids = js.at("gold_ids").get<std::vector<std::int32_t>>();
    s.gold_op = parse_operation(js.at("gold_op").get<std::string>());
    s.taken_id = js.at("taken_id").get<std::int32_t>();
    s.scored = js.at("scored").get<bool>();
    ep.steps.push_back(std::move(s));
  }
  return ep;
}

inline void write_episodes(const std::filesystem::path& path, const std::vector<Episode>& eps) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& ep : eps) out << episode_to_json(ep).dump() << '\n';
  if (!out) throw Error("write failed: " + path.string());
}

inline std::vector<Episode> read_episodes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::vector<Episode> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(episode_from_json(ordered_json::parse(line)));
  }
  return out;
}

struct Dataset {
  std::vector<Episode> train, val, test;
};

/// How many episodes of which specs go into each split. Specs are assigned
/// round-robin within a split.
struct DatasetPlan {
  std::vector<TaskSpec> specs;
  std::size_t train = 80, val = 10, test = 10;
};

struct ManifestEntry {
  std::string split;
  std::string task_id;
  std::uint64_t seed = 0;
  TaskSpec spec;
};

/// Generates all splits in memory. Episode seeds come from the "data"
/// sub-stream of the root seed, indexed globally so no seed repeats across
/// splits.
inline Dataset build_dataset(const DatasetPlan& plan, std::uint64_t root_seed,
                             std::vector<ManifestEntry>* manifest = nullptr) {
  if (plan.specs.empty()) throw Error("dataset plan has no task specs");
  if (plan.train == 0 && plan.val == 0 && plan.test == 0) throw Error("dataset plan is empty");
  const std::uint64_t data_seed = substream_seed(root_seed, "data");
  Dataset ds;
  std::set<std::uint64_t> seen;
  std::size_t global = 0;
  auto fill = [&](const char* split, std::size_t count, std::vector<Episode>& dst) {
    for (std::size_t i = 0; i < count; ++i, ++global) {
      const auto& spec = plan.specs[i % plan.specs.size()];
      const std::uint64_t seed = substream_seed(data_seed, global);
      if (!seen.insert(seed).second) throw Error("episode seed collision across splits");
      std::string id = std::string(split) + "-" + std::to_string(i);
      dst.push_back(generate_episode(spec, seed, id));
      if (manifest) manifest->push_back({split, id, seed, spec});
    }
  };
  fill("train", plan.train, ds.train);
  fill("val", plan.val, ds.val);
  fill("test", plan.test, ds.test);
  return ds;
}

inline ordered_json manifest_to_json(std::uint64_t root_seed,
                                     const std::vector<ManifestEntry>& entries) {
  ordered_json j;
  j["generator_version"] = kGeneratorVersion;
  j["root_seed"] = root_seed;
  ordered_json eps = ordered_json::array();
  for (const auto& e : entries) {
    ordered_json je;
    je["split"] = e.split;
    je["task_id"] = e.task_id;
    je["seed"] = e.seed;
    je["spec"] = spec_to_json(e.spec);
    eps.push_back(std::move(je));
  }
  j["episodes"] = std::move(eps);
  return j;
}

/// Writes train.jsonl, val.jsonl, test.jsonl and manifest.json under `dir`.
inline Dataset make_dataset(const DatasetPlan& plan, std::uint64_t root_seed,
                            const std::filesystem::path& dir) {
  std::vector<ManifestEntry> manifest;
  auto ds = build_dataset(plan, root_seed, &manifest);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("cannot create " + dir.string() + ": " + ec.message());
  write_episodes(dir / "train.jsonl", ds.train);
  write_episodes(dir / "val.jsonl", ds.val);
  write_episodes(dir / "test.jsonl", ds.test);
  std::ofstream m(dir / "manifest.json", std::ios::binary | std::ios::trunc);
  if (!m) throw Error("cannot write manifest in " + dir.string());
  m << manifest_to_json(root_seed, manifest).dump(2) << '\n';
  return ds;
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.train = read_episodes(dir / "train.jsonl");
  ds.val = read_episodes(dir / "val.jsonl");
  ds.test = read_episodes(dir / "test.jsonl");
  return ds;
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  auto j = ordered_json::parse(in);
  if (j.at("generator_version").get<std::string>() != kGeneratorVersion) {
    throw Error("manifest generator version mismatch");
  }
  std::vector<ManifestEntry> out;
  for (const auto& je : j.at("episodes")) {
    out.push_back({je.at("split").get<std::string>(), je.at("task_id").get<std::string>(),
                   je.at("seed").get<std::uint64_t>(), spec_from_json(je.at("spec"))});
  }
  return out;
}

inline Episode replay(const ManifestEntry& e) { return generate_episode(e.spec, e.seed, e.task_id); }

}  // namespace whc
