#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "whc/agent.hpp"
#include "whc/env.hpp"

using namespace whc;
namespace fs = std::filesystem;

namespace {

bool contains(const TokenIds& t, vocab::Token x) { return std::find(t.begin(), t.end(), x) != t.end(); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const fs::path& p) {
  const auto s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

fs::path scratch_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("whc_env_" + name);
  fs::remove_all(d);
  return d;
}

void expect_same(const Episode& a, const Episode& b) {
  EXPECT_EQ(episode_to_json(a).dump(), episode_to_json(b).dump());
}

}  // namespace

TEST(GenerateEpisode, Deterministic) {
  TaskSpec spec;
  spec.kind = TaskKind::distinct_choice;
  spec.episode_length = 3;
  expect_same(generate_episode(spec, 7), generate_episode(spec, 7));
  EXPECT_NE(episode_to_json(generate_episode(spec, 7)).dump(),
            episode_to_json(generate_episode(spec, 8)).dump());
}

TEST(GenerateEpisode, DistinctChoiceGoldSets) {
  TaskSpec spec;
  spec.kind = TaskKind::distinct_choice;
  spec.episode_length = 4;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto ep = generate_episode(spec, seed);
    EXPECT_EQ(ep.steps[0].gold_ids.size(), spec.num_items);
    std::vector<std::int32_t> chosen;
    for (std::size_t t = 0; t < ep.steps.size(); ++t) {
      const auto& s = ep.steps[t];
      EXPECT_EQ(s.gold_ids.size(), spec.num_items - t);
      for (auto c : chosen) EXPECT_FALSE(std::count(s.gold_ids.begin(), s.gold_ids.end(), c));
      EXPECT_TRUE(std::count(s.gold_ids.begin(), s.gold_ids.end(), s.taken_id));
      // The current page carries no mark of earlier choices.
      EXPECT_FALSE(contains(s.state_tokens, vocab::kClicked));
      chosen.push_back(s.taken_id);
    }
  }
}

TEST(GenerateEpisode, MemoryRecallAuditExample) {
  TaskSpec spec;  // memory_recall, K=8, T=5, m=2
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto ep = generate_episode(spec, seed);
    const auto gold = vocab::code(ep.steps[3].gold_ids.at(0));
    EXPECT_TRUE(contains(ep.steps[1].state_tokens, gold));
    EXPECT_FALSE(contains(ep.steps[3].state_tokens, gold));
  }
}

TEST(GenerateEpisode, SignalAbsentFromModelView) {
  TaskSpec spec;
  spec.verbosity = 30;
  spec.episode_length = 6;
  spec.memory_depth = 3;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto ep = generate_episode(spec, seed);
    for (std::size_t t = 0; t < ep.steps.size(); ++t) {
      const auto& s = ep.steps[t];
      EXPECT_EQ(s.scored, t >= spec.memory_depth);
      ASSERT_EQ(s.gold_ids.size(), 1u);
      if (!s.scored) continue;
      const auto gold = vocab::code(s.gold_ids[0]);
      EXPECT_TRUE(contains(ep.steps[t - spec.memory_depth].state_tokens, gold));
      auto ex = make_labeled_step(ep, t, 5);
      EXPECT_FALSE(contains(current_view(ex.input, CurrentView::candidates).first, gold));
      EXPECT_FALSE(contains(ex.input.instruction_tokens, gold));
      EXPECT_FALSE(contains(ex.input.past_action_tokens, gold));
    }
  }
}

TEST(GenerateEpisode, CopyForwardUsesType) {
  TaskSpec spec;
  spec.kind = TaskKind::copy_forward;
  auto ep = generate_episode(spec, 3);
  const auto target = ep.steps[0].gold_ids.at(0);
  EXPECT_TRUE(contains(ep.instruction, vocab::name(target)));
  for (std::size_t t = 0; t < ep.steps.size(); ++t) {
    auto [ids, op] = oracle_action(ep, t, {});
    EXPECT_EQ(op, Operation::type);
    EXPECT_EQ(ids, std::vector<std::int32_t>{target});
  }
}

TEST(GenerateEpisode, InvalidSpecs) {
  TaskSpec s;
  s.memory_depth = 5;
  EXPECT_THROW(generate_episode(s, 1), Error);
  s = TaskSpec{};
  s.kind = TaskKind::distinct_choice;
  s.episode_length = 9;
  EXPECT_THROW(generate_episode(s, 1), Error);
  s = TaskSpec{};
  s.num_items = 1;
  EXPECT_THROW(generate_episode(s, 1), Error);
  s = TaskSpec{};
  s.verbosity = 500;
  EXPECT_THROW(generate_episode(s, 1), Error);
}

TEST(GenerateEpisode, EpisodeInvariants) {
  for (auto kind : {TaskKind::distinct_choice, TaskKind::memory_recall, TaskKind::copy_forward}) {
    TaskSpec spec;
    spec.kind = kind;
    spec.verbosity = 10;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      auto ep = generate_episode(spec, seed);
      for (const auto& s : ep.steps) {
        EXPECT_GE(s.candidates.size(), 2u);
        for (auto g : s.gold_ids) EXPECT_NO_THROW(candidate_position(s, g));
        EXPECT_LE(s.state_tokens.size(), kStateTokenCap);
      }
    }
  }
}

TEST(SerializeState, MinimalPage) {
  TaskSpec spec;
  spec.num_items = 2;
  spec.verbosity = 0;
  spec.kind = TaskKind::distinct_choice;
  spec.episode_length = 2;
  auto ep = generate_episode(spec, 1);
  const auto& s = ep.steps[0];
  EXPECT_EQ(s.candidates.size(), 2u);
  auto elements = vocab::leaf_elements(s.state_tokens);
  EXPECT_EQ(elements.size(), 2u);
}

TEST(SerializeState, ExactTokenCount) {
  using namespace vocab;
  PageState page;
  page.sections.resize(2);
  std::size_t expected = 3 + 2 * 2;  // page open, mode, page close, two section pairs
  for (int i = 0; i < 500; ++i) {
    PageElement e;
    e.tag = Tag::span;
    if (i % 3 == 0) e.attr = i % kNumAttrs;
    e.text.push_back(word(i % 100));
    if (i % 2 == 0) e.text.push_back(word(7));
    expected += e.token_count();
    page.sections[static_cast<std::size_t>(i % 2)].push_back(e);
  }
  // 500 distractors: 2 tags each, 167 attributes, 750 text tokens.
  EXPECT_EQ(expected, 7u + 1000u + 167u + 750u);
  EXPECT_EQ(serialize_state(page).tokens.size(), expected);
}

TEST(SerializeState, SpansPointAtTheirElements) {
  TaskSpec spec;
  spec.verbosity = 40;
  auto ep = generate_episode(spec, 5);
  for (const auto& s : ep.steps) {
    for (const auto& c : s.candidates) {
      const auto& t = s.state_tokens;
      EXPECT_TRUE(vocab::is_open(t[c.start]));
      EXPECT_TRUE(vocab::is_close(t[c.start + c.len - 1]));
      EXPECT_TRUE(contains(TokenIds(t.begin() + static_cast<std::ptrdiff_t>(c.start),
                                    t.begin() + static_cast<std::ptrdiff_t>(c.start + c.len)),
                           vocab::name(c.element_id)));
    }
  }
}

TEST(HistoryInput, MarksTakenElement) {
  TaskSpec spec;
  auto ep = generate_episode(spec, 2);
  auto h = history_input(ep, 2);
  EXPECT_EQ(h.state_tokens.size(), ep.steps[2].state_tokens.size() + 1);
  EXPECT_EQ(h.action_tokens.size(), 6u);
  const auto& span = ep.steps[2].candidates[candidate_position(ep.steps[2], ep.steps[2].taken_id)];
  EXPECT_EQ(h.state_tokens[span.start + 1], vocab::kClicked);
  EXPECT_EQ(h.step_index, 2u);
}

TEST(MakeLabeledStep, KeepsMostRecentHistories) {
  TaskSpec spec;
  spec.episode_length = 5;
  auto ep = generate_episode(spec, 4);
  auto ex = make_labeled_step(ep, 4, 2);
  ASSERT_EQ(ex.input.histories.size(), 2u);
  EXPECT_EQ(ex.input.histories[0].step_index, 2u);
  EXPECT_EQ(ex.input.histories[1].step_index, 3u);
  EXPECT_EQ(ex.input.past_action_tokens.size(), 12u);
  EXPECT_THROW(make_labeled_step(ep, 5, 2), Error);
}

TEST(OracleAction, Examples) {
  TaskSpec spec;
  spec.kind = TaskKind::distinct_choice;
  spec.episode_length = 4;
  auto ep = generate_episode(spec, 9);
  const std::int32_t chosen[] = {2, 5};
  auto [ids, op] = oracle_action(ep, 2, chosen);
  EXPECT_EQ(ids, (std::vector<std::int32_t>{0, 1, 3, 4, 6, 7}));
  EXPECT_EQ(op, ep.steps[2].gold_op);
  EXPECT_THROW(oracle_action(ep, 4, {}), Error);

  TaskSpec mr;
  auto ep2 = generate_episode(mr, 9);
  EXPECT_EQ(oracle_action(ep2, 3, {}).first.size(), 1u);
}

TEST(Dataset, SplitFilesAndManifest) {
  auto dir = scratch_dir("split");
  DatasetPlan plan;
  plan.specs = {TaskSpec{}};
  plan.train = 80;
  plan.val = 10;
  plan.test = 10;
  auto ds = make_dataset(plan, 11, dir);
  EXPECT_EQ(line_count(dir / "train.jsonl"), 80u);
  EXPECT_EQ(line_count(dir / "val.jsonl"), 10u);
  EXPECT_EQ(line_count(dir / "test.jsonl"), 10u);

  auto loaded = load_dataset(dir);
  ASSERT_EQ(loaded.test.size(), 10u);
  expect_same(loaded.test[3], ds.test[3]);

  auto manifest = read_manifest(dir / "manifest.json");
  ASSERT_EQ(manifest.size(), 100u);
  std::set<std::uint64_t> seeds;
  for (const auto& e : manifest) seeds.insert(e.seed);
  EXPECT_EQ(seeds.size(), 100u);
  EXPECT_EQ(manifest[85].split, "val");
  expect_same(replay(manifest[85]), ds.val[5]);
  expect_same(replay(manifest[0]), ds.train[0]);
  fs::remove_all(dir);
}

TEST(Dataset, SameSeedByteIdentical) {
  auto a = scratch_dir("a"), b = scratch_dir("b");
  DatasetPlan plan;
  TaskSpec dc;
  dc.kind = TaskKind::distinct_choice;
  dc.episode_length = 4;
  plan.specs = {TaskSpec{}, dc};
  make_dataset(plan, 3, a);
  make_dataset(plan, 3, b);
  for (const char* f : {"train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"})
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Dataset, Errors) {
  DatasetPlan plan;
  EXPECT_THROW(build_dataset(plan, 1), Error);
  plan.specs = {TaskSpec{}};
  plan.train = plan.val = plan.test = 0;
  EXPECT_THROW(build_dataset(plan, 1), Error);
  EXPECT_THROW(load_dataset("/nonexistent/whc"), Error);
  auto dir = scratch_dir("badmanifest");
  fs::create_directories(dir);
  std::ofstream(dir / "manifest.json") << R"({"generator_version":"other/0","episodes":[]})";
  EXPECT_THROW(read_manifest(dir / "manifest.json"), Error);
  fs::remove_all(dir);
}
