#include <gtest/gtest.h>

#include <cmath>

#include "whc/agent.hpp"
#include "whc/env.hpp"

using namespace whc;
using Td = Tensor<double>;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.width = 16;
  cfg.heads = 2;
  cfg.encoder_layers = 1;
  cfg.compressor = CompressorConfig{4, 16, 1, 2, 5, 1, true};
  return cfg;
}

LabeledStep episode_step(std::size_t t, std::size_t verbosity = 6, std::uint64_t seed = 3) {
  TaskSpec spec;
  spec.verbosity = verbosity;
  auto ep = generate_episode(spec, seed, "t");
  return make_labeled_step(ep, t, 5);
}

// Flat step with two-token candidates over arbitrary word tokens.
StepInput flat_step(std::size_t candidates) {
  StepInput s;
  s.instruction_tokens = {vocab::word(1), vocab::word(2)};
  for (std::size_t i = 0; i < candidates; ++i) {
    s.candidates.push_back({static_cast<std::int32_t>(i), s.current_state_tokens.size(), 2});
    s.current_state_tokens.push_back(vocab::word(10));
    s.current_state_tokens.push_back(vocab::word(11));
  }
  return s;
}

void zero(Td& t) {
  for (auto& x : t.mutable_data()) x = 0;
}

void expect_equal(const Td& a, const Td& b) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a.at(i), b.at(i)) << i;
}

}  // namespace

TEST(Assemble, HistoryRowCounts) {
  auto cfg = small_config();
  auto p = init_model<double>(cfg, 1);
  auto s0 = episode_step(0);
  EXPECT_EQ(assemble(s0.input, p, cfg).history_tokens.dim(0), 0u);
  auto s2 = episode_step(2);
  ASSERT_EQ(s2.input.histories.size(), 2u);
  auto in = assemble(s2.input, p, cfg);
  EXPECT_EQ(in.history_tokens.dim(0), 8u);
  EXPECT_EQ(in.history_tokens.cols(), 16u);
  EXPECT_EQ(in.history_token_counts, (std::vector<std::size_t>{4, 4}));
}

TEST(Assemble, DeskConfigTwoHistoriesGiveSixteenRows) {
  ModelConfig cfg;
  cfg.compressor.max_histories = 2;
  auto p = init_model<double>(cfg, 2);
  auto s = episode_step(4);
  ASSERT_EQ(s.input.histories.size(), 4u);
  s.input.histories.erase(s.input.histories.begin(), s.input.histories.begin() + 2);
  EXPECT_EQ(assemble(s.input, p, cfg).history_tokens.dim(0), 16u);
  EXPECT_THROW(assemble(episode_step(4).input, p, cfg), Error);
}

TEST(Assemble, CandidateViewDropsOtherElements) {
  auto cfg = small_config();
  auto p = init_model<double>(cfg, 3);
  auto s = episode_step(1, 20);
  auto [tokens, spans] = current_view(s.input, CurrentView::candidates);
  EXPECT_LT(tokens.size(), s.input.current_state_tokens.size());
  ASSERT_EQ(spans.size(), s.input.candidates.size());
  for (std::size_t i = 0; i < spans.size(); ++i) {
    const auto& c = s.input.candidates[i];
    for (std::size_t k = 0; k < c.len; ++k)
      EXPECT_EQ(tokens[spans[i].first + k], s.input.current_state_tokens[c.start + k]);
  }
  auto in = assemble(s.input, p, cfg);
  EXPECT_EQ(in.current.dim(0),
            tokens.size() + s.input.past_action_tokens.size() + s.input.instruction_tokens.size());
}

TEST(Encode, FreshGatesIgnoreHistories) {
  auto cfg = small_config();
  cfg.encoder_layers = 2;
  auto p = init_model<double>(cfg, 4);
  auto s = episode_step(3);
  auto with = assemble(s.input, p, cfg);
  ASSERT_GT(with.history_tokens.dim(0), 0u);
  expect_equal(encode(with.current, with.history_tokens, p, cfg),
               encode(with.current, Td::zeros({0, 16}), p, cfg));
}

TEST(Encode, SingleBlockMatchesComposition) {
  auto cfg = small_config();
  auto p = init_model<double>(cfg, 5);
  SplitMix64 rng(1);
  for (auto& x : p.blocks[0].gate.gates.mutable_data()) x = rng.normal(0, 1);
  auto s = episode_step(2);
  auto in = assemble(s.input, p, cfg);
  const auto& b = p.blocks[0];
  auto x = self_attention(in.current, b.self_attn);
  x = gated_attention(x, in.history_tokens, *b.history_attn, b.gate);
  x = apply(p.final_norm, feed_forward(x, b.ffn));
  expect_equal(encode(in.current, in.history_tokens, p, cfg), x);
}

TEST(Predict, InitEquivalenceOverEpisodeSteps) {
  for (auto integration : {HistoryIntegration::gated_cross, HistoryIntegration::prefix}) {
    auto cfg = small_config();
    cfg.integration = integration;
    auto p = init_model<double>(cfg, 6);
    for (std::size_t t = 0; t < 5; ++t) {
      auto s = episode_step(t, 8, 10 + t);
      auto bare = s.input;
      bare.histories.clear();
      auto a = predict(s.input, p, cfg), b = predict(bare, p, cfg);
      expect_equal(a.element_logits, b.element_logits);
      expect_equal(a.operation_logits, b.operation_logits);
      EXPECT_EQ(a.element_index, b.element_index);
    }
  }
}

TEST(Predict, ShapesDoNotDependOnHistories) {
  auto cfg = small_config();
  auto p = init_model<double>(cfg, 7);
  auto s = episode_step(3);
  auto bare = s.input;
  bare.histories.clear();
  auto a = predict(s.input, p, cfg), b = predict(bare, p, cfg);
  EXPECT_EQ(a.element_logits.shape(), b.element_logits.shape());
  EXPECT_EQ(a.element_logits.shape(), (Shape{1, s.input.candidates.size()}));
  EXPECT_EQ(a.operation_logits.shape(), (Shape{1, 3}));
}

TEST(Predict, SingleCandidateHasProbabilityOne) {
  auto cfg = small_config();
  cfg.view = CurrentView::full;
  auto p = init_model<double>(cfg, 8);
  auto s = flat_step(1);
  s.candidates[0].element_id = 42;
  auto pred = predict(s, p, cfg);
  EXPECT_EQ(pred.element_id, 42);
  EXPECT_DOUBLE_EQ(softmax_lastdim(pred.element_logits).at(0), 1.0);
}

TEST(Predict, DuplicateCandidatesTieToLowerIndex) {
  auto cfg = small_config();
  cfg.view = CurrentView::full;
  auto p = init_model<double>(cfg, 9);
  auto s = flat_step(3);
  // Same span twice: identical pooled vectors, identical logits.
  s.candidates = {{7, 2, 2}, {5, 2, 2}};
  auto pred = predict(s, p, cfg);
  ASSERT_EQ(pred.element_logits.at(0), pred.element_logits.at(1));
  EXPECT_EQ(pred.element_index, 0u);
  EXPECT_EQ(pred.element_id, 7);
  EXPECT_EQ(argmax<double>(std::vector<double>{1, 3, 3, 2}), 1u);
}

TEST(Predict, CraftedCandidateDominates) {
  auto cfg = small_config();
  cfg.view = CurrentView::full;
  auto p = init_model<double>(cfg, 10);
  // Blocks become the identity, so encoded rows are LN of embeddings.
  for (auto& b : p.blocks) {
    zero(b.self_attn.wo);
    zero(b.ffn.w2);
    zero(b.ffn.b2);
  }
  zero(p.embedder.segments);
  zero(p.pointer_w);
  const vocab::Token hot = vocab::word(20), cold = vocab::word(21);
  auto tok = p.embedder.tokens.mutable_data();
  auto pb = p.pointer_b.mutable_data();
  for (std::size_t c = 0; c < 16; ++c) {
    const double u = c % 2 ? -1.0 : 1.0;
    pb[c] = u;
    tok[static_cast<std::size_t>(hot) * 16 + c] = 100 * u;
    tok[static_cast<std::size_t>(cold) * 16 + c] = -100 * u;
  }
  StepInput s;
  s.instruction_tokens = {vocab::word(1)};
  s.candidates = {{0, 0, 2}, {1, 2, 2}, {2, 4, 2}};
  s.current_state_tokens = {cold, cold, cold, cold, hot, hot};
  auto pred = predict(s, p, cfg);
  EXPECT_EQ(pred.element_index, 2u);
  EXPECT_EQ(pred.element_id, 2);
  EXPECT_GT(pred.element_logits.at(2), 10.0);
  EXPECT_LT(pred.element_logits.at(0), -10.0);
}

TEST(Predict, EmptyCandidatesThrow) {
  auto cfg = small_config();
  auto p = init_model<double>(cfg, 11);
  auto s = flat_step(2);
  s.candidates.clear();
  EXPECT_THROW(predict(s, p, cfg), Error);
}

TEST(Predict, Deterministic) {
  auto cfg = small_config();
  auto p = init_model<double>(cfg, 12);
  auto s = episode_step(3);
  auto a = predict(s.input, p, cfg), b = predict(s.input, p, cfg);
  expect_equal(a.element_logits, b.element_logits);
  expect_equal(a.operation_logits, b.operation_logits);
}

TEST(ForwardLoss, UniformLogits) {
  auto cfg = small_config();
  cfg.view = CurrentView::full;
  auto p = init_model<double>(cfg, 13);
  zero(p.pointer_w);
  zero(p.op_w);
  LabeledStep ex{flat_step(4), {1}, 1, Operation::type};
  const LabeledStep batch[] = {ex};
  EXPECT_NEAR(forward_loss<double>(batch, p, cfg).item(), std::log(4.0) + std::log(3.0), 1e-12);
}

TEST(ForwardLoss, HandComputedFixture) {
  auto cfg = small_config();
  cfg.view = CurrentView::full;
  auto p = init_model<double>(cfg, 14);
  zero(p.pointer_w);
  zero(p.op_w);
  auto ob = p.op_b.mutable_data();
  ob[0] = 1;
  ob[1] = 2;
  ob[2] = 3;
  // Element logits are all zero: ln 2. Operation CE with target SELECT on [1,2,3].
  const double op_select = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)) - 3.0;
  const double op_click = op_select + 2.0;
  const LabeledStep batch[] = {{flat_step(2), {0}, 0, Operation::select},
                               {flat_step(2), {1}, 1, Operation::click}};
  EXPECT_NEAR(forward_loss<double>(batch, p, cfg).item(),
              std::log(2.0) + (op_select + op_click) / 2, 1e-12);
  EXPECT_NEAR(op_select, 0.4076, 1e-4);
}

TEST(ForwardLoss, LargeMarginGivesNearZero) {
  auto cfg = small_config();
  cfg.view = CurrentView::full;
  auto p = init_model<double>(cfg, 15);
  zero(p.op_w);
  p.op_b.mutable_data()[0] = 40;
  const LabeledStep batch[] = {{flat_step(1), {0}, 0, Operation::click}};
  EXPECT_LT(forward_loss<double>(batch, p, cfg).item(), 1e-12);
}

TEST(ForwardLoss, InvalidGoldThrows) {
  auto cfg = small_config();
  auto p = init_model<double>(cfg, 16);
  const LabeledStep batch[] = {{flat_step(2), {0}, 2, Operation::click}};
  EXPECT_THROW(forward_loss<double>(batch, p, cfg), Error);
  EXPECT_THROW(forward_loss<double>({}, p, cfg), Error);
}

TEST(ModelParams, CloneCopiesValues) {
  auto cfg = small_config();
  auto p = init_model<double>(cfg, 17);
  auto q = clone_model(p, cfg);
  auto a = p.parameters(), b = q.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) expect_equal(a[i].tensor, b[i].tensor);
  auto other = cfg;
  other.encoder_layers = 2;
  auto r = init_model<double>(other, 1);
  EXPECT_THROW(copy_parameters(p, r), Error);
}

TEST(ModelConfig, Validation) {
  auto cfg = small_config();
  cfg.width = 18;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = small_config();
  cfg.encoder_layers = 0;
  EXPECT_THROW(cfg.validate(), Error);
}
