#include <gtest/gtest.h>

#include "whc/compressor.hpp"

using namespace whc;
using Td = Tensor<double>;

namespace {

Td random(SplitMix64& rng, Shape s, double sd = 1.0) {
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = rng.normal(0, sd);
  return Td(std::move(s), std::move(v));
}

HistoryInput history(std::size_t len, std::size_t step, std::int32_t base = 200) {
  HistoryInput h;
  for (std::size_t i = 0; i < len; ++i) h.state_tokens.push_back(base + static_cast<std::int32_t>(i % 50));
  h.instruction_tokens = {160, 161, 162};
  h.step_index = step;
  return h;
}

void expect_equal(const Td& a, const Td& b) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a.at(i), b.at(i)) << i;
}

}  // namespace

TEST(CompressorConfig, ParameterCountFormula) {
  // Q d + M ((17 + 2w) d^2 + 14 d) with Q=256, d=768, M=2, w=1.
  const auto paper = CompressorConfig::paper();
  EXPECT_EQ(paper.parameter_count(), 22'631'424u);
  auto params = init_compressor<float>(paper, 1);
  EXPECT_EQ(parameter_count(named_parameters<float>(params)), paper.parameter_count());

  CompressorConfig desk;
  auto small = init_compressor<double>(desk, 1);
  EXPECT_EQ(parameter_count(named_parameters<double>(small)), desk.parameter_count());
}

TEST(CompressorConfig, QueryTableShape) {
  CompressorConfig cfg{8, 16, 1, 2, 5, 1, true};
  auto p = init_compressor<double>(cfg, 3);
  EXPECT_EQ(p.queries.shape(), (Shape{8, 16}));
  EXPECT_EQ(p.layers.size(), 1u);
}

TEST(CompressorConfig, SameSeedSameParameters) {
  CompressorConfig cfg;
  auto a = init_compressor<double>(cfg, 42);
  auto b = init_compressor<double>(cfg, 42);
  auto c = init_compressor<double>(cfg, 43);
  auto la = named_parameters<double>(a), lb = named_parameters<double>(b), lc = named_parameters<double>(c);
  ASSERT_EQ(la.size(), lb.size());
  for (std::size_t i = 0; i < la.size(); ++i) {
    EXPECT_EQ(la[i].name, lb[i].name);
    expect_equal(la[i].tensor, lb[i].tensor);
  }
  EXPECT_NE(la[0].tensor.at(0), lc[0].tensor.at(0));
}

TEST(CompressorConfig, Validation) {
  EXPECT_THROW((CompressorConfig{0, 16, 1, 2, 5, 1, true}.validate()), Error);
  EXPECT_THROW((CompressorConfig{4, 16, 1, 3, 5, 1, true}.validate()), Error);
  EXPECT_THROW((CompressorConfig{4, 16, 0, 2, 5, 1, true}.validate()), Error);
}

TEST(EmbedHistory, FirstStepHasNoActions) {
  Initializer<double> init(1);
  auto e = make_embedder(init, "e", 512, 8);
  auto h = history(5, 0);
  auto s = embed_history(h, e);
  EXPECT_EQ(s.shape(), (Shape{8, 8}));
  auto direct = e.stream(h.state_tokens, {}, h.instruction_tokens);
  expect_equal(s, direct);
}

TEST(EmbedHistory, ShapeAndDeterminism) {
  Initializer<double> init(2);
  auto e = make_embedder(init, "e", 512, 8);
  auto h = history(11, 1);
  h.action_tokens = {0, 1, 2};
  auto a = embed_history(h, e), b = embed_history(h, e);
  EXPECT_EQ(a.shape(), (Shape{17, 8}));
  expect_equal(a, b);
  h.state_tokens.clear();
  EXPECT_THROW(embed_history(h, e), Error);
}

TEST(Fusion, ZeroWeightsAreIdentity) {
  SplitMix64 rng(1);
  std::vector<Td> f{random(rng, {3, 4}), random(rng, {3, 4})};
  auto out = fuse_histories(f, Td::zeros({12, 4}), Td::zeros({4}), 1);
  ASSERT_EQ(out.size(), 2u);
  expect_equal(out[0], f[0]);
  expect_equal(out[1], f[1]);
}

TEST(Fusion, SingleHistoryHandValue) {
  // N=1, Q=1, d=2: out = f + [0 ; f ; 0] W + b.
  Td f({1, 2}, {1.0, 2.0});
  std::vector<double> w(6 * 2, 0.0);
  w[2 * 2 + 0] = 3.0;   // f_0 -> out_0
  w[3 * 2 + 1] = -1.0;  // f_1 -> out_1
  w[0 * 2 + 0] = 100.0; // left neighbour row, sees zero padding
  auto out = fuse_histories<double>({f}, Td({6, 2}, w), Td({2}, {0.5, 0.25}), 1);
  EXPECT_DOUBLE_EQ(out[0].at(0), 1.0 + 3.0 * 1.0 + 0.5);
  EXPECT_DOUBLE_EQ(out[0].at(1), 2.0 - 1.0 * 2.0 + 0.25);
}

TEST(Fusion, EqualFeaturesGiveEqualInteriorOutputs) {
  SplitMix64 rng(2);
  auto f = random(rng, {2, 4});
  auto w = random(rng, {12, 4});
  auto b = random(rng, {4});
  auto out = fuse_histories<double>({f, f, f, f, f}, w, b, 1);
  for (std::size_t i = 2; i < 4; ++i) expect_equal(out[i], out[1]);
  // Boundary rows see zero padding and differ.
  EXPECT_NE(out[0].at(0), out[1].at(0));
}

TEST(Fusion, RejectsWrongWeightShape) {
  EXPECT_THROW(fuse_histories<double>({Td::zeros({2, 4})}, Td::zeros({8, 4}), Td::zeros({4}), 1),
               ShapeError);
}

TEST(CompressLayer, SingleHistoryShape) {
  CompressorConfig cfg{4, 8, 1, 2, 5, 1, true};
  auto p = init_compressor<double>(cfg, 5);
  SplitMix64 rng(3);
  auto out = compress_layer<double>({p.queries}, {random(rng, {6, 8})}, p.layers[0], cfg);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].shape(), (Shape{4, 8}));
}

TEST(CompressLayer, IdenticalHistoriesGiveIdenticalOutputs) {
  CompressorConfig cfg{4, 8, 1, 2, 5, 1, true};
  auto p = init_compressor<double>(cfg, 6);
  SplitMix64 rng(4);
  auto stream = random(rng, {9, 8});
  auto out = compress_layer<double>({p.queries, p.queries}, {stream, stream}, p.layers[0], cfg);
  expect_equal(out[0], out[1]);

  // Trained fusion weights keep the symmetry when both neighbour blocks agree.
  auto& w = p.layers[0].fusion_w;
  auto v = w.mutable_data();
  for (std::size_t r = 0; r < 8; ++r) {
    for (std::size_t c = 0; c < 8; ++c) {
      const double x = rng.normal(0, 0.3);
      v[r * 8 + c] = x;
      v[(16 + r) * 8 + c] = x;
      v[(8 + r) * 8 + c] = rng.normal(0, 0.3);
    }
  }
  out = compress_layer<double>({p.queries, p.queries}, {stream, stream}, p.layers[0], cfg);
  for (std::size_t i = 0; i < out[0].numel(); ++i) EXPECT_NEAR(out[0].at(i), out[1].at(i), 1e-12);
}

TEST(CompressLayer, MatchesCompositionOfSubBlocks) {
  CompressorConfig cfg{4, 8, 1, 2, 5, 1, true};
  auto p = init_compressor<double>(cfg, 7);
  SplitMix64 rng(5);
  p.visit("", [&](const std::string&, Td& t) {
    for (auto& x : t.mutable_data()) x += rng.normal(0, 0.3);
  });
  std::vector<Td> states, streams;
  for (std::size_t i = 0; i < 3; ++i) {
    states.push_back(random(rng, {4, 8}));
    streams.push_back(random(rng, {5 + 2 * i, 8}));
  }
  const auto& L = p.layers[0];
  std::vector<Td> feats;
  for (std::size_t i = 0; i < 3; ++i) {
    auto z = multi_head_attention(states[i], states[i], L.self_attn);
    z = multi_head_attention(z, streams[i], L.cross_attn);
    feats.push_back(feed_forward(z, L.ffn));
  }
  // Straight-line fusion: f_i + [f_{i-1}; f_i; f_{i+1}] W + b.
  auto got = compress_layer<double>(states, streams, L, cfg);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t q = 0; q < 4; ++q) {
      for (std::size_t c = 0; c < 8; ++c) {
        double v = feats[i].at(q, c) + L.fusion_b.at(c);
        for (int o = -1; o <= 1; ++o) {
          const int j = static_cast<int>(i) + o;
          if (j < 0 || j >= 3) continue;
          for (std::size_t k = 0; k < 8; ++k)
            v += feats[static_cast<std::size_t>(j)].at(q, k) * L.fusion_w.at((static_cast<std::size_t>(o + 1) * 8 + k), c);
        }
        EXPECT_NEAR(got[i].at(q, c), v, 1e-12);
      }
    }
  }
}

TEST(CompressLayer, FusionOffSkipsMixing) {
  CompressorConfig cfg{4, 8, 1, 2, 5, 1, false};
  auto p = init_compressor<double>(cfg, 8);
  SplitMix64 rng(6);
  auto a = random(rng, {7, 8}), b = random(rng, {3, 8});
  auto both = compress_layer<double>({p.queries, p.queries}, {a, b}, p.layers[0], cfg);
  auto alone = compress_layer<double>({p.queries}, {a}, p.layers[0], cfg);
  expect_equal(both[0], alone[0]);
}

TEST(Compress, NoHistoriesGiveEmptyList) {
  CompressorConfig cfg;
  Initializer<double> init(1);
  auto e = make_embedder(init, "e", 512, cfg.width);
  auto p = init_compressor(cfg, init, "c");
  EXPECT_TRUE(compress<double>({}, p, cfg, e).empty());
}

TEST(Compress, OutputLengthIsFixed) {
  CompressorConfig cfg;
  Initializer<double> init(2);
  auto e = make_embedder(init, "e", 512, cfg.width);
  auto p = init_compressor(cfg, init, "c");
  auto out = compress<double>({history(50, 0), history(5000, 1)}, p, cfg, e);
  ASSERT_EQ(out.size(), 2u);
  for (const auto& h : out) EXPECT_EQ(h.vectors.shape(), (Shape{cfg.queries, cfg.width}));
  EXPECT_EQ(out[1].source_step, 1u);
}

TEST(Compress, TooManyHistoriesThrow) {
  CompressorConfig cfg;
  cfg.max_histories = 2;
  Initializer<double> init(3);
  auto e = make_embedder(init, "e", 512, cfg.width);
  auto p = init_compressor(cfg, init, "c");
  EXPECT_THROW(compress<double>({history(4, 0), history(4, 1), history(4, 2)}, p, cfg, e), Error);
}

TEST(Compress, PaperConfigGivesFiveFullBlocks) {
  const auto cfg = CompressorConfig::paper();
  Initializer<float> init(4);
  auto e = make_embedder(init, "e", 512, cfg.width);
  auto p = init_compressor(cfg, init, "c");
  std::vector<HistoryInput> hs;
  for (std::size_t i = 0; i < 5; ++i) hs.push_back(history(12, i));
  NoGradGuard no_grad;
  auto out = compress<float>(hs, p, cfg, e);
  ASSERT_EQ(out.size(), 5u);
  for (const auto& h : out) EXPECT_EQ(h.vectors.shape(), (Shape{256, 768}));
}
