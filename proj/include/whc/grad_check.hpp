#pragma once

// Central-difference verification of the analytic gradients of every block.
//
// For each parameter (and input) tensor the error is
//   |a - n| / max(|a|, |n|, 1e-8)
// with a, n the analytic and numeric gradients over a deterministic sample of
// coordinates and |.| the Euclidean norm. Parameters are redrawn at a larger
// scale than the training initialization, with gates away from zero, so every
// path carries gradient.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "whc/agent.hpp"
#include "whc/compressor.hpp"
#include "whc/nn.hpp"

namespace whc {

struct GradCheckOptions {
  double eps = 1e-5;
  std::size_t coords_per_tensor = 24;
  std::size_t seeds = 10;
  double tolerance = 1e-5;
};

struct TensorError {
  std::string name;
  double rel_error = 0;
};

struct GradCheckResult {
  std::string block;
  double max_rel_error = 0;
  std::string worst_tensor;
  std::size_t coords = 0;

  bool passed(double tol) const { return max_rel_error <= tol; }
};

using LossFn = std::function<Tensor<double>()>;

/// Compares backward() against central differences for every tensor in
/// `wrt`; `loss` must rebuild the graph from the current tensor values.
inline std::vector<TensorError> check_gradients(ParamList<double>& wrt, const LossFn& loss,
                                                std::uint64_t seed, const GradCheckOptions& opt,
                                                std::size_t* coords_checked = nullptr) {
  for (auto& p : wrt) p.tensor.zero_grad();
  auto l = loss();
  std::vector<Tensor<double>> ts;
  for (auto& p : wrt) ts.push_back(p.tensor);
  auto grads = backward(l, std::span<const Tensor<double>>(ts));
  for (auto& p : wrt) p.tensor.zero_grad();

  SplitMix64 rng(seed);
  std::vector<TensorError> out;
  NoGradGuard guard;
  for (auto& p : wrt) {
    const std::size_t n = p.tensor.numel();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    if (n > opt.coords_per_tensor) {
      rng.shuffle(idx);
      idx.resize(opt.coords_per_tensor);
      std::sort(idx.begin(), idx.end());
    }
    const auto analytic = grads.at(p.tensor.id()).data();
    auto v = p.tensor.mutable_data();
    double diff2 = 0, a2 = 0, n2 = 0;
    for (auto i : idx) {
      const double orig = v[i];
      v[i] = orig + opt.eps;
      const double up = loss().item();
      v[i] = orig - opt.eps;
      const double down = loss().item();
      v[i] = orig;
      const double numeric = (up - down) / (2 * opt.eps);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
    if (coords_checked) *coords_checked += idx.size();
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-8});
    out.push_back({p.name, std::sqrt(diff2) / denom});
  }
  return out;
}

namespace detail {

inline Tensor<double> random_tensor(SplitMix64& rng, Shape shape, double stddev, double mean = 0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(mean, stddev);
  return Tensor<double>(std::move(shape), std::move(v), true);
}

/// Redraws every tensor: gains near 1, everything else N(0, stddev).
template <typename P>
void randomize(P& params, SplitMix64& rng, double stddev) {
  params.visit("", [&](const std::string& name, Tensor<double>& t) {
    const bool gain = name.size() >= 5 && name.compare(name.size() - 5, 5, "gamma") == 0;
    for (auto& x : t.mutable_data()) x = gain ? rng.normal(1.0, 0.2) : rng.normal(0.0, stddev);
  });
}

/// sum(out * R) for a fixed random R.
inline Tensor<double> project(const Tensor<double>& out, const Tensor<double>& r) {
  return sum(mul(out, r));
}

struct Inputs {
  ParamList<double> list;
  Tensor<double> add(SplitMix64& rng, const std::string& name, Shape shape, double stddev = 1.0) {
    auto t = random_tensor(rng, std::move(shape), stddev);
    list.push_back({name, t});
    return t;
  }
};

template <typename P>
ParamList<double> with_params(ParamList<double> inputs, P& params, const std::string& prefix) {
  auto ps = named_parameters<double>(params, prefix);
  inputs.insert(inputs.end(), ps.begin(), ps.end());
  return inputs;
}

template <typename P>
struct Wrapped {
  P& p;
  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    p.visit(prefix, f);
  }
};

inline GradCheckResult summarize(const std::string& block,
                                 const std::vector<std::vector<TensorError>>& runs,
                                 std::size_t coords) {
  GradCheckResult r{block, 0, "", coords};
  for (const auto& run : runs) {
    for (const auto& e : run) {
      if (e.rel_error >= r.max_rel_error) {
        r.max_rel_error = e.rel_error;
        r.worst_tensor = e.name;
      }
    }
  }
  return r;
}

/// Small episode-shaped input over token ids < vocab.
inline StepInput random_step(SplitMix64& rng, std::size_t vocab, std::size_t histories) {
  auto tokens = [&](std::size_t n) {
    TokenIds t(n);
    for (auto& x : t) x = static_cast<std::int32_t>(rng.below(vocab));
    return t;
  };
  StepInput s;
  s.instruction_tokens = tokens(4);
  for (std::size_t j = 0; j < histories; ++j)
    s.histories.push_back({tokens(10 + rng.below(6)), tokens(3 * j), s.instruction_tokens, j});
  s.current_state_tokens = tokens(14);
  s.past_action_tokens = tokens(3 * histories);
  s.candidates = {{0, 1, 3}, {1, 5, 2}, {2, 8, 4}};
  return s;
}

}  // namespace detail

/// Every block with `opt.seeds` random draws each.
inline std::vector<GradCheckResult> run_grad_check(const GradCheckOptions& opt = {},
                                                   std::uint64_t root_seed = 0) {
  using detail::project;
  const std::size_t d = 8, heads = 2;
  std::vector<GradCheckResult> results;

  auto run_block = [&](const std::string& block,
                       const std::function<std::pair<ParamList<double>, LossFn>(SplitMix64&)>& make) {
    std::vector<std::vector<TensorError>> runs;
    std::size_t coords = 0;
    for (std::size_t s = 0; s < opt.seeds; ++s) {
      const auto seed = substream_seed(substream_seed(root_seed, block), s);
      SplitMix64 rng(seed);
      auto [wrt, loss] = make(rng);
      runs.push_back(check_gradients(wrt, loss, substream_seed(seed, "coords"), opt, &coords));
    }
    results.push_back(detail::summarize(block, runs, coords));
  };

  run_block("layernorm", [&](SplitMix64& rng) {
    detail::Inputs in;
    auto x = in.add(rng, "x", {5, d}, 2.0);
    auto gamma = in.add(rng, "gamma", {d});
    auto beta = in.add(rng, "beta", {d});
    auto r = detail::random_tensor(rng, {5, d}, 1.0);
    r.set_requires_grad(false);
    return std::pair{in.list, LossFn([=] { return project(layer_norm(x, gamma, beta, 1e-5), r); })};
  });

  run_block("attention", [&](SplitMix64& rng) {
    Initializer<double> init(rng.next());
    auto self = std::make_shared<AttentionParams<double>>(make_attention(init, "self", d, heads, false));
    auto cross = std::make_shared<AttentionParams<double>>(make_attention(init, "cross", d, heads, true));
    detail::randomize(*self, rng, 0.5);
    detail::randomize(*cross, rng, 0.5);
    detail::Inputs in;
    auto x = in.add(rng, "x", {5, d});
    auto kv = in.add(rng, "kv", {7, d});
    auto r = detail::random_tensor(rng, {5, d}, 1.0);
    r.set_requires_grad(false);
    AttentionMask mask{5, 5, std::vector<bool>(25, true)};
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = i + 1; j < 5; ++j) mask.allowed[i * 5 + j] = false;
    auto wrt = detail::with_params(detail::with_params(in.list, *self, "self"), *cross, "cross");
    return std::pair{wrt, LossFn([=] {
                       auto y = self_attention(x, *self, &mask);
                       return project(multi_head_attention(y, kv, *cross), r);
                     })};
  });

  run_block("gated_attention", [&](SplitMix64& rng) {
    Initializer<double> init(rng.next());
    auto attn = std::make_shared<AttentionParams<double>>(make_attention(init, "attn", d, heads, true));
    auto gate = std::make_shared<GateParams<double>>(make_gate(init, heads));
    detail::randomize(*attn, rng, 0.5);
    detail::randomize(*gate, rng, 0.8);
    detail::Inputs in;
    auto x = in.add(rng, "x", {5, d});
    auto hist = in.add(rng, "history", {9, d});
    auto r = detail::random_tensor(rng, {5, d}, 1.0);
    r.set_requires_grad(false);
    auto wrt = detail::with_params(detail::with_params(in.list, *attn, "attn"), *gate, "gate");
    return std::pair{wrt, LossFn([=] {
                       auto a = gated_attention(x, hist, *attn, *gate);
                       return project(prefix_gated_self_attention(a, hist, *attn, *gate), r);
                     })};
  });

  run_block("feed_forward", [&](SplitMix64& rng) {
    Initializer<double> init(rng.next());
    auto ffn = std::make_shared<FeedForwardParams<double>>(make_feed_forward(init, "ffn", d));
    detail::randomize(*ffn, rng, 0.5);
    detail::Inputs in;
    auto x = in.add(rng, "x", {5, d});
    auto r = detail::random_tensor(rng, {5, d}, 1.0);
    r.set_requires_grad(false);
    return std::pair{detail::with_params(in.list, *ffn, "ffn"),
                     LossFn([=] { return project(feed_forward(x, *ffn), r); })};
  });

  run_block("fusion", [&](SplitMix64& rng) {
    const std::size_t q = 4, window = 1, n = 3;
    detail::Inputs in;
    std::vector<Tensor<double>> feats;
    for (std::size_t i = 0; i < n; ++i) feats.push_back(in.add(rng, "f" + std::to_string(i), {q, d}));
    auto w = in.add(rng, "fusion_w", {(2 * window + 1) * d, d}, 0.3);
    auto b = in.add(rng, "fusion_b", {d}, 0.3);
    std::vector<Tensor<double>> rs;
    for (std::size_t i = 0; i < n; ++i) {
      rs.push_back(detail::random_tensor(rng, {q, d}, 1.0));
      rs.back().set_requires_grad(false);
    }
    return std::pair{in.list, LossFn([=] {
                       auto out = fuse_histories(feats, w, b, window);
                       auto total = project(out[0], rs[0]);
                       for (std::size_t i = 1; i < n; ++i) total = add(total, project(out[i], rs[i]));
                       return total;
                     })};
  });

  run_block("compressor_layer", [&](SplitMix64& rng) {
    CompressorConfig cfg{4, d, 1, heads, 5, 1, true};
    auto params = std::make_shared<CompressorParams<double>>(init_compressor<double>(cfg, rng.next()));
    detail::randomize(*params, rng, 0.4);
    detail::Inputs in;
    std::vector<Tensor<double>> states, streams;
    for (std::size_t i = 0; i < 3; ++i) {
      states.push_back(in.add(rng, "state" + std::to_string(i), {cfg.queries, d}));
      streams.push_back(in.add(rng, "stream" + std::to_string(i), {6 + i, d}));
    }
    std::vector<Tensor<double>> rs;
    for (std::size_t i = 0; i < 3; ++i) {
      rs.push_back(detail::random_tensor(rng, {cfg.queries, d}, 1.0));
      rs.back().set_requires_grad(false);
    }
    auto wrt = detail::with_params(in.list, params->layers[0], "layer0");
    return std::pair{wrt, LossFn([=] {
                       auto out = compress_layer<double>(states, streams, params->layers[0], cfg);
                       auto total = project(out[0], rs[0]);
                       for (std::size_t i = 1; i < out.size(); ++i) total = add(total, project(out[i], rs[i]));
                       return total;
                     })};
  });

  run_block("desk_model", [&](SplitMix64& rng) {
    ModelConfig cfg;
    cfg.vocab_size = 48;
    cfg.view = CurrentView::full;
    auto params = std::make_shared<ModelParams<double>>(init_model<double>(cfg, rng.next()));
    detail::randomize(*params, rng, 0.15);
    auto ex = std::make_shared<LabeledStep>();
    ex->input = detail::random_step(rng, cfg.vocab_size, 1 + rng.below(3));
    ex->target_index = rng.below(ex->input.candidates.size());
    ex->gold_op = static_cast<Operation>(rng.below(kNumOperations));
    return std::pair{params->parameters(),
                     LossFn([=] { return step_loss(*ex, *params, cfg); })};
  });

  return results;
}

}  // namespace whc
