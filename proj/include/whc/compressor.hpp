#pragma once

// History compressor: each history input is reduced to exactly Q vectors by
// M stacked layers of
//
//   self-attention over the Q query states
//   -> cross-attention from the query states into that history's token stream
//   -> feed-forward
//   -> fusion with neighbouring histories (channel concat + linear, residual)
//
// One parameter set is shared by every history.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "whc/nn.hpp"
#include "whc/step.hpp"

namespace whc {

struct CompressorConfig {
  std::size_t queries = 8;        // Q
  std::size_t width = 64;         // d
  std::size_t layers = 2;         // M
  std::size_t heads = 4;          // h
  std::size_t max_histories = 5;  // N_max
  std::size_t fusion_window = 1;  // neighbours on each side
  bool fusion = true;

  static CompressorConfig paper() { return {256, 768, 2, 12, 5, 1, true}; }
  static CompressorConfig desk() { return {}; }

  void validate() const {
    if (queries == 0) throw Error("compressor: queries must be >= 1");
    if (layers == 0) throw Error("compressor: layers must be >= 1");
    if (heads == 0 || width % heads != 0) {
      throw Error("compressor: width " + std::to_string(width) + " not divisible by " +
                  std::to_string(heads) + " heads");
    }
  }

  /// Q d + M ((17 + 2w) d^2 + 14 d)
  ///
  /// per layer: self-attention 4d^2 + 2d, cross-attention 4d^2 + 4d,
  /// feed-forward 8d^2 + 7d, fusion (2w+1) d^2 + d.
  std::size_t parameter_count() const {
    const std::size_t d = width, w = fusion_window;
    return queries * d + layers * ((17 + 2 * w) * d * d + 14 * d);
  }
};

/// Token table plus segment offsets (state / actions / instruction) and
/// sinusoidal positions. Shared by the compressor and the current stream.
template <typename T>
struct Embedder {
  static constexpr double kInitStd = 1.0;
  enum Segment : std::int32_t { state = 0, actions = 1, instruction = 2 };

  Tensor<T> tokens;    // [V x d]
  Tensor<T> segments;  // [3 x d]

  std::size_t width() const { return tokens.cols(); }
  std::size_t vocab_size() const { return tokens.dim(0); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(join_name(prefix, "tokens"), tokens);
    f(join_name(prefix, "segments"), segments);
  }

  /// embed([state ; actions ; instruction]) -> [t x d]
  Tensor<T> stream(std::span<const std::int32_t> state, std::span<const std::int32_t> actions,
                   std::span<const std::int32_t> instruction) const {
    TokenIds ids;
    std::vector<std::int32_t> seg;
    auto put = [&](std::span<const std::int32_t> part, std::int32_t s) {
      ids.insert(ids.end(), part.begin(), part.end());
      seg.insert(seg.end(), part.size(), s);
    };
    put(state, Segment::state);
    put(actions, Segment::actions);
    put(instruction, Segment::instruction);
    auto x = embed<T>(ids, tokens, PositionSignal<T>::sinusoidal());
    if (ids.empty()) return x;
    return add(x, embedding(segments, seg));
  }
};

template <typename T>
Embedder<T> make_embedder(const Initializer<T>& init, const std::string& name, std::size_t vocab,
                          std::size_t d) {
  return {init.normal(join_name(name, "tokens"), {vocab, d}, Embedder<T>::kInitStd),
          init.normal(join_name(name, "segments"), {3, d}, Embedder<T>::kInitStd)};
}

template <typename T>
struct CompressorLayerParams {
  AttentionParams<T> self_attn;
  AttentionParams<T> cross_attn;
  FeedForwardParams<T> ffn;
  Tensor<T> fusion_w;  // [(2w+1) d x d]
  Tensor<T> fusion_b;  // [d]

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    self_attn.visit(join_name(prefix, "self_attn"), f);
    cross_attn.visit(join_name(prefix, "cross_attn"), f);
    ffn.visit(join_name(prefix, "ffn"), f);
    f(join_name(prefix, "fusion_w"), fusion_w);
    f(join_name(prefix, "fusion_b"), fusion_b);
  }
};

template <typename T>
struct CompressorParams {
  Tensor<T> queries;  // [Q x d] learnable query table
  std::vector<CompressorLayerParams<T>> layers;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(join_name(prefix, "queries"), queries);
    for (std::size_t i = 0; i < layers.size(); ++i)
      layers[i].visit(join_name(prefix, "layer" + std::to_string(i)), f);
  }
};

template <typename T>
CompressorParams<T> init_compressor(const CompressorConfig& cfg, const Initializer<T>& init,
                                    const std::string& name = "compressor") {
  cfg.validate();
  const std::size_t d = cfg.width;
  CompressorParams<T> p;
  p.queries = init.normal(join_name(name, "queries"), {cfg.queries, d});
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string ln = join_name(name, "layer" + std::to_string(l));
    CompressorLayerParams<T> layer{
        make_attention(init, join_name(ln, "self_attn"), d, cfg.heads, false),
        make_attention(init, join_name(ln, "cross_attn"), d, cfg.heads, true),
        make_feed_forward(init, join_name(ln, "ffn"), d),
        init.zeros({(2 * cfg.fusion_window + 1) * d, d}),  // fusion starts as a no-op
        init.zeros({d})};
    p.layers.push_back(std::move(layer));
  }
  return p;
}

template <typename T>
CompressorParams<T> init_compressor(const CompressorConfig& cfg, std::uint64_t seed) {
  return init_compressor(cfg, Initializer<T>(seed));
}

template <typename T>
struct CompressedHistory {
  Tensor<T> vectors;  // [Q x d]
  std::size_t source_step = 0;
};

/// Embedded history stream with per-layer cross-attention keys/values
/// computed on first use. Keys/values depend only on the stream, so every
/// step that sees this history can share them.
template <typename T>
struct HistoryStream {
  Tensor<T> tokens;  // [t x d]
  std::size_t source_step = 0;
  std::vector<std::optional<KeyValues<T>>> kv;

  const KeyValues<T>& keyvalues(std::size_t layer, const AttentionParams<T>& cross) {
    if (kv.size() <= layer) kv.resize(layer + 1);
    if (!kv[layer]) {
      kv[layer] = project_keyvalues(apply(cross.kv_norm ? *cross.kv_norm : cross.norm, tokens),
                                    cross);
    }
    return *kv[layer];
  }
};

template <typename T>
Tensor<T> embed_history(const HistoryInput& hist, const Embedder<T>& embedder) {
  if (hist.state_tokens.empty()) throw Error("history input has no state tokens");
  return embedder.stream(hist.state_tokens, hist.action_tokens, hist.instruction_tokens);
}

/// output_i = features_i + W [f_{i-w} ; ... ; f_i ; ... ; f_{i+w}] + b, with
/// zero tensors standing in for neighbours outside [0, N).
template <typename T>
std::vector<Tensor<T>> fuse_histories(const std::vector<Tensor<T>>& features,
                                      const Tensor<T>& weight, const Tensor<T>& bias,
                                      std::size_t window) {
  if (features.empty()) return {};
  const Shape& s = features.front().shape();
  for (const auto& f : features) {
    if (f.shape() != s) throw ShapeError("fuse_histories: unequal feature shapes");
  }
  const std::size_t d = s.back();
  if (weight.rank() != 2 || weight.dim(0) != (2 * window + 1) * d || weight.cols() != d) {
    throw ShapeError("fuse_histories: weight " + shape_str(weight.shape()) + " for window " +
                     std::to_string(window) + " and width " + std::to_string(d));
  }
  const auto zero = Tensor<T>::zeros(s);
  const auto n = static_cast<std::ptrdiff_t>(features.size());
  const auto w = static_cast<std::ptrdiff_t>(window);
  std::vector<Tensor<T>> out;
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    std::vector<Tensor<T>> parts;
    for (std::ptrdiff_t j = i - w; j <= i + w; ++j)
      parts.push_back(j >= 0 && j < n ? features[static_cast<std::size_t>(j)] : zero);
    out.push_back(add(features[static_cast<std::size_t>(i)],
                      add(matmul(concat(parts, 1), weight), bias)));
  }
  return out;
}

/// One compressor layer over all N histories of a step.
template <typename T>
std::vector<Tensor<T>> compress_layer(const std::vector<Tensor<T>>& query_states,
                                      std::span<HistoryStream<T>*> streams,
                                      const CompressorLayerParams<T>& layer,
                                      std::size_t layer_index, const CompressorConfig& cfg) {
  if (query_states.size() != streams.size() || query_states.empty()) {
    throw ShapeError("compress_layer: " + std::to_string(query_states.size()) +
                     " query states for " + std::to_string(streams.size()) + " histories");
  }
  std::vector<Tensor<T>> features;
  for (std::size_t i = 0; i < query_states.size(); ++i) {
    detail::check_width(streams[i]->tokens, cfg.width, "history stream");
    auto z = self_attention(query_states[i], layer.self_attn);
    z = cross_attention(z, streams[i]->keyvalues(layer_index, layer.cross_attn), layer.cross_attn);
    features.push_back(feed_forward(z, layer.ffn));
  }
  if (!cfg.fusion) return features;
  return fuse_histories(features, layer.fusion_w, layer.fusion_b, cfg.fusion_window);
}

template <typename T>
std::vector<Tensor<T>> compress_layer(const std::vector<Tensor<T>>& query_states,
                                      const std::vector<Tensor<T>>& history_streams,
                                      const CompressorLayerParams<T>& layer,
                                      const CompressorConfig& cfg) {
  std::vector<HistoryStream<T>> owned;
  for (const auto& s : history_streams) owned.push_back({s, 0, {}});
  std::vector<HistoryStream<T>*> ptrs;
  for (auto& s : owned) ptrs.push_back(&s);
  return compress_layer<T>(query_states, ptrs, layer, 0, cfg);
}

/// Runs all M layers starting from the shared query table.
template <typename T>
std::vector<CompressedHistory<T>> compress_streams(std::span<HistoryStream<T>*> streams,
                                                   const CompressorParams<T>& params,
                                                   const CompressorConfig& cfg) {
  if (streams.size() > cfg.max_histories) {
    throw Error("compress: " + std::to_string(streams.size()) + " histories exceed N_max = " +
                std::to_string(cfg.max_histories));
  }
  if (streams.empty()) return {};
  std::vector<Tensor<T>> states(streams.size(), params.queries);
  for (std::size_t l = 0; l < params.layers.size(); ++l)
    states = compress_layer<T>(states, streams, params.layers[l], l, cfg);
  std::vector<CompressedHistory<T>> out;
  for (std::size_t i = 0; i < states.size(); ++i)
    out.push_back({states[i], streams[i]->source_step});
  return out;
}

template <typename T>
std::vector<CompressedHistory<T>> compress(const std::vector<HistoryInput>& histories,
                                           const CompressorParams<T>& params,
                                           const CompressorConfig& cfg,
                                           const Embedder<T>& embedder) {
  if (histories.size() > cfg.max_histories) {
    throw Error("compress: " + std::to_string(histories.size()) + " histories exceed N_max = " +
                std::to_string(cfg.max_histories));
  }
  std::vector<HistoryStream<T>> owned;
  for (const auto& h : histories) owned.push_back({embed_history(h, embedder), h.step_index, {}});
  std::vector<HistoryStream<T>*> ptrs;
  for (auto& s : owned) ptrs.push_back(&s);
  return compress_streams<T>(ptrs, params, cfg);
}

}  // namespace whc
