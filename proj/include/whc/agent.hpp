#pragma once

// Action-prediction model. The current stream [state ; past actions ;
// instruction] runs through L encoder blocks
//
//   self-attention -> zero-gated attention into history tokens -> feed-forward
//
// and two heads read the result: a pointer over candidate element spans,
// queried from the instruction rows, and an operation classifier over the
// pooled stream. History tokens are the compressed histories (or a
// baseline's token streams), each tagged with a learned recency embedding.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "whc/baselines.hpp"
#include "whc/compressor.hpp"
#include "whc/nn.hpp"
#include "whc/step.hpp"

namespace whc {

enum class HistoryIntegration { gated_cross, prefix };
enum class CurrentView { full, candidates };

struct ModelConfig {
  std::size_t vocab_size = vocab::kSize;
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t encoder_layers = 2;
  CompressorConfig compressor;
  HistoryEncoding history = HistoryEncoding::compressor;
  HistoryIntegration integration = HistoryIntegration::gated_cross;
  CurrentView view = CurrentView::candidates;
  BaselineOptions baseline;

  std::size_t max_histories() const { return compressor.max_histories; }

  void validate() const {
    if (width == 0 || heads == 0 || width % heads != 0) {
      throw Error("model: width " + std::to_string(width) + " not divisible by " +
                  std::to_string(heads) + " heads");
    }
    if (width % 2 != 0) throw Error("model: width must be even for sinusoidal positions");
    if (encoder_layers == 0) throw Error("model: encoder_layers must be >= 1");
    if (compressor.width != width) throw Error("model: compressor width must equal model width");
    compressor.validate();
  }
};

template <typename T>
struct EncoderBlock {
  AttentionParams<T> self_attn;
  std::optional<AttentionParams<T>> history_attn;  // gated_cross integration only
  GateParams<T> gate;
  FeedForwardParams<T> ffn;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    self_attn.visit(join_name(prefix, "self_attn"), f);
    if (history_attn) history_attn->visit(join_name(prefix, "history_attn"), f);
    gate.visit(join_name(prefix, "gate"), f);
    ffn.visit(join_name(prefix, "ffn"), f);
  }
};

template <typename T>
struct ModelParams {
  Embedder<T> embedder;
  Tensor<T> history_index;  // [max(N_max,1) x d], row r = r-th most recent history
  CompressorParams<T> compressor;
  std::vector<EncoderBlock<T>> blocks;
  LayerNormParams<T> final_norm;
  Tensor<T> pointer_w, pointer_b;  // [d x d], [d]
  Tensor<T> op_w, op_b;            // [d x 3], [3]

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    embedder.visit(join_name(prefix, "embedder"), f);
    f(join_name(prefix, "history_index"), history_index);
    compressor.visit(join_name(prefix, "compressor"), f);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].visit(join_name(prefix, "encoder.block" + std::to_string(i)), f);
    final_norm.visit(join_name(prefix, "final_norm"), f);
    f(join_name(prefix, "heads.pointer_w"), pointer_w);
    f(join_name(prefix, "heads.pointer_b"), pointer_b);
    f(join_name(prefix, "heads.op_w"), op_w);
    f(join_name(prefix, "heads.op_b"), op_b);
  }

  ParamList<T> parameters() { return named_parameters<T>(*this); }
};

template <typename T>
ModelParams<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Initializer<T> init(seed);
  const std::size_t d = cfg.width;
  ModelParams<T> p;
  p.embedder = make_embedder(init, "embedder", cfg.vocab_size, d);
  p.history_index =
      init.normal("history_index", {std::max<std::size_t>(cfg.max_histories(), 1), d},
                  Embedder<T>::kInitStd);
  p.compressor = init_compressor(cfg.compressor, init, "compressor");
  for (std::size_t l = 0; l < cfg.encoder_layers; ++l) {
    const std::string bn = "encoder.block" + std::to_string(l);
    EncoderBlock<T> b;
    b.self_attn = make_attention(init, join_name(bn, "self_attn"), d, cfg.heads, false);
    if (cfg.integration == HistoryIntegration::gated_cross)
      b.history_attn = make_attention(init, join_name(bn, "history_attn"), d, cfg.heads, true);
    b.gate = make_gate(init, cfg.heads);
    b.ffn = make_feed_forward(init, join_name(bn, "ffn"), d);
    p.blocks.push_back(std::move(b));
  }
  p.final_norm = make_layer_norm(init, d);
  p.pointer_w = init.normal("heads.pointer_w", {d, d});
  p.pointer_b = init.zeros({d});
  p.op_w = init.normal("heads.op_w", {d, kNumOperations});
  p.op_b = init.zeros({kNumOperations});
  return p;
}

/// Copies every parameter value from src into dst; names and shapes must agree.
template <typename T>
void copy_parameters(ModelParams<T>& src, ModelParams<T>& dst) {
  auto a = src.parameters();
  auto b = dst.parameters();
  if (a.size() != b.size()) throw Error("copy_parameters: parameter sets differ");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].tensor.shape() != b[i].tensor.shape()) {
      throw Error("copy_parameters: mismatch at " + a[i].name);
    }
    std::copy(a[i].tensor.data().begin(), a[i].tensor.data().end(),
              b[i].tensor.mutable_data().begin());
  }
}

template <typename T>
ModelParams<T> clone_model(ModelParams<T>& src, const ModelConfig& cfg) {
  auto out = init_model<T>(cfg, 0);
  copy_parameters(src, out);
  return out;
}

/// Per-episode cache of embedded history streams keyed by source step.
/// Valid only for one episode and one parameter state.
template <typename T>
struct HistoryCache {
  std::map<std::size_t, HistoryStream<T>> streams;
};

template <typename T>
struct AssembledInput {
  Tensor<T> current;         // [s x d]
  Tensor<T> history_tokens;  // [(sum of per-history rows) x d]
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // candidate spans in `current`
  std::vector<std::size_t> history_token_counts;
};

/// Current-state tokens the encoder reads, with candidate spans remapped.
/// `candidates` keeps page structure outside leaf elements plus the
/// candidate elements themselves, dropping the other elements.
inline std::pair<TokenIds, std::vector<std::pair<std::size_t, std::size_t>>> current_view(
    const StepInput& step, CurrentView view) {
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  if (view == CurrentView::full) {
    for (const auto& c : step.candidates) spans.emplace_back(c.start, c.len);
    return {step.current_state_tokens, spans};
  }
  const auto& tokens = step.current_state_tokens;
  std::vector<bool> keep(tokens.size(), true);
  auto overlaps_candidate = [&](std::size_t s, std::size_t l) {
    for (const auto& c : step.candidates)
      if (s < c.start + c.len && c.start < s + l) return true;
    return false;
  };
  for (const auto& e : vocab::leaf_elements(tokens)) {
    if (!overlaps_candidate(e.start, e.len))
      std::fill_n(keep.begin() + static_cast<std::ptrdiff_t>(e.start), e.len, false);
  }
  std::vector<std::size_t> new_index(tokens.size() + 1, 0);
  TokenIds out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    new_index[i] = out.size();
    if (keep[i]) out.push_back(tokens[i]);
  }
  for (const auto& c : step.candidates) spans.emplace_back(new_index[c.start], c.len);
  return {out, spans};
}

template <typename T>
AssembledInput<T> assemble(const StepInput& step, const ModelParams<T>& params,
                           const ModelConfig& cfg, HistoryCache<T>* cache = nullptr) {
  step.validate();
  const std::size_t n = step.histories.size();
  if (n > cfg.max_histories()) {
    throw Error("assemble: " + std::to_string(n) + " histories exceed N_max = " +
                std::to_string(cfg.max_histories()));
  }
  AssembledInput<T> out;
  auto [tokens, spans] = current_view(step, cfg.view);
  out.current = params.embedder.stream(tokens, step.past_action_tokens, step.instruction_tokens);
  out.spans = std::move(spans);

  const std::size_t d = cfg.width;
  std::vector<Tensor<T>> rows;
  auto tag = [&](const Tensor<T>& x, std::size_t i) {
    const std::size_t recency = n - 1 - i;
    return add(x, reshape(slice(params.history_index, 0, recency, 1), {d}));
  };
  if (cfg.history == HistoryEncoding::compressor && n > 0) {
    std::map<std::size_t, HistoryStream<T>> local;
    auto& store = cache ? cache->streams : local;
    std::vector<HistoryStream<T>*> ptrs;
    for (const auto& h : step.histories) {
      auto it = store.find(h.step_index);
      if (it == store.end()) {
        it = store.emplace(h.step_index,
                           HistoryStream<T>{embed_history(h, params.embedder), h.step_index, {}})
                 .first;
      }
      ptrs.push_back(&it->second);
    }
    auto compressed = compress_streams<T>(ptrs, params.compressor, cfg.compressor);
    for (std::size_t i = 0; i < n; ++i) {
      rows.push_back(tag(compressed[i].vectors, i));
      out.history_token_counts.push_back(compressed[i].vectors.dim(0));
    }
  } else if (cfg.history != HistoryEncoding::compressor) {
    auto streams = baseline_encode(cfg.history, step.histories, cfg.baseline);
    for (std::size_t i = 0; i < streams.size(); ++i) {
      out.history_token_counts.push_back(streams[i].size());
      if (streams[i].empty()) continue;
      rows.push_back(tag(params.embedder.stream(streams[i], {}, {}), i));
    }
  }
  out.history_tokens = rows.empty() ? Tensor<T>::zeros({0, d}) : concat(rows, 0);
  return out;
}

template <typename T>
Tensor<T> encode(const Tensor<T>& current, const Tensor<T>& history_tokens,
                 const ModelParams<T>& params, const ModelConfig& cfg) {
  detail::check_width(current, cfg.width, "encoder input");
  const bool have_history = history_tokens.numel() > 0;
  if (have_history) detail::check_width(history_tokens, cfg.width, "history tokens");
  Tensor<T> x = current;
  for (const auto& b : params.blocks) {
    if (cfg.integration == HistoryIntegration::prefix && have_history) {
      x = prefix_gated_self_attention(x, history_tokens, b.self_attn, b.gate);
    } else {
      x = self_attention(x, b.self_attn);
      if (have_history) x = gated_attention(x, history_tokens, *b.history_attn, b.gate);
    }
    x = feed_forward(x, b.ffn);
  }
  return apply(params.final_norm, x);
}

template <typename T>
struct ActionPrediction {
  Tensor<T> element_logits;    // [1 x #candidates]
  Tensor<T> operation_logits;  // [1 x 3]
  std::size_t element_index = 0;
  std::int32_t element_id = 0;
  Operation operation = Operation::click;
};

/// First maximum wins.
template <typename T>
std::size_t argmax(std::span<const T> v) {
  if (v.empty()) throw Error("argmax of empty range");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

template <typename T>
ActionPrediction<T> predict(const StepInput& step, const ModelParams<T>& params,
                            const ModelConfig& cfg, HistoryCache<T>* cache = nullptr) {
  if (step.candidates.empty()) throw Error("predict: step has no candidate elements");
  auto in = assemble(step, params, cfg, cache);
  auto enc = encode(in.current, in.history_tokens, params, cfg);
  const std::size_t d = cfg.width;
  auto pooled = reshape(mean_rows(enc, 0, enc.dim(0)), {1, d});
  // The pointer reads the instruction rows, which sit at the end of the stream.
  const std::size_t ni = step.instruction_tokens.size();
  auto pointer_src = ni > 0 ? reshape(mean_rows(enc, enc.dim(0) - ni, ni), {1, d}) : pooled;
  auto pointer = add(matmul(pointer_src, params.pointer_w), params.pointer_b);
  std::vector<Tensor<T>> span_means;
  for (const auto& [start, len] : in.spans)
    span_means.push_back(reshape(mean_rows(enc, start, len), {1, d}));
  ActionPrediction<T> out;
  out.element_logits = matmul_nt(pointer, concat(span_means, 0));
  out.operation_logits = add(matmul(pooled, params.op_w), params.op_b);
  out.element_index = argmax(out.element_logits.data());
  out.element_id = step.candidates[out.element_index].element_id;
  out.operation = static_cast<Operation>(argmax(out.operation_logits.data()));
  return out;
}

/// Element cross-entropy plus operation cross-entropy for one step.
template <typename T>
Tensor<T> step_loss(const LabeledStep& ex, const ModelParams<T>& params, const ModelConfig& cfg,
                    HistoryCache<T>* cache = nullptr) {
  if (ex.target_index >= ex.input.candidates.size()) {
    throw Error("gold element index " + std::to_string(ex.target_index) + " out of range for " +
                std::to_string(ex.input.candidates.size()) + " candidates");
  }
  auto pred = predict(ex.input, params, cfg, cache);
  const std::size_t el[] = {ex.target_index};
  const std::size_t op[] = {static_cast<std::size_t>(ex.gold_op)};
  return add(cross_entropy(pred.element_logits, std::span<const std::size_t>(el)),
             cross_entropy(pred.operation_logits, std::span<const std::size_t>(op)));
}

/// Mean over the batch of element CE + operation CE.
template <typename T>
Tensor<T> forward_loss(std::span<const LabeledStep> batch, const ModelParams<T>& params,
                       const ModelConfig& cfg) {
  if (batch.empty()) throw Error("forward_loss: empty batch");
  std::vector<Tensor<T>> losses;
  for (const auto& ex : batch) losses.push_back(step_loss(ex, params, cfg));
  return scale(sum(concat(losses, 0)), T(1) / static_cast<T>(batch.size()));
}

}  // namespace whc
