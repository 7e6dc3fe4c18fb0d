#pragma once

// Transformer building blocks: pre-norm multi-head attention, the
// zero-initialized gated attention used to admit history tokens, a pre-norm
// feed-forward block and token embedding with positional signals.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "whc/params.hpp"
#include "whc/tensor.hpp"

namespace whc {

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(join_name(prefix, "gamma"), gamma);
    f(join_name(prefix, "beta"), beta);
  }
};

template <typename T>
LayerNormParams<T> make_layer_norm(const Initializer<T>& init, std::size_t d) {
  return {init.ones({d}), init.zeros({d})};
}

template <typename T>
Tensor<T> apply(const LayerNormParams<T>& ln, const Tensor<T>& x) {
  return layer_norm(x, ln.gamma, ln.beta, T(1e-5));
}

/// Multi-head attention weights. The h per-head projections (d x d_head) are
/// stored side by side as single d x d matrices; head i owns columns
/// [i*d_head, (i+1)*d_head).
template <typename T>
struct AttentionParams {
  std::size_t heads = 1;
  LayerNormParams<T> norm;                    // on queries_in
  std::optional<LayerNormParams<T>> kv_norm;  // on keyvals_in, cross-attention only
  Tensor<T> wq, wk, wv, wo;

  std::size_t width() const { return wq.dim(0); }
  std::size_t head_dim() const { return width() / heads; }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    norm.visit(join_name(prefix, "norm"), f);
    if (kv_norm) kv_norm->visit(join_name(prefix, "kv_norm"), f);
    f(join_name(prefix, "wq"), wq);
    f(join_name(prefix, "wk"), wk);
    f(join_name(prefix, "wv"), wv);
    f(join_name(prefix, "wo"), wo);
  }
};

template <typename T>
AttentionParams<T> make_attention(const Initializer<T>& init, const std::string& name,
                                  std::size_t d, std::size_t heads, bool cross) {
  if (heads == 0 || d % heads != 0) {
    throw Error("attention: width " + std::to_string(d) + " not divisible by " +
                std::to_string(heads) + " heads");
  }
  AttentionParams<T> p;
  p.heads = heads;
  p.norm = make_layer_norm(init, d);
  if (cross) p.kv_norm = make_layer_norm(init, d);
  p.wq = init.normal(join_name(name, "wq"), {d, d});
  p.wk = init.normal(join_name(name, "wk"), {d, d});
  p.wv = init.normal(join_name(name, "wv"), {d, d});
  p.wo = init.normal(join_name(name, "wo"), {d, d});
  return p;
}

/// One learnable scalar per head; tanh(g_h) scales that head's contribution.
template <typename T>
struct GateParams {
  Tensor<T> gates;  // [h], zero at initialization

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(join_name(prefix, "gates"), gates);
  }
};

template <typename T>
GateParams<T> make_gate(const Initializer<T>& init, std::size_t heads) {
  return {init.zeros({heads})};
}

template <typename T>
struct FeedForwardParams {
  LayerNormParams<T> norm;
  Tensor<T> w1, b1, w2, b2;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    norm.visit(join_name(prefix, "norm"), f);
    f(join_name(prefix, "w1"), w1);
    f(join_name(prefix, "b1"), b1);
    f(join_name(prefix, "w2"), w2);
    f(join_name(prefix, "b2"), b2);
  }
};

template <typename T>
FeedForwardParams<T> make_feed_forward(const Initializer<T>& init, const std::string& name,
                                       std::size_t d) {
  return {make_layer_norm(init, d), init.normal(join_name(name, "w1"), {d, 4 * d}),
          init.zeros({4 * d}), init.normal(join_name(name, "w2"), {4 * d, d}), init.zeros({d})};
}

/// Boolean attention mask; true means the query may attend to the key.
struct AttentionMask {
  std::size_t queries = 0;
  std::size_t keys = 0;
  std::vector<bool> allowed;

  bool at(std::size_t q, std::size_t k) const { return allowed[q * keys + k]; }
};

template <typename T>
struct KeyValues {
  Tensor<T> keys;    // [t x d]
  Tensor<T> values;  // [t x d]
};

template <typename T>
KeyValues<T> project_keyvalues(const Tensor<T>& normed, const AttentionParams<T>& p) {
  return {matmul(normed, p.wk), matmul(normed, p.wv)};
}

namespace detail {

template <typename T>
void check_width(const Tensor<T>& x, std::size_t d, const char* what) {
  if (x.rank() != 2 || x.cols() != d) {
    throw ShapeError(std::string(what) + ": expected [n x " + std::to_string(d) + "], got " +
                     shape_str(x.shape()));
  }
}

template <typename T>
Tensor<T> mask_bias(const AttentionMask& mask, std::size_t q, std::size_t k) {
  if (mask.queries != q || mask.keys != k || mask.allowed.size() != q * k) {
    throw ShapeError("attention mask is " + std::to_string(mask.queries) + "x" +
                     std::to_string(mask.keys) + ", scores are " + std::to_string(q) + "x" +
                     std::to_string(k));
  }
  std::vector<T> bias(q * k, T(0));
  for (std::size_t i = 0; i < q; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < k; ++j) {
      if (mask.at(i, j)) {
        any = true;
      } else {
        bias[i * k + j] = T(-1e9);
      }
    }
    if (!any) throw Error("attention mask row " + std::to_string(i) + " is fully masked");
  }
  return Tensor<T>({q, k}, std::move(bias));
}

/// softmax(q_h k_h^T / sqrt(d_head)) v_h for head `h`.
template <typename T>
Tensor<T> head_attention(const Tensor<T>& q, const KeyValues<T>& kv, std::size_t h,
                         std::size_t dh, const Tensor<T>* bias,
                         std::vector<Tensor<T>>* weights_out) {
  auto qh = slice(q, 1, h * dh, dh);
  auto kh = slice(kv.keys, 1, h * dh, dh);
  auto vh = slice(kv.values, 1, h * dh, dh);
  auto scores = scale(matmul_nt(qh, kh), T(1) / std::sqrt(static_cast<T>(dh)));
  if (bias) scores = add(scores, *bias);
  auto w = softmax_lastdim(scores);
  if (weights_out) weights_out->push_back(w);
  return matmul(w, vh);
}

template <typename T>
Tensor<T> gate_factor(const GateParams<T>& gate, std::size_t h) {
  return whc::tanh(slice(gate.gates, 0, h, 1));
}

}  // namespace detail

/// queries_in + W_o concat_h(attention_h(LN(queries_in), LN_kv(keyvals_in))).
/// Self-attention when keyvals_in is queries_in.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& queries_in, const Tensor<T>& keyvals_in,
                               const AttentionParams<T>& p,
                               const AttentionMask* mask = nullptr,
                               std::vector<Tensor<T>>* weights_out = nullptr) {
  const std::size_t d = p.width();
  detail::check_width(queries_in, d, "attention queries");
  detail::check_width(keyvals_in, d, "attention keys");
  const bool self = queries_in.node() == keyvals_in.node();
  auto qn = apply(p.norm, queries_in);
  auto kvn = self ? qn : apply(p.kv_norm ? *p.kv_norm : p.norm, keyvals_in);
  auto kv = project_keyvalues(kvn, p);
  auto q = matmul(qn, p.wq);
  std::optional<Tensor<T>> bias;
  if (mask) bias = detail::mask_bias<T>(*mask, queries_in.dim(0), keyvals_in.dim(0));
  std::vector<Tensor<T>> heads;
  for (std::size_t h = 0; h < p.heads; ++h) {
    heads.push_back(detail::head_attention<T>(q, kv, h, p.head_dim(), bias ? &*bias : nullptr,
                                           weights_out));
  }
  return add(queries_in, matmul(concat(heads, 1), p.wo));
}

template <typename T>
Tensor<T> self_attention(const Tensor<T>& x, const AttentionParams<T>& p,
                         const AttentionMask* mask = nullptr) {
  return multi_head_attention(x, x, p, mask);
}

/// Cross-attention with keys/values projected ahead of time (they depend only
/// on the key stream, so callers may reuse them across query sets).
template <typename T>
Tensor<T> cross_attention(const Tensor<T>& x, const KeyValues<T>& kv,
                          const AttentionParams<T>& p) {
  detail::check_width(x, p.width(), "cross-attention queries");
  auto q = matmul(apply(p.norm, x), p.wq);
  std::vector<Tensor<T>> heads;
  for (std::size_t h = 0; h < p.heads; ++h)
    heads.push_back(detail::head_attention<T>(q, kv, h, p.head_dim(), nullptr, nullptr));
  return add(x, matmul(concat(heads, 1), p.wo));
}

/// x + W_o concat_h(tanh(g_h) * attention_h(LN(x) -> LN_kv(history_tokens))).
/// With every g_h == 0 the result equals x exactly; with no history tokens
/// x is returned unchanged.
template <typename T>
Tensor<T> gated_attention(const Tensor<T>& x, const Tensor<T>& history_tokens,
                          const AttentionParams<T>& attn, const GateParams<T>& gate,
                          std::vector<Tensor<T>>* weights_out = nullptr) {
  const std::size_t d = attn.width();
  detail::check_width(x, d, "gated attention queries");
  if (history_tokens.numel() == 0) return x;
  detail::check_width(history_tokens, d, "gated attention history");
  if (gate.gates.numel() != attn.heads) {
    throw ShapeError("gate has " + std::to_string(gate.gates.numel()) + " entries for " +
                     std::to_string(attn.heads) + " heads");
  }
  auto kv = project_keyvalues(apply(attn.kv_norm ? *attn.kv_norm : attn.norm, history_tokens),
                              attn);
  auto q = matmul(apply(attn.norm, x), attn.wq);
  std::vector<Tensor<T>> heads;
  for (std::size_t h = 0; h < attn.heads; ++h) {
    auto o = detail::head_attention<T>(q, kv, h, attn.head_dim(), nullptr, weights_out);
    heads.push_back(mul(o, detail::gate_factor(gate, h)));
  }
  return add(x, matmul(concat(heads, 1), attn.wo));
}

/// Self-attention over x whose keys are extended with a gated prefix of
/// history tokens sharing the same projections. Each head's softmax over the
/// prefix is computed separately and scaled by tanh(g_h) before being added to
/// the ordinary self-attention output.
template <typename T>
Tensor<T> prefix_gated_self_attention(const Tensor<T>& x, const Tensor<T>& prefix,
                                      const AttentionParams<T>& p, const GateParams<T>& gate) {
  if (prefix.numel() == 0) return self_attention(x, p);
  const std::size_t d = p.width();
  detail::check_width(x, d, "prefix attention queries");
  detail::check_width(prefix, d, "prefix attention history");
  auto qn = apply(p.norm, x);
  auto kv_self = project_keyvalues(qn, p);
  auto kv_prefix = project_keyvalues(apply(p.norm, prefix), p);
  auto q = matmul(qn, p.wq);
  std::vector<Tensor<T>> heads;
  for (std::size_t h = 0; h < p.heads; ++h) {
    auto own = detail::head_attention<T>(q, kv_self, h, p.head_dim(), nullptr, nullptr);
    auto hist = detail::head_attention<T>(q, kv_prefix, h, p.head_dim(), nullptr, nullptr);
    heads.push_back(add(own, mul(hist, detail::gate_factor(gate, h))));
  }
  return add(x, matmul(concat(heads, 1), p.wo));
}

/// x + W2 gelu(W1 LN(x) + b1) + b2.
template <typename T>
Tensor<T> feed_forward(const Tensor<T>& x, const FeedForwardParams<T>& p) {
  detail::check_width(x, p.w1.dim(0), "feed-forward input");
  auto h = gelu(add(matmul(apply(p.norm, x), p.w1), p.b1));
  return add(x, add(matmul(h, p.w2), p.b2));
}

/// Sinusoidal table rows [0, len) for width d:
///   pe[p][2i]   = sin(p / 10000^(2i/d))
///   pe[p][2i+1] = cos(p / 10000^(2i/d))
template <typename T>
std::vector<T> sinusoid_table(std::size_t len, std::size_t d) {
  std::vector<T> pe(len * d);
  for (std::size_t p = 0; p < len; ++p) {
    for (std::size_t i = 0; 2 * i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * i) / static_cast<double>(d));
      const double angle = static_cast<double>(p) * freq;
      pe[p * d + 2 * i] = static_cast<T>(std::sin(angle));
      if (2 * i + 1 < d) pe[p * d + 2 * i + 1] = static_cast<T>(std::cos(angle));
    }
  }
  return pe;
}

namespace detail {

template <typename T>
const std::vector<T>& cached_sinusoid(std::size_t len, std::size_t d) {
  thread_local std::map<std::size_t, std::pair<std::size_t, std::vector<T>>> cache;
  auto& [n, table] = cache[d];
  if (n < len) {
    n = std::max<std::size_t>(len, 2 * n);
    table = sinusoid_table<T>(n, d);
  }
  return table;
}

}  // namespace detail

template <typename T>
Tensor<T> sinusoid(std::size_t len, std::size_t d, std::size_t offset = 0) {
  const auto& table = detail::cached_sinusoid<T>(offset + len, d);
  return Tensor<T>({len, d}, std::vector<T>(table.begin() + offset * d,
                                            table.begin() + (offset + len) * d));
}

/// Positional signal added by embed().
template <typename T>
struct PositionSignal {
  enum class Kind { none, sinusoidal, history_index } kind = Kind::none;
  const Tensor<T>* index_table = nullptr;
  std::size_t index = 0;

  static PositionSignal none() { return {}; }
  static PositionSignal sinusoidal() { return {Kind::sinusoidal, nullptr, 0}; }
  static PositionSignal history(const Tensor<T>& table, std::size_t i) {
    return {Kind::history_index, &table, i};
  }
};

/// Row lookup plus positional signal. An empty id list gives a 0 x d tensor.
template <typename T>
Tensor<T> embed(std::span<const std::int32_t> ids, const Tensor<T>& table,
                const PositionSignal<T>& pos = PositionSignal<T>::none()) {
  auto rows = embedding(table, ids);
  if (ids.empty()) return rows;
  switch (pos.kind) {
    case PositionSignal<T>::Kind::none:
      return rows;
    case PositionSignal<T>::Kind::sinusoidal:
      return add(rows, sinusoid<T>(ids.size(), table.cols()));
    case PositionSignal<T>::Kind::history_index:
      return add(rows, reshape(slice(*pos.index_table, 0, pos.index, 1), {table.cols()}));
  }
  return rows;
}

}  // namespace whc
