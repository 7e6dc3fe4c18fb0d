#pragma once

// Comparison history encoders that hand raw token streams to the agent in
// place of compressed vectors: nothing (no-history model), truncation,
// instruction-overlap pruning, and a summarizer behind a transport interface.

#include <chrono>
#include <functional>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "whc/step.hpp"
#include "whc/vocab.hpp"

namespace whc {

enum class HistoryEncoding { none, truncate, prune, summarize, compressor };

inline const char* encoding_name(HistoryEncoding m) {
  switch (m) {
    case HistoryEncoding::none: return "none";
    case HistoryEncoding::truncate: return "truncate";
    case HistoryEncoding::prune: return "prune";
    case HistoryEncoding::summarize: return "summarize";
    case HistoryEncoding::compressor: return "ours";
  }
  return "?";
}

inline HistoryEncoding parse_encoding(const std::string& s) {
  if (s == "none") return HistoryEncoding::none;
  if (s == "truncate") return HistoryEncoding::truncate;
  if (s == "prune") return HistoryEncoding::prune;
  if (s == "summarize") return HistoryEncoding::summarize;
  if (s == "ours" || s == "compressor") return HistoryEncoding::compressor;
  throw Error("unknown history mode '" + s + "'");
}

struct PrunerConfig {
  enum class Scoring { lexical_overlap };
  std::size_t top_k = 50;
  Scoring scoring = Scoring::lexical_overlap;

  void validate() const {
    if (top_k == 0) throw Error("pruner: top_k must be >= 1");
  }
};

/// Scores each element by how many of its tokens occur in the instruction,
/// keeps the top_k (ties go to the earlier element) and emits their tokens in
/// document order.
inline TokenIds prune_history(const TokenIds& state_tokens,
                              std::span<const vocab::ElementSpan> elements,
                              const TokenIds& instruction_tokens, const PrunerConfig& cfg) {
  cfg.validate();
  if (elements.empty()) throw Error("prune_history: no element spans");
  const std::set<std::int32_t> instr(instruction_tokens.begin(), instruction_tokens.end());
  std::vector<std::pair<std::size_t, std::size_t>> scored;  // (score, index)
  for (std::size_t i = 0; i < elements.size(); ++i) {
    const auto& e = elements[i];
    if (e.start + e.len > state_tokens.size()) throw Error("prune_history: span outside state");
    std::size_t s = 0;
    for (std::size_t k = e.start; k < e.start + e.len; ++k) s += instr.count(state_tokens[k]);
    scored.emplace_back(s, i);
  }
  std::stable_sort(scored.begin(), scored.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < std::min(cfg.top_k, scored.size()); ++i)
    keep.push_back(scored[i].second);
  std::sort(keep.begin(), keep.end());
  TokenIds out;
  for (auto i : keep) {
    const auto& e = elements[i];
    out.insert(out.end(), state_tokens.begin() + static_cast<std::ptrdiff_t>(e.start),
               state_tokens.begin() + static_cast<std::ptrdiff_t>(e.start + e.len));
  }
  return out;
}

/// prune_history over the page's leaf elements.
inline TokenIds prune_state(const TokenIds& state_tokens, const TokenIds& instruction_tokens,
                            const PrunerConfig& cfg) {
  auto elements = vocab::leaf_elements(state_tokens);
  return prune_history(state_tokens, elements, instruction_tokens, cfg);
}

inline TokenIds truncate_history(const TokenIds& tokens, std::size_t max_len) {
  return TokenIds(tokens.begin(),
                  tokens.begin() + static_cast<std::ptrdiff_t>(std::min(max_len, tokens.size())));
}

// ---------------------------------------------------------------------------
// Summarizer

struct SummaryRequest {
  TokenIds instruction;
  TokenIds state_tokens;
  std::size_t budget = 0;
};

struct SummaryResponse {
  TokenIds summary;
};

class TransportError : public Error {
 public:
  using Error::Error;
};

/// Carries a summary request to a summarization service. Implementations
/// must tolerate concurrent calls.
class SummarizerTransport {
 public:
  virtual ~SummarizerTransport() = default;
  virtual SummaryResponse send(const SummaryRequest& request,
                               std::chrono::milliseconds timeout) const = 0;
};

/// Offline stand-in: the first `tokens_per_element` tokens of every leaf
/// element, concatenated in document order.
class MockSummarizer final : public SummarizerTransport {
 public:
  explicit MockSummarizer(std::size_t tokens_per_element = 2) : per_element_(tokens_per_element) {}

  SummaryResponse send(const SummaryRequest& request, std::chrono::milliseconds) const override {
    SummaryResponse r;
    for (const auto& e : vocab::leaf_elements(request.state_tokens)) {
      const std::size_t n = std::min(per_element_, e.len);
      r.summary.insert(r.summary.end(),
                       request.state_tokens.begin() + static_cast<std::ptrdiff_t>(e.start),
                       request.state_tokens.begin() + static_cast<std::ptrdiff_t>(e.start + n));
    }
    return r;
  }

 private:
  std::size_t per_element_;
};

/// Transport that always fails; exercises the truncation fallback.
class UnreachableSummarizer final : public SummarizerTransport {
 public:
  SummaryResponse send(const SummaryRequest&, std::chrono::milliseconds timeout) const override {
    throw TransportError("summarizer timed out after " + std::to_string(timeout.count()) + " ms");
  }
};

struct SummarizerClient {
  std::string endpoint = "mock://summarizer";
  std::chrono::milliseconds timeout{2000};
  std::size_t budget = 32;
  std::shared_ptr<const SummarizerTransport> transport = std::make_shared<MockSummarizer>();
  std::function<void(const std::string&)> on_event;  // fallback notifications
};

/// Transport summary capped at the client budget; on transport failure the
/// state is truncated to the budget instead.
inline TokenIds summarize_history(const SummarizerClient& client, const HistoryInput& hist) {
  SummaryRequest req{hist.instruction_tokens, hist.state_tokens, client.budget};
  try {
    if (!client.transport) throw TransportError("no summarizer transport configured");
    auto resp = client.transport->send(req, client.timeout);
    return truncate_history(resp.summary, client.budget);
  } catch (const TransportError& e) {
    if (client.on_event) {
      client.on_event("summarizer " + client.endpoint + " failed (" + e.what() +
                      "); using truncation");
    }
    return truncate_history(hist.state_tokens, client.budget);
  }
}

struct BaselineOptions {
  PrunerConfig pruner{8};
  std::size_t truncate_len = 8;
  SummarizerClient summarizer;
};

/// Token streams that stand in for compressed histories. `none` yields no
/// streams at all, which is exactly the no-history model.
inline std::vector<TokenIds> baseline_encode(HistoryEncoding mode,
                                             const std::vector<HistoryInput>& histories,
                                             const BaselineOptions& opts) {
  std::vector<TokenIds> out;
  if (mode == HistoryEncoding::none) return out;
  for (const auto& h : histories) {
    switch (mode) {
      case HistoryEncoding::truncate:
        out.push_back(truncate_history(h.state_tokens, opts.truncate_len));
        break;
      case HistoryEncoding::prune:
        out.push_back(prune_state(h.state_tokens, h.instruction_tokens, opts.pruner));
        break;
      case HistoryEncoding::summarize:
        out.push_back(summarize_history(opts.summarizer, h));
        break;
      default:
        throw Error("baseline_encode: mode has no token-stream form");
    }
  }
  return out;
}

}  // namespace whc
