#pragma once

// Plain data passed between the environment, the compressor and the agent.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "whc/tensor.hpp"
#include "whc/vocab.hpp"

namespace whc {

using TokenIds = std::vector<std::int32_t>;

enum class Operation : std::size_t { click = 0, type = 1, select = 2 };
inline constexpr std::size_t kNumOperations = 3;

inline const char* operation_name(Operation op) {
  switch (op) {
    case Operation::click: return "CLICK";
    case Operation::type: return "TYPE";
    case Operation::select: return "SELECT";
  }
  return "?";
}

inline Operation parse_operation(const std::string& s) {
  if (s == "CLICK") return Operation::click;
  if (s == "TYPE") return Operation::type;
  if (s == "SELECT") return Operation::select;
  throw Error("unknown operation '" + s + "'");
}

/// One past step as seen by the compressor.
struct HistoryInput {
  TokenIds state_tokens;        // page as it was, with the acted-on element marked
  TokenIds action_tokens;       // ACT op pos triples of earlier steps
  TokenIds instruction_tokens;
  std::size_t step_index = 0;

  std::size_t size() const {
    return state_tokens.size() + action_tokens.size() + instruction_tokens.size();
  }
};

struct CandidateSpan {
  std::int32_t element_id = 0;
  std::size_t start = 0;  // offset into current_state_tokens
  std::size_t len = 0;
};

/// Everything the agent sees when choosing the next action.
struct StepInput {
  std::vector<HistoryInput> histories;  // oldest -> newest
  TokenIds current_state_tokens;
  TokenIds past_action_tokens;
  TokenIds instruction_tokens;
  std::vector<CandidateSpan> candidates;

  void validate() const {
    if (candidates.empty()) throw Error("step has no candidate elements");
    for (const auto& c : candidates) {
      if (c.len == 0 || c.start + c.len > current_state_tokens.size()) {
        throw Error("candidate " + std::to_string(c.element_id) + " span outside current state");
      }
    }
    for (std::size_t i = 1; i < histories.size(); ++i) {
      if (histories[i].step_index <= histories[i - 1].step_index) {
        throw Error("history step indices must be strictly increasing");
      }
    }
    for (const auto& h : histories)
      if (h.state_tokens.empty()) throw Error("history with empty state");
  }
};

/// Training/evaluation target for one step.
struct LabeledStep {
  StepInput input;
  std::vector<std::int32_t> gold_ids;  // acceptable element ids
  std::size_t target_index = 0;        // candidate index used as training target
  Operation gold_op = Operation::click;
};

}  // namespace whc
