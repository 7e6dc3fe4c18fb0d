#pragma once

// Token layout of the pseudo-HTML vocabulary and a small parser that recovers
// element spans from a serialized page.
//
//   0            PAD
//   1..8         OPEN_<tag>   (page, div, span, li, a, p, button, section)
//   9..16        CLOSE_<tag>
//   17..40       attribute tokens
//   41..43       MODE_CLICK, MODE_TYPE, MODE_SELECT   (page header)
//   44..46       OP_CLICK, OP_TYPE, OP_SELECT         (action records)
//   47           ACT
//   48           CLICKED                              (history marker)
//   49..51       TASK_DISTINCT, TASK_RECALL, TASK_COPY
//   52..83       POS_0..POS_31                        (candidate position)
//   84..115      NAME_0..NAME_31                      (item label)
//   116..147     CODE_0..CODE_31                      (item reference code)
//   148..511     words

#include <cstdint>
#include <string>
#include <vector>

#include "whc/tensor.hpp"

namespace whc::vocab {

using Token = std::int32_t;

inline constexpr Token kPad = 0;
inline constexpr int kNumTags = 8;
enum class Tag : int { page = 0, div, span, li, a, p, button, section };

inline constexpr Token kOpenBase = 1;
inline constexpr Token kCloseBase = kOpenBase + kNumTags;
inline constexpr Token kAttrBase = kCloseBase + kNumTags;
inline constexpr int kNumAttrs = 24;
inline constexpr Token kModeBase = kAttrBase + kNumAttrs;  // 41
inline constexpr Token kOpBase = kModeBase + 3;            // 44
inline constexpr Token kAct = kOpBase + 3;                 // 47
inline constexpr Token kClicked = kAct + 1;                // 48
inline constexpr Token kTaskBase = kClicked + 1;           // 49
inline constexpr Token kPosBase = kTaskBase + 3;           // 52
inline constexpr int kMaxItems = 32;
inline constexpr Token kNameBase = kPosBase + kMaxItems;   // 84
inline constexpr Token kCodeBase = kNameBase + kMaxItems;  // 116
inline constexpr Token kWordBase = kCodeBase + kMaxItems;  // 148
inline constexpr std::size_t kSize = 512;
inline constexpr int kNumWords = static_cast<int>(kSize) - kWordBase;

static_assert(kWordBase == 148);

constexpr Token open(Tag t) { return kOpenBase + static_cast<int>(t); }
constexpr Token close(Tag t) { return kCloseBase + static_cast<int>(t); }
constexpr Token attr(int i) { return kAttrBase + i; }
constexpr Token name(int item) { return kNameBase + item; }
constexpr Token code(int item) { return kCodeBase + item; }
constexpr Token pos(int i) { return kPosBase + i; }
constexpr Token word(int i) { return kWordBase + i; }

constexpr bool is_open(Token t) { return t >= kOpenBase && t < kCloseBase; }
constexpr bool is_close(Token t) { return t >= kCloseBase && t < kAttrBase; }
constexpr bool is_code(Token t) { return t >= kCodeBase && t < kWordBase; }
constexpr bool is_name(Token t) { return t >= kNameBase && t < kCodeBase; }
constexpr int tag_of(Token t) { return is_open(t) ? t - kOpenBase : t - kCloseBase; }

/// Element span within a token stream.
struct ElementSpan {
  std::size_t start = 0;
  std::size_t len = 0;
  int depth = 0;      // 0 for the page root
  bool leaf = false;  // contains no nested element
};

/// Parses OPEN/CLOSE structure. Throws on unbalanced or mismatched tags.
inline std::vector<ElementSpan> parse_elements(const std::vector<Token>& tokens) {
  std::vector<ElementSpan> out;
  std::vector<std::size_t> stack;  // indices into out
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const Token t = tokens[i];
    if (is_open(t)) {
      if (!stack.empty()) out[stack.back()].leaf = false;
      out.push_back({i, 0, static_cast<int>(stack.size()), true});
      stack.push_back(out.size() - 1);
    } else if (is_close(t)) {
      if (stack.empty()) throw Error("pseudo-HTML: unmatched close tag at " + std::to_string(i));
      auto& e = out[stack.back()];
      if (tag_of(tokens[e.start]) != tag_of(t)) {
        throw Error("pseudo-HTML: mismatched close tag at " + std::to_string(i));
      }
      e.len = i + 1 - e.start;
      stack.pop_back();
    }
  }
  if (!stack.empty()) throw Error("pseudo-HTML: unclosed element");
  return out;
}

/// Leaf elements in document order.
inline std::vector<ElementSpan> leaf_elements(const std::vector<Token>& tokens) {
  std::vector<ElementSpan> out;
  for (const auto& e : parse_elements(tokens))
    if (e.leaf && e.depth > 0) out.push_back(e);
  return out;
}

}  // namespace whc::vocab
