#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <unicode/uchar.h>
#include <unicode/utf8.h>

#include "convert/error.hpp"
#include "convert/hash.hpp"

namespace convert::pairs {

enum class PairSource { general, conversational, faq };

inline std::string_view to_string(PairSource s) {
  switch (s) {
    case PairSource::general: return "general";
    case PairSource::conversational: return "conversational";
    case PairSource::faq: return "faq";
  }
  return "general";
}

inline PairSource parse_source(std::string_view s) {
  if (s == "general") return PairSource::general;
  if (s == "conversational") return PairSource::conversational;
  if (s == "faq") return PairSource::faq;
  fail(ErrorCode::data, "unknown pair source: " + std::string(s));
}

struct UtterancePair {
  std::string input;
  std::string response;
  PairSource source = PairSource::general;

  friend bool operator==(const UtterancePair&, const UtterancePair&) = default;
};

struct CommentNode {
  std::string id;
  std::optional<std::string> parent_id;
  std::string body;
};

using PairSink = std::function<void(UtterancePair)>;

// Number of Unicode code points in a UTF-8 string.
inline std::size_t char_length(std::string_view utf8) {
  std::size_t n = 0;
  for (unsigned char c : utf8) n += (c & 0xC0) != 0x80;
  return n;
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  constexpr std::string_view ws = " \t\r\n\f\v";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

// Lowercase words that end in a period without ending a sentence.
inline bool is_abbreviation(std::string_view word) {
  static const std::unordered_set<std::string_view> stoplist = {
      "bijv.", "bv.", "dhr.", "mevr.", "mw.", "mr.", "mrs.", "ms.", "dr.", "prof.", "ir.", "ing.",
      "drs.", "st.", "nr.", "no.", "blz.", "pag.", "p.", "e.g.", "i.e.", "etc.", "enz.", "o.a.",
      "m.a.w.", "d.w.z.", "t.o.v.", "i.p.v.", "a.s.", "jl.", "vs.", "ca.", "incl.", "excl.",
      "max.", "min.", "jr.", "sr.", "resp.", "evt.", "ong.", "zgn.", "vnl.", "m.b.t.", "z.g.a.n."};
  std::string lower;
  for (char c : word) lower += static_cast<char>((c >= 'A' && c <= 'Z') ? c - 'A' + 'a' : c);
  return stoplist.contains(lower);
}

inline bool starts_sentence(std::string_view s, std::size_t pos) {
  const auto* bytes = reinterpret_cast<const uint8_t*>(s.data());
  int32_t i = static_cast<int32_t>(pos);
  UChar32 c;
  U8_NEXT(bytes, i, static_cast<int32_t>(s.size()), c);
  if (c < 0) return false;
  return u_isupper(c) || u_istitle(c) || u_isdigit(c);
}

inline bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

}  // namespace detail

// Rule-based splitter: a sentence ends at '.', '!' or '?' (plus trailing
// terminal punctuation and closing quotes/brackets) when followed by white
// space and then an uppercase letter or a digit. A period closing a word from
// the abbreviation stoplist does not end a sentence.
inline std::vector<std::string> split_sentences(std::string_view paragraph) {
  std::vector<std::string> sentences;
  std::size_t start = 0;
  std::size_t i = 0;
  const std::size_t n = paragraph.size();
  auto emit = [&](std::size_t end) {
    auto sentence = detail::trim(paragraph.substr(start, end - start));
    if (!sentence.empty()) sentences.emplace_back(sentence);
  };
  while (i < n) {
    const char c = paragraph[i];
    if (c != '.' && c != '!' && c != '?') {
      ++i;
      continue;
    }
    std::size_t end = i + 1;
    while (end < n && std::string_view(".!?\"')]").find(paragraph[end]) != std::string_view::npos) ++end;
    std::size_t next = end;
    while (next < n && detail::is_space(paragraph[next])) ++next;
    const bool boundary = next > end && next < n && detail::starts_sentence(paragraph, next);
    if (boundary && c == '.') {
      std::size_t word_begin = i;
      while (word_begin > start && !detail::is_space(paragraph[word_begin - 1])) --word_begin;
      if (detail::is_abbreviation(paragraph.substr(word_begin, i + 1 - word_begin))) {
        i = end;
        continue;
      }
    }
    if (boundary) {
      emit(end);
      start = next;
    }
    i = end;
  }
  emit(n);
  return sentences;
}

struct GeneralPairOptions {
  // Pairs shorter than this (in code points) are dropped.
  std::size_t min_chars = 64;
  // false: input+response combined must reach min_chars.
  // true: each side must reach min_chars on its own.
  bool per_side = false;
  bool deduplicate = true;
};

inline bool passes_length_filter(const UtterancePair& p, const GeneralPairOptions& opt) {
  const std::size_t a = char_length(p.input);
  const std::size_t b = char_length(p.response);
  if (opt.per_side) return a >= opt.min_chars && b >= opt.min_chars;
  return a + b >= opt.min_chars;
}

inline std::uint64_t pair_hash(const UtterancePair& p) {
  return Fnv1a{}.update(p.input).update("\x1f", 1).update(p.response).digest();
}

// Streaming builder of general pairs: adjacent sentences within a paragraph
// (sentence i -> input, sentence i+1 -> response), length-filtered and
// optionally deduplicated by content hash.
class GeneralPairBuilder {
 public:
  explicit GeneralPairBuilder(GeneralPairOptions options = {}) : options_(options) {}

  void add_paragraph(std::string_view paragraph, const PairSink& sink) {
    const auto sentences = split_sentences(paragraph);
    for (std::size_t i = 0; i + 1 < sentences.size(); ++i) {
      ++candidates_;
      UtterancePair p{sentences[i], sentences[i + 1], PairSource::general};
      if (!passes_length_filter(p, options_)) {
        ++dropped_short_;
        continue;
      }
      if (options_.deduplicate && !seen_.insert(pair_hash(p)).second) {
        ++dropped_duplicate_;
        continue;
      }
      ++emitted_;
      sink(std::move(p));
    }
  }

  std::uint64_t candidates() const { return candidates_; }
  std::uint64_t emitted() const { return emitted_; }
  std::uint64_t dropped_short() const { return dropped_short_; }
  std::uint64_t dropped_duplicate() const { return dropped_duplicate_; }

 private:
  GeneralPairOptions options_;
  std::unordered_set<std::uint64_t> seen_;
  std::uint64_t candidates_ = 0;
  std::uint64_t emitted_ = 0;
  std::uint64_t dropped_short_ = 0;
  std::uint64_t dropped_duplicate_ = 0;
};

inline std::vector<UtterancePair> make_general_pairs(const std::vector<std::string>& paragraphs,
                                                     GeneralPairOptions options = {}) {
  std::vector<UtterancePair> out;
  GeneralPairBuilder builder(options);
  for (const auto& p : paragraphs) builder.add_paragraph(p, [&](UtterancePair x) { out.push_back(std::move(x)); });
  return out;
}

inline bool is_removed_body(std::string_view body) {
  const auto t = detail::trim(body);
  return t.empty() || t == "[deleted]" || t == "[removed]";
}

// One pair per parent->child edge whose bodies are both present. Parents
// missing from `nodes` make the child a root. Any cycle is a data error.
inline std::vector<UtterancePair> make_conversational_pairs(const std::vector<CommentNode>& nodes) {
  std::unordered_map<std::string_view, std::size_t> index;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (!index.emplace(nodes[i].id, i).second) fail(ErrorCode::data, "duplicate comment id: " + nodes[i].id);
  }
  auto parent_of = [&](std::size_t i) -> std::optional<std::size_t> {
    if (!nodes[i].parent_id) return std::nullopt;
    auto it = index.find(*nodes[i].parent_id);
    if (it == index.end()) return std::nullopt;
    return it->second;
  };

  // 0 = unvisited, 1 = on current path, 2 = known acyclic
  std::vector<std::uint8_t> state(nodes.size(), 0);
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    std::vector<std::size_t> path;
    std::optional<std::size_t> cur = i;
    while (cur && state[*cur] == 0) {
      state[*cur] = 1;
      path.push_back(*cur);
      cur = parent_of(*cur);
    }
    if (cur && state[*cur] == 1) fail(ErrorCode::data, "comment thread contains a cycle at id " + nodes[*cur].id);
    for (std::size_t p : path) state[p] = 2;
  }

  std::vector<UtterancePair> out;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    auto parent = parent_of(i);
    if (!parent) continue;
    if (is_removed_body(nodes[*parent].body) || is_removed_body(nodes[i].body)) continue;
    out.push_back({std::string(detail::trim(nodes[*parent].body)), std::string(detail::trim(nodes[i].body)),
                   PairSource::conversational});
  }
  return out;
}

struct LengthHistogram {
  std::size_t bucket_width = 16;
  std::vector<std::uint64_t> counts;
  std::size_t min = 0;
  std::size_t max = 0;
  double total = 0;

  void add(std::size_t length, std::uint64_t observations_so_far) {
    const std::size_t b = length / bucket_width;
    if (counts.size() <= b) counts.resize(b + 1, 0);
    ++counts[b];
    min = observations_so_far == 0 ? length : std::min(min, length);
    max = std::max(max, length);
    total += double(length);
  }
};

struct DatasetStats {
  std::uint64_t count = 0;
  LengthHistogram input_chars;
  LengthHistogram response_chars;
  LengthHistogram input_tokens{4};
  LengthHistogram response_tokens{4};

  double mean_input_chars() const { return count ? input_chars.total / double(count) : 0.0; }
  double mean_response_chars() const { return count ? response_chars.total / double(count) : 0.0; }
};

// Streaming statistics accumulator. `token_length` is optional; when set, the
// token histograms are filled as well.
class StatsAccumulator {
 public:
  explicit StatsAccumulator(std::function<std::size_t(std::string_view)> token_length = {})
      : token_length_(std::move(token_length)) {}

  void add(const UtterancePair& p) {
    stats_.input_chars.add(char_length(p.input), stats_.count);
    stats_.response_chars.add(char_length(p.response), stats_.count);
    if (token_length_) {
      stats_.input_tokens.add(token_length_(p.input), stats_.count);
      stats_.response_tokens.add(token_length_(p.response), stats_.count);
    }
    ++stats_.count;
  }

  const DatasetStats& stats() const { return stats_; }

 private:
  std::function<std::size_t(std::string_view)> token_length_;
  DatasetStats stats_;
};

inline DatasetStats dataset_stats(const std::vector<UtterancePair>& pairs,
                                  std::function<std::size_t(std::string_view)> token_length = {}) {
  StatsAccumulator acc(std::move(token_length));
  for (const auto& p : pairs) acc.add(p);
  return acc.stats();
}

}  // namespace convert::pairs
