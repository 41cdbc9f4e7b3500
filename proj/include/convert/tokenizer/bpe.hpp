#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "convert/error.hpp"
#include "convert/hash.hpp"
#include "convert/text/normalize.hpp"

namespace convert::tok {

using TokenId = std::uint32_t;

struct Specials {
  static constexpr TokenId pad = 0;
  static constexpr TokenId unk = 1;
  static constexpr TokenId bos = 2;
  static constexpr TokenId eos = 3;
  static constexpr std::size_t count = 4;
  static constexpr std::string_view names[count] = {"<pad>", "<unk>", "<s>", "</s>"};

  static bool is_special(TokenId id) { return id < count; }
};

// Start-of-word symbol. Every pretokenized word begins with it, which is how
// decode() recovers word boundaries.
inline constexpr std::string_view word_start = "\xE2\x96\x81";  // U+2581

inline constexpr std::size_t default_vocab_size = 8000;
inline constexpr std::size_t default_max_sequence_length = 60;

struct TokenSequence {
  std::vector<TokenId> ids;
  // Length before truncation, BOS/EOS included.
  std::size_t original_length = 0;

  std::size_t length() const noexcept { return ids.size(); }
};

class BpeVocab;

// Accumulates word frequencies from a text stream, then learns merges.
class BpeTrainer {
 public:
  void add_text(std::string_view raw) {
    const std::string normalized = text::normalize(raw);
    for (std::string_view word : text::split_words(normalized)) ++word_counts_[std::string(word)];
  }

  std::size_t distinct_words() const { return word_counts_.size(); }

  BpeVocab train(std::size_t vocab_size) const;

 private:
  std::map<std::string, std::uint64_t> word_counts_;
};

// Byte-pair-encoding vocabulary shared by the input and response sides.
// Ids: specials first, then the base alphabet in byte order, then one id per
// distinct merged symbol in merge order.
class BpeVocab {
 public:
  using Merge = std::pair<std::string, std::string>;

  BpeVocab() = default;

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<Merge>& merges() const noexcept { return merges_; }
  const std::vector<std::string>& alphabet() const noexcept { return alphabet_; }
  std::size_t base_size() const noexcept { return Specials::count + alphabet_.size(); }

  const std::string& token(TokenId id) const {
    if (id >= tokens_.size()) fail(ErrorCode::range, "token id " + std::to_string(id) + " out of range");
    return tokens_[id];
  }

  std::optional<TokenId> find(std::string_view token) const {
    auto it = token_to_id_.find(std::string(token));
    if (it == token_to_id_.end()) return std::nullopt;
    return it->second;
  }

  // Normalize, split on white space, apply merges by priority, wrap with
  // BOS/EOS and truncate to max_length keeping both markers.
  TokenSequence encode(std::string_view raw, std::size_t max_length = default_max_sequence_length) const {
    require(max_length >= 2, ErrorCode::config, "max_sequence_length must be at least 2");
    const std::string normalized = text::normalize(raw);
    std::vector<TokenId> body;
    for (std::string_view word : text::split_words(normalized)) encode_word(word, body);

    TokenSequence seq;
    seq.original_length = body.size() + 2;
    const std::size_t keep = std::min(body.size(), max_length - 2);
    seq.ids.reserve(keep + 2);
    seq.ids.push_back(Specials::bos);
    seq.ids.insert(seq.ids.end(), body.begin(), body.begin() + static_cast<std::ptrdiff_t>(keep));
    seq.ids.push_back(Specials::eos);
    return seq;
  }

  // Inverse of encode up to normalization. Special ids (UNK included) are
  // dropped.
  std::string decode(std::span<const TokenId> ids) const {
    std::string joined;
    for (TokenId id : ids) {
      const std::string& t = token(id);
      if (Specials::is_special(id)) continue;
      joined += t;
    }
    std::string out;
    std::size_t pos = 0;
    while (pos < joined.size()) {
      if (joined.compare(pos, word_start.size(), word_start) == 0) {
        if (!out.empty()) out += ' ';
        pos += word_start.size();
      } else {
        out += joined[pos++];
      }
    }
    return out;
  }

  std::string decode(const TokenSequence& seq) const { return decode(std::span<const TokenId>(seq.ids)); }

  // Text form: "bpe-v1 <size>", one merge per line, a blank line, the
  // specials block ("<name> <id>" lines), a blank line, then the base
  // alphabet one symbol per line.
  std::string serialize() const {
    std::ostringstream out;
    out << "bpe-v1 " << size() << '\n';
    for (const auto& [left, right] : merges_) out << left << ' ' << right << '\n';
    out << '\n';
    for (std::size_t i = 0; i < Specials::count; ++i) out << Specials::names[i] << ' ' << i << '\n';
    out << '\n';
    for (const auto& symbol : alphabet_) out << symbol << '\n';
    return out.str();
  }

  static BpeVocab parse(std::string_view text) {
    std::vector<std::string> lines;
    std::size_t pos = 0;
    while (pos < text.size()) {
      std::size_t nl = text.find('\n', pos);
      if (nl == std::string_view::npos) fail(ErrorCode::corrupt_file, "vocabulary missing final newline");
      lines.emplace_back(text.substr(pos, nl - pos));
      pos = nl + 1;
    }
    if (lines.empty() || lines[0].rfind("bpe-v1 ", 0) != 0) {
      if (!lines.empty() && lines[0].rfind("bpe-", 0) == 0) {
        fail(ErrorCode::version_mismatch, "unsupported vocabulary version: " + lines[0]);
      }
      fail(ErrorCode::corrupt_file, "missing bpe-v1 header");
    }
    std::size_t declared = 0;
    try {
      declared = std::stoull(lines[0].substr(7));
    } catch (const std::exception&) {
      fail(ErrorCode::corrupt_file, "bad vocabulary size in header");
    }

    std::size_t i = 1;
    std::vector<Merge> merges;
    for (; i < lines.size() && !lines[i].empty(); ++i) {
      const auto space = lines[i].find(' ');
      if (space == std::string::npos || space == 0 || space + 1 == lines[i].size() ||
          lines[i].find(' ', space + 1) != std::string::npos) {
        fail(ErrorCode::corrupt_file, "malformed merge line " + std::to_string(i + 1));
      }
      merges.emplace_back(lines[i].substr(0, space), lines[i].substr(space + 1));
    }
    if (i >= lines.size()) fail(ErrorCode::corrupt_file, "missing specials block");
    ++i;
    for (std::size_t s = 0; s < Specials::count; ++s, ++i) {
      const std::string expected = std::string(Specials::names[s]) + ' ' + std::to_string(s);
      if (i >= lines.size() || lines[i] != expected) fail(ErrorCode::corrupt_file, "malformed specials block");
    }
    if (i >= lines.size() || !lines[i].empty()) fail(ErrorCode::corrupt_file, "missing alphabet block");
    ++i;
    std::vector<std::string> alphabet(lines.begin() + static_cast<std::ptrdiff_t>(i), lines.end());

    BpeVocab vocab = build(std::move(alphabet), std::move(merges));
    if (vocab.size() != declared) fail(ErrorCode::corrupt_file, "vocabulary size does not match header");
    return vocab;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::io, "cannot write vocabulary to " + path);
    const std::string text = serialize();
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) fail(ErrorCode::io, "failed writing vocabulary to " + path);
  }

  static BpeVocab load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::io, "cannot read vocabulary from " + path);
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse(buffer.str());
  }

  // Content hash of the serialized form. Checkpoints embed it.
  std::uint64_t fingerprint() const { return fnv1a(serialize()); }

  // Assembles ids from an alphabet and an ordered merge list.
  static BpeVocab build(std::vector<std::string> alphabet, std::vector<Merge> merges) {
    BpeVocab v;
    for (std::size_t s = 0; s < Specials::count; ++s) v.add_token(std::string(Specials::names[s]));
    std::sort(alphabet.begin(), alphabet.end());
    alphabet.erase(std::unique(alphabet.begin(), alphabet.end()), alphabet.end());
    for (const auto& symbol : alphabet) {
      if (v.token_to_id_.contains(symbol)) fail(ErrorCode::data, "alphabet symbol collides with a special");
      v.add_token(symbol);
    }
    v.alphabet_ = std::move(alphabet);
    for (std::size_t rank = 0; rank < merges.size(); ++rank) {
      const auto& [left, right] = merges[rank];
      auto l = v.find(left);
      auto r = v.find(right);
      if (!l || !r) fail(ErrorCode::corrupt_file, "merge references unknown symbol: " + left + " " + right);
      const std::string merged = left + right;
      auto existing = v.find(merged);
      const TokenId id = existing ? *existing : v.add_token(merged);
      v.merge_rank_.emplace(pair_key(*l, *r), MergeEntry{rank, id});
    }
    v.merges_ = std::move(merges);
    return v;
  }

 private:
  struct MergeEntry {
    std::size_t rank;
    TokenId result;
  };

  static std::uint64_t pair_key(TokenId a, TokenId b) { return (std::uint64_t(a) << 32) | b; }

  TokenId add_token(std::string token) {
    const auto id = static_cast<TokenId>(tokens_.size());
    token_to_id_.emplace(token, id);
    tokens_.push_back(std::move(token));
    return id;
  }

  void encode_word(std::string_view word, std::vector<TokenId>& out) const {
    std::vector<TokenId> symbols;
    symbols.push_back(find(word_start).value_or(Specials::unk));
    for (const auto& cp : text::code_points(word)) symbols.push_back(find(cp).value_or(Specials::unk));

    while (symbols.size() > 1) {
      std::size_t best_pos = symbols.size();
      const MergeEntry* best = nullptr;
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
        auto it = merge_rank_.find(pair_key(symbols[i], symbols[i + 1]));
        if (it == merge_rank_.end()) continue;
        if (!best || it->second.rank < best->rank) {
          best = &it->second;
          best_pos = i;
        }
      }
      if (!best) break;
      symbols[best_pos] = best->result;
      symbols.erase(symbols.begin() + static_cast<std::ptrdiff_t>(best_pos) + 1);
    }
    out.insert(out.end(), symbols.begin(), symbols.end());
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> token_to_id_;
  std::vector<std::string> alphabet_;
  std::vector<Merge> merges_;
  std::unordered_map<std::uint64_t, MergeEntry> merge_rank_;
};

// Greedy merge learning: the most frequent adjacent pair wins, ties go to
// the lexicographically smallest (left, right). Stops at vocab_size tokens or
// when no pair occurs at least twice. Pair counts are maintained
// incrementally over the words touched by each merge.
inline BpeVocab BpeTrainer::train(std::size_t vocab_size) const {
  if (word_counts_.empty()) fail(ErrorCode::data, "cannot train a vocabulary on an empty corpus");

  std::vector<std::string> symbol_text;
  std::unordered_map<std::string, int> symbol_id;
  auto intern = [&](const std::string& s) {
    auto [it, inserted] = symbol_id.emplace(s, static_cast<int>(symbol_text.size()));
    if (inserted) symbol_text.push_back(s);
    return it->second;
  };

  struct Word {
    std::vector<int> symbols;
    std::int64_t count;
  };
  std::vector<Word> words;
  words.reserve(word_counts_.size());
  std::set<std::string> alphabet;
  const std::string start(word_start);
  alphabet.insert(start);
  for (const auto& [word, count] : word_counts_) {
    Word w{{intern(start)}, static_cast<std::int64_t>(count)};
    for (auto& cp : text::code_points(word)) {
      alphabet.insert(cp);
      w.symbols.push_back(intern(cp));
    }
    words.push_back(std::move(w));
  }

  const std::size_t base = Specials::count + alphabet.size();
  if (vocab_size < base) {
    fail(ErrorCode::config, "vocab_size " + std::to_string(vocab_size) + " is below the base size " +
                                std::to_string(base));
  }

  auto key = [](int a, int b) { return (std::uint64_t(std::uint32_t(a)) << 32) | std::uint32_t(b); };
  std::unordered_map<std::uint64_t, std::int64_t> pair_count;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> pair_words;
  for (std::size_t w = 0; w < words.size(); ++w) {
    const auto& s = words[w].symbols;
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      const auto k = key(s[i], s[i + 1]);
      pair_count[k] += words[w].count;
      pair_words[k].push_back(w);
    }
  }

  // Ordered by count descending, then (left, right) text ascending.
  auto before = [&](const std::pair<std::int64_t, std::uint64_t>& a,
                    const std::pair<std::int64_t, std::uint64_t>& b) {
    if (a.first != b.first) return a.first > b.first;
    const auto& al = symbol_text[a.second >> 32];
    const auto& bl = symbol_text[b.second >> 32];
    if (al != bl) return al < bl;
    return symbol_text[a.second & 0xffffffffu] < symbol_text[b.second & 0xffffffffu];
  };
  std::set<std::pair<std::int64_t, std::uint64_t>, decltype(before)> queue(before);
  for (const auto& [k, c] : pair_count) queue.emplace(c, k);

  std::vector<BpeVocab::Merge> merges;
  std::set<std::string> produced;  // merged strings not already in the base
  while (base + produced.size() < vocab_size && !queue.empty()) {
    const auto [count, k] = *queue.begin();
    if (count < 2) break;
    const int left = static_cast<int>(k >> 32);
    const int right = static_cast<int>(k & 0xffffffffu);
    const std::string merged_text = symbol_text[left] + symbol_text[right];
    const int merged = intern(merged_text);
    merges.emplace_back(symbol_text[left], symbol_text[right]);
    if (!alphabet.contains(merged_text)) produced.insert(merged_text);

    std::unordered_map<std::uint64_t, std::int64_t> delta;
    std::vector<std::size_t> affected = std::move(pair_words[k]);
    pair_words.erase(k);
    std::sort(affected.begin(), affected.end());
    affected.erase(std::unique(affected.begin(), affected.end()), affected.end());
    for (std::size_t w : affected) {
      auto& s = words[w].symbols;
      const std::int64_t c = words[w].count;
      bool present = false;
      for (std::size_t i = 0; i + 1 < s.size(); ++i) {
        if (s[i] == left && s[i + 1] == right) {
          present = true;
          break;
        }
      }
      if (!present) continue;
      for (std::size_t i = 0; i + 1 < s.size(); ++i) delta[key(s[i], s[i + 1])] -= c;
      std::vector<int> next;
      next.reserve(s.size());
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (i + 1 < s.size() && s[i] == left && s[i + 1] == right) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(s[i]);
        }
      }
      s = std::move(next);
      for (std::size_t i = 0; i + 1 < s.size(); ++i) {
        const auto nk = key(s[i], s[i + 1]);
        delta[nk] += c;
        if (nk != k) pair_words[nk].push_back(w);
      }
    }
    for (const auto& [dk, d] : delta) {
      if (d == 0) continue;
      auto it = pair_count.find(dk);
      const std::int64_t old = it == pair_count.end() ? 0 : it->second;
      if (old > 0) queue.erase({old, dk});
      const std::int64_t now = old + d;
      if (now > 0) {
        pair_count[dk] = now;
        queue.emplace(now, dk);
      } else {
        pair_count.erase(dk);
      }
    }
  }

  return BpeVocab::build(std::vector<std::string>(alphabet.begin(), alphabet.end()), std::move(merges));
}

}  // namespace convert::tok
