#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <random>
#include <vector>

#include "convert/faq/dataset.hpp"

namespace convert::faq {

inline constexpr std::size_t max_split = 10;

// One held-out question per answer plus nested training sets.
struct SplitSet {
  std::vector<FaqRow> test;                     // ascending answer_id
  std::map<AnswerId, std::vector<FaqRow>> pool;  // per answer, shuffled, test row removed

  // min(k, available) rows per answer, ordered by answer_id then pool order.
  std::vector<FaqRow> train(std::size_t k) const {
    if (k < 1 || k > max_split) fail(ErrorCode::contract, "split size must be in [1, 10]");
    std::vector<FaqRow> out;
    for (const auto& [id, rows] : pool) {
      const std::size_t take = std::min(k, rows.size());
      out.insert(out.end(), rows.begin(), rows.begin() + std::ptrdiff_t(take));
    }
    return out;
  }
};

inline SplitSet make_splits(const FaqDataset& ds, std::uint64_t seed) {
  ds.validate();
  std::map<AnswerId, std::vector<FaqRow>> by_answer;
  for (const auto& [id, text] : ds.answers) by_answer[id];
  for (const auto& r : ds.rows) by_answer[r.answer_id].push_back(r);

  std::mt19937_64 rng(seed);
  SplitSet s;
  for (auto& [id, rows] : by_answer) {
    if (rows.size() < 2) {
      fail(ErrorCode::data, "answer_id " + std::to_string(id) + " has " + std::to_string(rows.size()) +
                                " question(s); at least 2 are needed");
    }
    std::uniform_int_distribution<std::size_t> pick(0, rows.size() - 1);
    const std::size_t held = pick(rng);
    s.test.push_back(rows[held]);
    rows.erase(rows.begin() + std::ptrdiff_t(held));
    std::shuffle(rows.begin(), rows.end(), rng);
    s.pool.emplace(id, std::move(rows));
  }
  return s;
}

}  // namespace convert::faq
