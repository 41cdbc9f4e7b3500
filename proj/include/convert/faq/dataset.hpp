#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "convert/error.hpp"
#include "convert/pairgen/pair_io.hpp"

namespace convert::faq {

using AnswerId = std::int64_t;

struct FaqRow {
  std::string question;
  AnswerId answer_id = 0;

  friend bool operator==(const FaqRow&, const FaqRow&) = default;
};

// Answers are kept ordered by id, so "lowest answer_id" is also "first".
struct FaqDataset {
  std::map<AnswerId, std::string> answers;
  std::vector<FaqRow> rows;
  std::string provenance;

  void validate() const;
};

inline void check_answers_exist(const std::vector<FaqRow>& rows, const std::map<AnswerId, std::string>& answers) {
  for (const auto& r : rows) {
    if (!answers.contains(r.answer_id)) {
      fail(ErrorCode::data, "row references unknown answer_id " + std::to_string(r.answer_id));
    }
  }
}

inline void FaqDataset::validate() const { check_answers_exist(rows, answers); }

namespace detail {

inline AnswerId answer_id_of(const nlohmann::json& j) {
  const auto& v = j.at("answer_id");
  if (!v.is_number_integer()) fail(ErrorCode::data, "answer_id must be an integer");
  return v.get<AnswerId>();
}

}  // namespace detail

// JSON lines {question, answer_id}.
inline std::vector<FaqRow> read_rows(const std::string& path) {
  std::vector<FaqRow> rows;
  pairs::for_each_line(path, [&](const std::string& line, std::size_t number) {
    auto j = pairs::parse_json_line(line, path, number);
    try {
      rows.push_back({j.at("question").get<std::string>(), detail::answer_id_of(j)});
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::data, path + ":" + std::to_string(number) + ": " + e.what());
    }
  });
  return rows;
}

// JSON lines {answer_id, text}; ids must be unique.
inline std::map<AnswerId, std::string> read_answers(const std::string& path) {
  std::map<AnswerId, std::string> answers;
  pairs::for_each_line(path, [&](const std::string& line, std::size_t number) {
    auto j = pairs::parse_json_line(line, path, number);
    try {
      const AnswerId id = detail::answer_id_of(j);
      if (!answers.emplace(id, j.at("text").get<std::string>()).second) {
        fail(ErrorCode::data, path + ":" + std::to_string(number) + ": duplicate answer_id " + std::to_string(id));
      }
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::data, path + ":" + std::to_string(number) + ": " + e.what());
    }
  });
  return answers;
}

inline FaqDataset load_dataset(const std::string& rows_path, const std::string& answers_path) {
  FaqDataset ds;
  ds.answers = read_answers(answers_path);
  ds.rows = read_rows(rows_path);
  ds.provenance = rows_path;
  ds.validate();
  return ds;
}

inline void write_rows(const std::string& path, const std::vector<FaqRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::io, "cannot write " + path);
  for (const auto& r : rows) out << nlohmann::json{{"question", r.question}, {"answer_id", r.answer_id}}.dump() << '\n';
  if (!out) fail(ErrorCode::io, "write failed: " + path);
}

inline void write_answers(const std::string& path, const std::map<AnswerId, std::string>& answers) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::io, "cannot write " + path);
  for (const auto& [id, text] : answers) out << nlohmann::json{{"answer_id", id}, {"text", text}}.dump() << '\n';
  if (!out) fail(ErrorCode::io, "write failed: " + path);
}

}  // namespace convert::faq
