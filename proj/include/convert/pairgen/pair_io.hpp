#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "convert/error.hpp"
#include "convert/pairgen/pairgen.hpp"

namespace convert::pairs {

// Calls fn(line, line_number) for every non-blank line of a file.
template <class Fn>
void for_each_line(const std::string& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io, "cannot open " + path);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    fn(line, number);
  }
}

inline nlohmann::json parse_json_line(const std::string& line, const std::string& path, std::size_t number) {
  try {
    return nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::data, path + ":" + std::to_string(number) + ": " + e.what());
  }
}

inline nlohmann::json to_json(const UtterancePair& p) {
  return {{"input", p.input}, {"response", p.response}, {"source", to_string(p.source)}};
}

inline UtterancePair pair_from_json(const nlohmann::json& j) {
  try {
    UtterancePair p;
    p.input = j.at("input").get<std::string>();
    p.response = j.at("response").get<std::string>();
    p.source = j.contains("source") ? parse_source(j.at("source").get<std::string>()) : PairSource::general;
    return p;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::data, std::string("malformed pair record: ") + e.what());
  }
}

class PairWriter {
 public:
  explicit PairWriter(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) fail(ErrorCode::io, "cannot write " + path);
  }
  void write(const UtterancePair& p) {
    out_ << to_json(p).dump() << '\n';
    if (!out_) fail(ErrorCode::io, "write failed");
    ++count_;
  }
  std::size_t count() const { return count_; }

 private:
  std::ofstream out_;
  std::size_t count_ = 0;
};

template <class Fn>
void for_each_pair(const std::string& path, Fn&& fn) {
  for_each_line(path, [&](const std::string& line, std::size_t number) {
    auto j = parse_json_line(line, path, number);
    fn(pair_from_json(j));
  });
}

inline std::vector<UtterancePair> read_pairs(const std::string& path) {
  std::vector<UtterancePair> out;
  for_each_pair(path, [&](UtterancePair p) { out.push_back(std::move(p)); });
  return out;
}

inline void write_pairs(const std::string& path, const std::vector<UtterancePair>& pairs) {
  PairWriter w(path);
  for (const auto& p : pairs) w.write(p);
}

// {id, parent_id, body}; parent_id may be null or absent for roots. Numeric
// ids are accepted and stored as their decimal text.
inline std::vector<CommentNode> read_comments(const std::string& path) {
  auto id_text = [](const nlohmann::json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number_integer()) return std::to_string(v.get<long long>());
    fail(ErrorCode::data, "comment ids must be strings or integers");
  };
  std::vector<CommentNode> nodes;
  for_each_line(path, [&](const std::string& line, std::size_t number) {
    auto j = parse_json_line(line, path, number);
    try {
      CommentNode n;
      n.id = id_text(j.at("id"));
      if (j.contains("parent_id") && !j.at("parent_id").is_null()) n.parent_id = id_text(j.at("parent_id"));
      n.body = j.value("body", "");
      nodes.push_back(std::move(n));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::data, path + ":" + std::to_string(number) + ": " + e.what());
    }
  });
  return nodes;
}

// Streams every paragraph (one per line) of every regular file under `dir`,
// visiting files in sorted path order.
template <class Fn>
void for_each_paragraph(const std::string& dir, Fn&& fn) {
  namespace fs = std::filesystem;
  std::vector<fs::path> files;
  if (fs::is_regular_file(dir)) {
    files.emplace_back(dir);
  } else {
    if (!fs::is_directory(dir)) fail(ErrorCode::io, "not a directory: " + dir);
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
  }
  for (const auto& f : files) {
    for_each_line(f.string(), [&](const std::string& line, std::size_t) { fn(line); });
  }
}

}  // namespace convert::pairs
