#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "convert/faq/dataset.hpp"
#include "convert/pairgen/pair_io.hpp"

namespace convert::serve {

struct FeedbackRecord {
  std::int64_t timestamp = 0;  // unix milliseconds
  std::string query;
  faq::AnswerId answer_id = 0;
  bool accepted = false;

  friend bool operator==(const FeedbackRecord&, const FeedbackRecord&) = default;
};

inline nlohmann::json to_json(const FeedbackRecord& r) {
  return {{"timestamp", r.timestamp}, {"query", r.query}, {"answer_id", r.answer_id}, {"accepted", r.accepted}};
}

inline FeedbackRecord feedback_from_json(const nlohmann::json& j) {
  try {
    return {j.at("timestamp").get<std::int64_t>(), j.at("query").get<std::string>(), faq::detail::answer_id_of(j),
            j.at("accepted").get<bool>()};
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::data, std::string("bad feedback record: ") + e.what());
  }
}

inline std::int64_t now_millis() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

inline std::vector<FeedbackRecord> read_feedback(const std::string& path) {
  std::vector<FeedbackRecord> out;
  pairs::for_each_line(path, [&](const std::string& line, std::size_t number) {
    out.push_back(feedback_from_json(pairs::parse_json_line(line, path, number)));
  });
  return out;
}

// Append-only JSON-lines log with a single serialized writer. A record is
// written whole or, on failure, cut back off the file, so readers only ever
// see complete lines.
class FeedbackLog {
 public:
  FeedbackLog(std::string path, std::map<faq::AnswerId, std::string> answers)
      : path_(std::move(path)), answers_(std::move(answers)) {
    if (std::filesystem::exists(path_)) {
      count_ = read_feedback(path_).size();
      size_ = std::filesystem::file_size(path_);
    }
  }

  // Returns the 0-based position of the new record.
  std::size_t append(const FeedbackRecord& rec) {
    if (!answers_.contains(rec.answer_id)) {
      fail(ErrorCode::validation, "unknown answer_id " + std::to_string(rec.answer_id));
    }
    const std::string line = to_json(rec).dump() + "\n";
    std::lock_guard lock(mutex_);
    {
      std::ofstream out(path_, std::ios::binary | std::ios::app);
      if (out) {
        if (write_hook_) write_hook_(out, line);
        out.write(line.data(), std::streamsize(line.size()));
        out.flush();
      }
      if (!out) {
        rollback();
        fail(ErrorCode::io, "cannot append to " + path_);
      }
    }
    size_ += line.size();
    return count_++;
  }

  std::size_t size() const {
    std::lock_guard lock(mutex_);
    return count_;
  }
  const std::string& path() const { return path_; }

  // Test seam: runs inside the critical section just before the record is
  // written, so a failure can be injected mid-write.
  void set_write_hook(std::function<void(std::ofstream&, const std::string&)> hook) { write_hook_ = std::move(hook); }

 private:
  void rollback() {
    std::error_code ec;
    if (std::filesystem::exists(path_, ec)) std::filesystem::resize_file(path_, size_, ec);
  }

  std::string path_;
  std::map<faq::AnswerId, std::string> answers_;
  mutable std::mutex mutex_;
  std::size_t count_ = 0;
  std::uintmax_t size_ = 0;
  std::function<void(std::ofstream&, const std::string&)> write_hook_;
};

// Accepted records become FAQ training rows, in log order.
inline std::vector<faq::FaqRow> export_accepted(const std::vector<FeedbackRecord>& records) {
  std::vector<faq::FaqRow> rows;
  for (const auto& r : records) {
    if (r.accepted) rows.push_back({r.query, r.answer_id});
  }
  return rows;
}

}  // namespace convert::serve
