#pragma once

#include <cstdio>
#include <map>
#include <optional>
#include <string>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "convert/serve/feedback.hpp"
#include "convert/serve/index.hpp"

namespace convert::serve {

struct ServiceOptions {
  std::size_t default_top_k = 5;   // used when a query omits top_k; capped at the answer count
  std::optional<float> min_score;  // off unless an operator sets it
  bool allow_any_origin = false;   // CORS header for a UI served elsewhere
};

inline std::string hex_fingerprint(std::uint64_t fp) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fp));
  return buf;
}

// Request handling without the transport, so it can be tested directly.
class Service {
 public:
  Service(model::Model m, std::map<AnswerId, std::string> answers, AnswerIndex index, const std::string& feedback_path,
          ServiceOptions opt = {})
      : model_(std::move(m)),
        answers_(std::move(answers)),
        index_(std::move(index)),
        log_(feedback_path, answers_),
        opt_(opt) {
    check_fresh(index_, model_, answers_);
  }

  nlohmann::json health() const {
    return {{"status", "ok"},
            {"checkpoint_fingerprint", hex_fingerprint(model_.fingerprint)},
            {"num_answers", index_.size()}};
  }

  nlohmann::json query(const nlohmann::json& body) const {
    const std::string text = string_field(body, "text");
    if (text.find_first_not_of(" \t\r\n") == std::string::npos) fail(ErrorCode::validation, "text is empty");
    QueryOptions q{std::min(opt_.default_top_k, index_.size()), opt_.min_score};
    if (body.contains("top_k")) {
      const auto& k = body.at("top_k");
      if (!k.is_number_integer()) fail(ErrorCode::validation, "top_k must be an integer");
      const auto v = k.get<std::int64_t>();
      if (v < 1 || std::size_t(v) > index_.size()) {
        fail(ErrorCode::contract, "top_k must be in [1, " + std::to_string(index_.size()) + "]");
      }
      q.top_k = std::size_t(v);
    }
    nlohmann::json results = nlohmann::json::array();
    for (const auto& h : serve::query(index_, model_, answers_, text, q)) {
      results.push_back({{"answer_id", h.answer_id}, {"text", h.text}, {"score", h.score}});
    }
    return {{"results", results}};
  }

  nlohmann::json feedback(const nlohmann::json& body) {
    FeedbackRecord rec;
    rec.timestamp = now_millis();
    rec.query = string_field(body, "query");
    if (!body.contains("answer_id") || !body.at("answer_id").is_number_integer()) {
      fail(ErrorCode::validation, "answer_id must be an integer");
    }
    rec.answer_id = body.at("answer_id").get<AnswerId>();
    if (!body.contains("accepted") || !body.at("accepted").is_boolean()) {
      fail(ErrorCode::validation, "accepted must be a boolean");
    }
    rec.accepted = body.at("accepted").get<bool>();
    return {{"position", log_.append(rec)}};
  }

  const ServiceOptions& options() const { return opt_; }
  FeedbackLog& log() { return log_; }

 private:
  static std::string string_field(const nlohmann::json& body, const char* name) {
    if (!body.is_object() || !body.contains(name) || !body.at(name).is_string()) {
      fail(ErrorCode::validation, std::string(name) + " must be a string");
    }
    return body.at(name).get<std::string>();
  }

  model::Model model_;
  std::map<AnswerId, std::string> answers_;
  AnswerIndex index_;
  FeedbackLog log_;
  ServiceOptions opt_;
};

inline int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::validation:
    case ErrorCode::contract:
    case ErrorCode::range:
    case ErrorCode::data: return 400;
    case ErrorCode::stale_index: return 409;
    default: return 500;
  }
}

inline nlohmann::json error_envelope(std::string_view code, const std::string& message) {
  return {{"error", {{"code", code}, {"message", message}}}};
}

// Registers the JSON API routes on `server`. The service must outlive it.
inline void mount(httplib::Server& server, Service& service) {
  auto reply = [&service](httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    if (service.options().allow_any_origin) res.set_header("Access-Control-Allow-Origin", "*");
    res.set_content(body.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace),
                    "application/json; charset=utf-8");
  };
  auto guarded = [reply](auto handler) {
    return [reply, handler](const httplib::Request& req, httplib::Response& res) {
      try {
        reply(res, 200, handler(req));
      } catch (const Error& e) {
        reply(res, http_status(e.code()), error_envelope(to_string(e.code()), e.message()));
      } catch (const nlohmann::json::exception& e) {
        reply(res, 400, error_envelope("validation", std::string("malformed JSON: ") + e.what()));
      } catch (const std::exception& e) {
        reply(res, 500, error_envelope("internal", e.what()));
      }
    };
  };
  server.Get("/api/health", guarded([&service](const httplib::Request&) { return service.health(); }));
  server.Post("/api/query", guarded([&service](const httplib::Request& req) {
                return service.query(nlohmann::json::parse(req.body));
              }));
  server.Post("/api/feedback", guarded([&service](const httplib::Request& req) {
                return service.feedback(nlohmann::json::parse(req.body));
              }));
  server.Options(R"(/api/.*)", [&service](const httplib::Request&, httplib::Response& res) {
    if (service.options().allow_any_origin) res.set_header("Access-Control-Allow-Origin", "*");
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });
  server.set_error_handler([reply](const httplib::Request&, httplib::Response& res) {
    if (res.status == 404) reply(res, 404, error_envelope("not_found", "no such route"));
  });
}

}  // namespace convert::serve
