#pragma once

#include <chrono>
#include <cstdint>
#include <cstring>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "convert/encoder/checkpoint.hpp"
#include "convert/faq/ranking.hpp"

namespace convert::serve {

using faq::AnswerId;

// Precomputed response-side embeddings of every answer. Immutable once built.
struct AnswerIndex {
  faq::CandidateMatrix matrix;
  std::uint64_t checkpoint_fingerprint = 0;
  std::int64_t built_at = 0;  // unix seconds

  std::size_t size() const { return matrix.size(); }
};

inline AnswerIndex build_index(const model::Model& m, const std::map<AnswerId, std::string>& answers) {
  AnswerIndex index;
  index.matrix = faq::embed_answers(m.encoder, m.vocab, answers);
  index.checkpoint_fingerprint = m.fingerprint;
  index.built_at =
      std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch()).count();
  return index;
}

// Layout (little-endian):
//   "cvrt-index-v1\n", u64 checkpoint fingerprint, i64 built_at,
//   u64 rows, u64 dim, i64 ids[rows], f32 matrix[rows * dim],
//   u64 FNV-1a of everything above
inline constexpr std::string_view index_magic = "cvrt-index-v1\n";

inline std::string serialize_index(const AnswerIndex& index) {
  model::detail::ByteWriter w;
  w.put_bytes(index_magic);
  w.put(index.checkpoint_fingerprint);
  w.put(index.built_at);
  w.put(std::uint64_t(index.size()));
  w.put(std::uint64_t(index.matrix.embeddings.cols()));
  for (AnswerId id : index.matrix.ids) w.put(id);
  const auto& e = index.matrix.embeddings;
  w.put_bytes({reinterpret_cast<const char*>(e.data()), e.size() * sizeof(float)});
  w.put(fnv1a(w.bytes()));
  return std::move(w.bytes());
}

inline AnswerIndex parse_index(std::string_view bytes) {
  if (bytes.size() < index_magic.size() + 8 || bytes.substr(0, index_magic.size()) != index_magic) {
    fail(ErrorCode::corrupt_file, "not an answer index");
  }
  const std::string_view body = bytes.substr(0, bytes.size() - 8);
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + body.size(), 8);
  if (stored != fnv1a(body)) fail(ErrorCode::corrupt_file, "answer index checksum mismatch");

  model::detail::ByteReader r(body.substr(index_magic.size()));
  AnswerIndex index;
  index.checkpoint_fingerprint = r.get<std::uint64_t>();
  index.built_at = r.get<std::int64_t>();
  const auto rows = r.get<std::uint64_t>();
  const auto dim = r.get<std::uint64_t>();
  if (rows == 0 || dim == 0 || rows > r.remaining() || dim > r.remaining()) {
    fail(ErrorCode::corrupt_file, "answer index has an implausible shape");
  }
  for (std::uint64_t i = 0; i < rows; ++i) {
    index.matrix.ids.push_back(r.get<AnswerId>());
    if (i > 0 && index.matrix.ids[i] <= index.matrix.ids[i - 1]) {
      fail(ErrorCode::corrupt_file, "answer index ids are not ascending");
    }
  }
  std::vector<float> data(rows * dim);
  std::memcpy(data.data(), r.take(data.size() * sizeof(float)).data(), data.size() * sizeof(float));
  if (r.remaining() != 0) fail(ErrorCode::corrupt_file, "trailing bytes in answer index");
  index.matrix.embeddings = nn::Tensor<float>({rows, dim}, std::move(data));
  return index;
}

inline void save_index(const AnswerIndex& index, const std::string& path) {
  model::write_file_atomic(path, serialize_index(index));
}

inline AnswerIndex load_index(const std::string& path) { return parse_index(model::read_file(path)); }

// The index must come from this checkpoint and cover exactly these answers.
inline void check_fresh(const AnswerIndex& index, const model::Model& m,
                        const std::map<AnswerId, std::string>& answers) {
  if (index.checkpoint_fingerprint != m.fingerprint) {
    fail(ErrorCode::stale_index, "answer index was built from a different checkpoint");
  }
  if (index.matrix.embeddings.cols() != m.encoder.config().final_dim) {
    fail(ErrorCode::stale_index, "answer index dimension differs from the model");
  }
  bool same = index.size() == answers.size();
  std::size_t i = 0;
  for (auto it = answers.begin(); same && it != answers.end(); ++it, ++i) same = it->first == index.matrix.ids[i];
  if (!same) fail(ErrorCode::stale_index, "answer index does not match the answers table");
}

struct Hit {
  AnswerId answer_id = 0;
  std::string text;
  float score = 0.0f;
};

struct QueryOptions {
  std::size_t top_k = 1;
  std::optional<float> min_score;  // drop hits scoring below this
};

// Embeds the query on the input side and ranks every cached answer.
inline std::vector<Hit> query(const AnswerIndex& index, const model::Model& m,
                              const std::map<AnswerId, std::string>& answers, std::string_view text,
                              const QueryOptions& opt = {}) {
  if (index.checkpoint_fingerprint != m.fingerprint) {
    fail(ErrorCode::stale_index, "answer index was built from a different checkpoint");
  }
  if (opt.top_k < 1 || opt.top_k > index.size()) {
    fail(ErrorCode::contract, "top_k must be in [1, " + std::to_string(index.size()) + "]");
  }
  const auto q = m.encoder.embed(m.encode(text), model::Side::input);
  std::vector<Hit> hits;
  for (const auto& r : faq::rank_candidates(index.matrix, q.values, opt.top_k)) {
    if (opt.min_score && r.score < *opt.min_score) break;
    const AnswerId id = index.matrix.ids[r.row];
    hits.push_back({id, answers.at(id), r.score});
  }
  return hits;
}

}  // namespace convert::serve
