#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "convert/encoder/encoder.hpp"
#include "convert/faq/dataset.hpp"
#include "convert/tokenizer/bpe.hpp"

namespace convert::faq {

using model::Encoder;
using model::Side;
using nn::Tensor;

// Embeds texts in fixed-size chunks. Rows do not depend on the chunking.
inline Tensor<float> embed_texts(const Encoder<float>& encoder, const tok::BpeVocab& vocab,
                                 const std::vector<std::string>& texts, Side side, std::size_t chunk = 64) {
  require(!texts.empty(), ErrorCode::contract, "nothing to embed");
  const std::size_t dim = encoder.config().final_dim;
  Tensor<float> out({texts.size(), dim});
  std::vector<tok::TokenSequence> batch;
  for (std::size_t begin = 0; begin < texts.size(); begin += chunk) {
    const std::size_t end = std::min(texts.size(), begin + chunk);
    batch.clear();
    for (std::size_t i = begin; i < end; ++i) {
      batch.push_back(vocab.encode(texts[i], encoder.config().max_sequence_length));
    }
    const Tensor<float> rows = encoder.embed_batch(batch, side);
    std::copy(rows.data(), rows.data() + rows.size(), out.data() + begin * dim);
  }
  return out;
}

// Candidate embeddings with their answer ids, in ascending id order.
struct CandidateMatrix {
  std::vector<AnswerId> ids;
  Tensor<float> embeddings;  // ids.size() x final_dim

  std::size_t size() const { return ids.size(); }
};

inline CandidateMatrix embed_answers(const Encoder<float>& encoder, const tok::BpeVocab& vocab,
                                     const std::map<AnswerId, std::string>& answers) {
  if (answers.empty()) fail(ErrorCode::data, "answers table is empty");
  CandidateMatrix m;
  std::vector<std::string> texts;
  for (const auto& [id, text] : answers) {
    m.ids.push_back(id);
    texts.push_back(text);
  }
  m.embeddings = embed_texts(encoder, vocab, texts, Side::response);
  return m;
}

struct Ranked {
  std::size_t row = 0;  // candidate row
  float score = 0.0f;
};

// Dot product against every candidate; best first, ties to the lower id.
// Shared by evaluation and serving so the two cannot disagree.
inline std::vector<Ranked> rank_candidates(const CandidateMatrix& candidates, std::span<const float> query,
                                           std::size_t top_k) {
  if (top_k < 1 || top_k > candidates.size()) {
    fail(ErrorCode::contract, "top_k must be in [1, " + std::to_string(candidates.size()) + "]");
  }
  require(query.size() == candidates.embeddings.cols(), ErrorCode::dimension, "query dimension mismatch");
  std::vector<Ranked> all(candidates.size());
  for (std::size_t r = 0; r < all.size(); ++r) {
    all[r] = {r, nn::dot<float>(query, candidates.embeddings.row(r))};
  }
  auto better = [&](const Ranked& a, const Ranked& b) {
    if (a.score != b.score) return a.score > b.score;
    return candidates.ids[a.row] < candidates.ids[b.row];
  };
  std::partial_sort(all.begin(), all.begin() + std::ptrdiff_t(top_k), all.end(), better);
  all.resize(top_k);
  return all;
}

}  // namespace convert::faq
