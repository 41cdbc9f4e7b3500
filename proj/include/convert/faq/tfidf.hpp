#pragma once

#include <cmath>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <unicode/uchar.h>
#include <unicode/utf8.h>

#include "convert/faq/dataset.hpp"
#include "convert/text/normalize.hpp"

namespace convert::faq {

// Normalized text cut into maximal runs of letters and digits.
inline std::vector<std::string> lexical_terms(std::string_view raw) {
  const std::string norm = text::normalize(raw);
  const auto* bytes = reinterpret_cast<const uint8_t*>(norm.data());
  const int32_t length = static_cast<int32_t>(norm.size());
  std::vector<std::string> terms;
  std::string current;
  for (int32_t i = 0; i < length;) {
    const int32_t start = i;
    UChar32 c;
    U8_NEXT(bytes, i, length, c);
    if (c >= 0 && u_isalnum(c)) {
      current.append(norm, std::size_t(start), std::size_t(i - start));
    } else if (!current.empty()) {
      terms.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) terms.push_back(std::move(current));
  return terms;
}

// Sparse L2-normalized vector, sorted by term index.
using SparseVector = std::vector<std::pair<std::size_t, double>>;

inline double sparse_dot(const SparseVector& a, const SparseVector& b) {
  double s = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i].first < b[j].first) {
      ++i;
    } else if (b[j].first < a[i].first) {
      ++j;
    } else {
      s += a[i++].second * b[j++].second;
    }
  }
  return s;
}

// tf = 1 + ln(count), idf = ln((1 + N) / (1 + df)) + 1, cosine similarity.
class TfidfIndex {
 public:
  explicit TfidfIndex(const std::vector<FaqRow>& train) {
    if (train.empty()) fail(ErrorCode::contract, "tf-idf needs at least one training question");
    // Term ids follow lexical order, so every sum below is independent of
    // the order of the training rows.
    std::vector<std::vector<std::string>> doc_terms;
    std::map<std::string, std::size_t> sorted;
    for (const auto& r : train) {
      doc_terms.push_back(lexical_terms(r.question));
      for (const auto& t : doc_terms.back()) sorted.emplace(t, 0);
      labels_.push_back(r.answer_id);
    }
    for (auto& [t, id] : sorted) {
      id = term_ids_.size();
      term_ids_.emplace(t, id);
    }
    std::vector<std::map<std::size_t, std::size_t>> counts;
    for (const auto& terms : doc_terms) {
      std::map<std::size_t, std::size_t> c;
      for (const auto& t : terms) ++c[term_ids_.at(t)];
      counts.push_back(std::move(c));
    }
    if (term_ids_.empty()) fail(ErrorCode::data, "training questions contain no terms");
    std::vector<std::size_t> df(term_ids_.size(), 0);
    for (const auto& c : counts) {
      for (const auto& [t, n] : c) ++df[t];
    }
    const double n_docs = double(train.size());
    idf_.resize(df.size());
    for (std::size_t t = 0; t < df.size(); ++t) idf_[t] = std::log((1.0 + n_docs) / (1.0 + double(df[t]))) + 1.0;
    for (const auto& c : counts) docs_.push_back(weigh(c));
  }

  SparseVector vectorize(std::string_view question) const {
    std::map<std::size_t, std::size_t> c;
    for (const auto& t : lexical_terms(question)) {
      if (auto it = term_ids_.find(t); it != term_ids_.end()) ++c[it->second];
    }
    return weigh(c);
  }

  std::vector<double> similarities(std::string_view question) const {
    const SparseVector q = vectorize(question);
    std::vector<double> out;
    out.reserve(docs_.size());
    for (const auto& d : docs_) out.push_back(sparse_dot(q, d));
    return out;
  }

  // Answer of the most similar training question; ties to the lowest id.
  AnswerId predict(std::string_view question) const {
    const std::vector<double> sims = similarities(question);
    std::size_t best = 0;
    for (std::size_t i = 1; i < sims.size(); ++i) {
      if (sims[i] > sims[best] || (sims[i] == sims[best] && labels_[i] < labels_[best])) best = i;
    }
    return labels_[best];
  }

  std::size_t vocabulary_size() const { return term_ids_.size(); }
  double idf(std::string_view term) const { return idf_.at(term_ids_.at(std::string(term))); }

 private:
  SparseVector weigh(const std::map<std::size_t, std::size_t>& c) const {
    SparseVector v;
    double norm = 0.0;
    for (const auto& [t, n] : c) {
      const double w = (1.0 + std::log(double(n))) * idf_[t];
      v.emplace_back(t, w);
      norm += w * w;
    }
    if (norm > 0.0) {
      norm = std::sqrt(norm);
      for (auto& [t, w] : v) w /= norm;
    }
    return v;
  }

  std::unordered_map<std::string, std::size_t> term_ids_;
  std::vector<double> idf_;
  std::vector<SparseVector> docs_;
  std::vector<AnswerId> labels_;
};

}  // namespace convert::faq
