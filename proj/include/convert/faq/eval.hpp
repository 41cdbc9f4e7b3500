#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "convert/encoder/checkpoint.hpp"
#include "convert/faq/ranking.hpp"
#include "convert/faq/splits.hpp"
#include "convert/faq/tfidf.hpp"
#include "convert/trainer/trainer.hpp"

namespace convert::faq {

enum class MatchTarget {
  answer_text,        // query against every answer text
  training_question,  // query against the training questions; an answer scores its best question
};

struct Prediction {
  std::string question;
  AnswerId expected = 0;
  AnswerId predicted = 0;
  double score = 0.0;           // score of the prediction
  std::size_t expected_rank = 0;  // 1-based, under the same tie rule
};

struct EvalReport {
  std::vector<Prediction> predictions;

  double accuracy() const { return recall(1); }

  double recall(std::size_t k) const {
    require(!predictions.empty(), ErrorCode::contract, "empty evaluation report");
    std::size_t hits = 0;
    for (const auto& p : predictions) hits += p.expected_rank <= k ? 1 : 0;
    return double(hits) / double(predictions.size());
  }
};

namespace detail {

// 1-based position of `target` when scores are sorted descending with ties
// to the lower id.
inline std::size_t rank_of(const std::vector<float>& scores, const std::vector<AnswerId>& ids, std::size_t target) {
  std::size_t ahead = 0;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (scores[j] > scores[target] || (scores[j] == scores[target] && ids[j] < ids[target])) ++ahead;
  }
  return ahead + 1;
}

inline void check_eval_inputs(const Encoder<float>& encoder, const tok::BpeVocab& vocab,
                              const std::vector<FaqRow>& test, const std::map<AnswerId, std::string>& answers) {
  if (test.empty()) fail(ErrorCode::contract, "test set is empty");
  if (answers.empty()) fail(ErrorCode::contract, "answers table is empty");
  if (vocab.fingerprint() != encoder.vocab_fingerprint()) {
    fail(ErrorCode::fingerprint_mismatch, "checkpoint was built for a different vocabulary");
  }
  check_answers_exist(test, answers);
}

}  // namespace detail

// Scores every test question against the candidate set. `train` is only read
// for MatchTarget::training_question.
inline EvalReport evaluate(const Encoder<float>& encoder, const tok::BpeVocab& vocab, const std::vector<FaqRow>& test,
                           const std::map<AnswerId, std::string>& answers,
                           MatchTarget target = MatchTarget::answer_text, const std::vector<FaqRow>& train = {}) {
  detail::check_eval_inputs(encoder, vocab, test, answers);
  std::vector<std::string> questions;
  for (const auto& r : test) questions.push_back(r.question);
  const Tensor<float> queries = embed_texts(encoder, vocab, questions, Side::input);

  EvalReport report;
  if (target == MatchTarget::answer_text) {
    const CandidateMatrix cands = embed_answers(encoder, vocab, answers);
    std::vector<float> scores(cands.size());
    for (std::size_t i = 0; i < test.size(); ++i) {
      const auto q = queries.row(i);
      const Ranked top = rank_candidates(cands, q, 1).front();
      for (std::size_t j = 0; j < cands.size(); ++j) scores[j] = nn::dot<float>(q, cands.embeddings.row(j));
      const std::size_t expected_row =
          std::size_t(std::lower_bound(cands.ids.begin(), cands.ids.end(), test[i].answer_id) - cands.ids.begin());
      report.predictions.push_back({test[i].question, test[i].answer_id, cands.ids[top.row], double(top.score),
                                    detail::rank_of(scores, cands.ids, expected_row)});
    }
    return report;
  }

  if (train.empty()) fail(ErrorCode::contract, "question matching needs training questions");
  check_answers_exist(train, answers);
  std::vector<std::string> train_questions;
  for (const auto& r : train) train_questions.push_back(r.question);
  const Tensor<float> keys = embed_texts(encoder, vocab, train_questions, Side::response);
  std::vector<AnswerId> ids;
  for (const auto& [id, text] : answers) ids.push_back(id);
  std::map<AnswerId, std::size_t> slot;
  for (std::size_t j = 0; j < ids.size(); ++j) slot.emplace(ids[j], j);

  std::vector<float> scores(ids.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    std::fill(scores.begin(), scores.end(), -std::numeric_limits<float>::infinity());
    const auto q = queries.row(i);
    for (std::size_t t = 0; t < train.size(); ++t) {
      float& s = scores[slot.at(train[t].answer_id)];
      s = std::max(s, nn::dot<float>(q, keys.row(t)));
    }
    std::size_t best = 0;
    for (std::size_t j = 1; j < ids.size(); ++j) {
      if (scores[j] > scores[best]) best = j;
    }
    report.predictions.push_back({test[i].question, test[i].answer_id, ids[best], double(scores[best]),
                                  detail::rank_of(scores, ids, slot.at(test[i].answer_id))});
  }
  return report;
}

inline double accuracy_at_1(const Encoder<float>& encoder, const tok::BpeVocab& vocab, const std::vector<FaqRow>& test,
                            const std::map<AnswerId, std::string>& answers) {
  return evaluate(encoder, vocab, test, answers).accuracy();
}

inline double recall_at_k(const Encoder<float>& encoder, const tok::BpeVocab& vocab, const std::vector<FaqRow>& test,
                          const std::map<AnswerId, std::string>& answers, std::size_t k) {
  if (k < 1 || k > answers.size()) {
    fail(ErrorCode::contract, "k must be in [1, " + std::to_string(answers.size()) + "]");
  }
  return evaluate(encoder, vocab, test, answers).recall(k);
}

inline EvalReport tfidf_report(const std::vector<FaqRow>& train, const std::map<AnswerId, std::string>& answers,
                               const std::vector<FaqRow>& test) {
  if (test.empty()) fail(ErrorCode::contract, "test set is empty");
  check_answers_exist(train, answers);
  check_answers_exist(test, answers);
  const TfidfIndex index(train);
  EvalReport report;
  for (const auto& r : test) {
    const std::vector<double> sims = index.similarities(r.question);
    // Per-answer best similarity, for ranks beyond the top prediction.
    std::map<AnswerId, double> best;
    for (std::size_t t = 0; t < train.size(); ++t) {
      auto [it, fresh] = best.try_emplace(train[t].answer_id, sims[t]);
      if (!fresh) it->second = std::max(it->second, sims[t]);
    }
    const AnswerId predicted = index.predict(r.question);
    std::size_t rank = 1;
    const auto own = best.find(r.answer_id);
    if (own == best.end()) {
      rank = best.size() + 1;
    } else {
      for (const auto& [id, s] : best) {
        if (s > own->second || (s == own->second && id < r.answer_id)) ++rank;
      }
    }
    report.predictions.push_back({r.question, r.answer_id, predicted, best.at(predicted), rank});
  }
  return report;
}

inline double tfidf_baseline(const std::vector<FaqRow>& train, const std::map<AnswerId, std::string>& answers,
                             const std::vector<FaqRow>& test) {
  return tfidf_report(train, answers, test).accuracy();
}

// ---- experiment -----------------------------------------------------------

inline const std::vector<std::string>& known_variants() {
  static const std::vector<std::string> v = {"baseline", "no_pretrain", "general_only", "conversational_only",
                                             "general+conversational"};
  return v;
}

struct ExperimentConfig {
  std::vector<std::size_t> splits = {1, 2, 4, 6, 8, 10};
  std::uint64_t seed = 0;
  train::TrainConfig finetune = train::default_config(train::Stage::finetune);
  MatchTarget target = MatchTarget::answer_text;
  std::vector<std::string> variants = known_variants();
};

struct ExperimentResult {
  std::vector<std::string> variants;
  std::vector<std::size_t> splits;
  std::map<std::pair<std::string, std::size_t>, EvalReport> cells;

  double accuracy(const std::string& variant, std::size_t split) const {
    return cells.at({variant, split}).accuracy();
  }
};

using ExperimentProgress = std::function<void(const std::string& variant, std::size_t split, double accuracy)>;

// Every non-baseline variant fine-tunes a fresh copy of its starting model on
// each split and is scored on the shared test set.
inline ExperimentResult run_experiment(const FaqDataset& ds, const std::map<std::string, model::Model>& models,
                                       const ExperimentConfig& cfg, const ExperimentProgress& progress = {}) {
  for (const auto& v : cfg.variants) {
    if (std::find(known_variants().begin(), known_variants().end(), v) == known_variants().end()) {
      fail(ErrorCode::config, "unknown variant '" + v + "'");
    }
    if (v != "baseline" && !models.contains(v)) fail(ErrorCode::config, "no checkpoint for variant '" + v + "'");
  }
  if (cfg.splits.empty()) fail(ErrorCode::config, "no splits requested");
  for (std::size_t k : cfg.splits) {
    if (k < 1 || k > max_split) fail(ErrorCode::config, "split sizes must be in [1, 10]");
  }
  const SplitSet splits = make_splits(ds, cfg.seed);
  ExperimentResult result{cfg.variants, cfg.splits, {}};
  for (const auto& v : cfg.variants) {
    for (std::size_t k : cfg.splits) {
      const std::vector<FaqRow> rows = splits.train(k);
      EvalReport report;
      if (v == "baseline") {
        report = tfidf_report(rows, ds.answers, splits.test);
      } else {
        const model::Model& m = models.at(v);
        Encoder<float> encoder = m.encoder;
        train::TrainConfig ft = cfg.finetune;
        ft.seed = cfg.seed;
        train::finetune_faq(encoder, m.vocab, rows, ds.answers, ft);
        report = evaluate(encoder, m.vocab, splits.test, ds.answers, cfg.target, rows);
      }
      if (progress) progress(v, k, report.accuracy());
      result.cells.emplace(std::pair{v, k}, std::move(report));
    }
  }
  return result;
}

inline ExperimentResult run_experiment(const FaqDataset& ds, const std::map<std::string, std::string>& model_dirs,
                                       const ExperimentConfig& cfg, const ExperimentProgress& progress = {}) {
  std::map<std::string, model::Model> models;
  for (const auto& v : cfg.variants) {
    if (v == "baseline") continue;
    auto it = model_dirs.find(v);
    if (it == model_dirs.end()) fail(ErrorCode::config, "no checkpoint for variant '" + v + "'");
    models.emplace(v, model::load_model(it->second));
  }
  return run_experiment(ds, models, cfg, progress);
}

// variant,1,2,4,... with accuracies as fractions.
inline std::string results_csv(const ExperimentResult& r) {
  std::string out = "variant";
  for (std::size_t k : r.splits) out += "," + std::to_string(k);
  out += "\n";
  char buf[32];
  for (const auto& v : r.variants) {
    out += v;
    for (std::size_t k : r.splits) {
      std::snprintf(buf, sizeof buf, ",%.4f", r.accuracy(v, k));
      out += buf;
    }
    out += "\n";
  }
  return out;
}

inline nlohmann::json results_json(const ExperimentResult& r) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& v : r.variants) {
    for (std::size_t k : r.splits) {
      const EvalReport& rep = r.cells.at({v, k});
      nlohmann::json preds = nlohmann::json::array();
      for (const auto& p : rep.predictions) {
        preds.push_back({{"question", p.question},
                         {"expected", p.expected},
                         {"predicted", p.predicted},
                         {"score", p.score},
                         {"expected_rank", p.expected_rank}});
      }
      cells.push_back({{"variant", v}, {"split", k}, {"accuracy", rep.accuracy()}, {"predictions", preds}});
    }
  }
  return {{"variants", r.variants}, {"splits", r.splits}, {"cells", cells}};
}

}  // namespace convert::faq
