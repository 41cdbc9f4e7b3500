#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "convert/faq/eval.hpp"
#include "convert/synth/world.hpp"

using namespace convert;
using namespace convert::faq;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::validation;  // sentinel: nothing thrown
}

std::string message_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.message();
  }
  return {};
}

// Row i of answer a is "q<a>_<i>", so rows are unique by text.
FaqDataset toy_dataset(const std::vector<std::size_t>& rows_per_answer, AnswerId first_id = 1) {
  FaqDataset ds;
  for (std::size_t a = 0; a < rows_per_answer.size(); ++a) {
    const AnswerId id = first_id + AnswerId(a);
    ds.answers.emplace(id, "answer " + std::to_string(id));
    for (std::size_t i = 0; i < rows_per_answer[a]; ++i) {
      ds.rows.push_back({"q" + std::to_string(id) + "_" + std::to_string(i), id});
    }
  }
  return ds;
}

std::set<std::string> questions(const std::vector<FaqRow>& rows) {
  std::set<std::string> s;
  for (const auto& r : rows) s.insert(r.question);
  return s;
}

struct Fixture {
  FaqDataset ds;
  tok::BpeVocab vocab;
  model::Encoder<float> encoder;
};

Fixture make_fixture(std::size_t answers = 10, std::size_t dim = 16, std::uint64_t seed = 4) {
  synth::WorldConfig wc;
  wc.topics = answers;
  wc.faq_answers = answers;
  wc.questions_per_answer = 12;
  synth::World world(wc);
  FaqDataset ds = world.faq(1);
  tok::BpeTrainer t;
  for (const auto& r : ds.rows) t.add_text(r.question);
  for (const auto& [id, a] : ds.answers) t.add_text(a);
  auto vocab = t.train(250);
  model::EncoderConfig c;
  c.vocab_size = vocab.size();
  c.embed_dim = dim;
  c.ffn_hidden_dim = 2 * dim;
  c.final_dim = dim;
  c.num_shared_layers = 2;
  c.max_sequence_length = 24;
  model::Encoder<float> e(c, vocab.fingerprint(), seed);
  return {std::move(ds), std::move(vocab), std::move(e)};
}

// Brute-force ranking from independent embed() calls: full stable sort by
// (score desc, id asc).
std::vector<AnswerId> oracle_ranking(const Fixture& f, const std::string& question) {
  const auto q = f.encoder.embed(f.vocab.encode(question, 24), model::Side::input);
  std::vector<std::pair<float, AnswerId>> scored;
  for (const auto& [id, text] : f.ds.answers) {
    const auto r = f.encoder.embed(f.vocab.encode(text, 24), model::Side::response);
    float s = 0.0f;
    for (std::size_t i = 0; i < q.values.size(); ++i) s += q.values[i] * r.values[i];
    scored.push_back({s, id});
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  std::vector<AnswerId> ids;
  for (const auto& [s, id] : scored) ids.push_back(id);
  return ids;
}

}  // namespace

// ---- splits -----------------------------------------------------------------

TEST(Splits, PropertiesOverRandomDatasets) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<std::size_t> counts(1 + rng() % 8);
    for (auto& c : counts) c = 2 + rng() % 13;
    const FaqDataset ds = toy_dataset(counts);
    const std::uint64_t seed = rng();
    const SplitSet s = make_splits(ds, seed);

    ASSERT_EQ(s.test.size(), counts.size());
    const auto test_q = questions(s.test);
    const auto all_q = questions(ds.rows);
    std::set<AnswerId> test_ids;
    for (const auto& r : s.test) test_ids.insert(r.answer_id);
    ASSERT_EQ(test_ids.size(), counts.size());

    std::set<std::string> previous;
    for (std::size_t k = 1; k <= max_split; ++k) {
      const auto train = s.train(k);
      const auto train_q = questions(train);
      ASSERT_EQ(train_q.size(), train.size());
      for (const auto& q : train_q) {
        ASSERT_FALSE(test_q.contains(q));
        ASSERT_TRUE(all_q.contains(q));
      }
      for (const auto& q : previous) ASSERT_TRUE(train_q.contains(q)) << "split " << k << " not nested";
      std::map<AnswerId, std::size_t> per;
      for (const auto& r : train) ++per[r.answer_id];
      for (std::size_t a = 0; a < counts.size(); ++a) {
        ASSERT_EQ(per[AnswerId(a + 1)], std::min(k, counts[a] - 1));
      }
      previous = train_q;
    }
    const SplitSet again = make_splits(ds, seed);
    ASSERT_EQ(again.test, s.test);
    ASSERT_EQ(again.train(max_split), s.train(max_split));
  }
}

TEST(Splits, SeventySixAnswers) {
  const SplitSet s = make_splits(toy_dataset(std::vector<std::size_t>(76, 16)), 3);
  EXPECT_EQ(s.test.size(), 76u);
  EXPECT_EQ(s.train(1).size(), 76u);
  EXPECT_LE(s.train(10).size(), 760u);
}

TEST(Splits, ThreeByFourToy) {
  const FaqDataset ds = toy_dataset({4, 4, 4});
  const SplitSet s = make_splits(ds, 9);
  EXPECT_EQ(s.test.size(), 3u);
  EXPECT_EQ(s.train(2).size(), 6u);
  EXPECT_EQ(s.train(10).size(), 9u);
  for (const auto& q : questions(s.train(10))) EXPECT_FALSE(questions(s.test).contains(q));

  // Across seeds, every row of every answer is held out at some point.
  std::set<std::string> held;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    for (const auto& r : make_splits(ds, seed).test) held.insert(r.question);
  }
  EXPECT_EQ(held, questions(ds.rows));
}

TEST(Splits, Errors) {
  const FaqDataset thin = toy_dataset({3, 1, 4}, 10);
  EXPECT_EQ(code_of([&] { make_splits(thin, 0); }), ErrorCode::data);
  EXPECT_NE(message_of([&] { make_splits(thin, 0); }).find("11"), std::string::npos);

  FaqDataset unused = toy_dataset({3, 3});
  unused.answers.emplace(42, "never asked");
  EXPECT_EQ(code_of([&] { make_splits(unused, 0); }), ErrorCode::data);

  const SplitSet s = make_splits(toy_dataset({3, 3}), 0);
  EXPECT_EQ(code_of([&] { s.train(0); }), ErrorCode::contract);
  EXPECT_EQ(code_of([&] { s.train(11); }), ErrorCode::contract);
}

// ---- tf-idf -----------------------------------------------------------------

TEST(Tfidf, LexicalTerms) {
  EXPECT_EQ(lexical_terms("Vaccine's side-effects?"),
            (std::vector<std::string>{"vaccine", "s", "side", "effects"}));
  EXPECT_EQ(lexical_terms("  COVID-19  Ｑ２ "), (std::vector<std::string>{"covid", "19", "q2"}));
  EXPECT_TRUE(lexical_terms("?! ...").empty());
}

TEST(Tfidf, HandComputedTable) {
  const std::vector<FaqRow> train = {
      {"red apple", 1}, {"green apple", 2}, {"red red car", 3}, {"blue sky", 4}};
  const TfidfIndex index(train);
  const double idf2 = std::log(5.0 / 3.0) + 1.0;  // df = 2 of N = 4
  const double idf1 = std::log(5.0 / 2.0) + 1.0;  // df = 1
  EXPECT_NEAR(index.idf("red"), idf2, 1e-12);
  EXPECT_NEAR(index.idf("apple"), idf2, 1e-12);
  EXPECT_NEAR(index.idf("sky"), idf1, 1e-12);
  EXPECT_EQ(index.vocabulary_size(), 6u);

  // Query "red car": q = (red idf2, car idf1); doc 3 = (red (1 + ln 2) idf2, car idf1).
  const double qn = std::sqrt(idf2 * idf2 + idf1 * idf1);
  const double red3 = (1.0 + std::log(2.0)) * idf2;
  const double d3n = std::sqrt(red3 * red3 + idf1 * idf1);
  const double d1n = std::sqrt(2.0) * idf2;
  const double d2n = std::sqrt(idf1 * idf1 + idf2 * idf2);
  const std::vector<double> expected = {idf2 * idf2 / (qn * d1n), 0.0,
                                        (idf2 * red3 + idf1 * idf1) / (qn * d3n), 0.0};
  const auto sims = index.similarities("Red car!");
  ASSERT_EQ(sims.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(sims[i], expected[i], 1e-12) << i;
  EXPECT_EQ(index.predict("red car"), 3);

  // "green apple" vs doc 2 is exact; vs doc 1 shares apple only.
  const auto g = index.similarities("green apple");
  EXPECT_NEAR(g[1], 1.0, 1e-12);
  EXPECT_NEAR(g[0], idf2 * idf2 / (d2n * d1n), 1e-12);
}

TEST(Tfidf, IdenticalQuestionWins) {
  const FaqDataset ds = make_fixture().ds;
  const SplitSet s = make_splits(ds, 2);
  const auto train = s.train(4);
  const TfidfIndex index(train);
  for (const auto& r : train) {
    const auto sims = index.similarities(r.question);
    EXPECT_NEAR(*std::max_element(sims.begin(), sims.end()), 1.0, 1e-12);
    // The winner may be a different row with the same wording, never a
    // different answer that scores lower.
    const AnswerId p = index.predict(r.question);
    bool tie_with_lower = p == r.answer_id;
    for (std::size_t i = 0; i < train.size(); ++i) {
      if (train[i].answer_id == p && std::abs(sims[i] - 1.0) < 1e-12) tie_with_lower = true;
    }
    EXPECT_TRUE(tie_with_lower);
  }
}

TEST(Tfidf, NoSharedTermsFallsToLowestId) {
  const std::vector<FaqRow> train = {{"alpha beta", 7}, {"gamma", 3}, {"delta", 5}};
  EXPECT_EQ(TfidfIndex(train).predict("zeta eta"), 3);
  std::map<AnswerId, std::string> answers = {{3, "x"}, {5, "y"}, {7, "z"}};
  EXPECT_DOUBLE_EQ(tfidf_baseline(train, answers, {{"zeta", 3}}), 1.0);
  EXPECT_DOUBLE_EQ(tfidf_baseline(train, answers, {{"zeta", 5}}), 0.0);
}

TEST(Tfidf, Errors) {
  EXPECT_EQ(code_of([] { TfidfIndex({{"?? !!", 1}}); }), ErrorCode::data);
  EXPECT_EQ(code_of([] { TfidfIndex({}); }), ErrorCode::contract);
  const std::map<AnswerId, std::string> answers = {{1, "a"}};
  EXPECT_EQ(code_of([&] { tfidf_baseline({{"a b", 1}}, answers, {}); }), ErrorCode::contract);
  EXPECT_EQ(code_of([&] { tfidf_baseline({{"a b", 2}}, answers, {{"a", 1}}); }), ErrorCode::data);
}

TEST(Tfidf, DeterministicAndOrderIndependent) {
  const FaqDataset ds = make_fixture().ds;
  const SplitSet s = make_splits(ds, 5);
  auto train = s.train(6);
  const EvalReport a = tfidf_report(train, ds.answers, s.test);
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    std::shuffle(train.begin(), train.end(), rng);
    const EvalReport b = tfidf_report(train, ds.answers, s.test);
    ASSERT_EQ(a.predictions.size(), b.predictions.size());
    for (std::size_t i = 0; i < a.predictions.size(); ++i) {
      EXPECT_EQ(a.predictions[i].predicted, b.predictions[i].predicted);
      EXPECT_EQ(a.predictions[i].score, b.predictions[i].score);
      EXPECT_EQ(a.predictions[i].expected_rank, b.predictions[i].expected_rank);
    }
  }
}

// ---- ranking and accuracy ---------------------------------------------------

TEST(Ranking, HandSetEmbeddings) {
  CandidateMatrix m;
  m.ids = {2, 5, 9};
  m.embeddings = Tensor<float>({3, 2});
  const float rows[3][2] = {{1, 0}, {0, 1}, {1, 1}};
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 2; ++j) m.embeddings(i, j) = rows[i][j];
  }
  auto ids_of = [&](std::vector<float> q, std::size_t k) {
    std::vector<AnswerId> out;
    for (const auto& r : rank_candidates(m, q, k)) out.push_back(m.ids[r.row]);
    return out;
  };
  EXPECT_EQ(ids_of({1, 0}, 3), (std::vector<AnswerId>{2, 9, 5}));   // 1, 0, 1: tie 2 vs 9 -> 2
  EXPECT_EQ(ids_of({0, 2}, 3), (std::vector<AnswerId>{5, 9, 2}));   // 0, 2, 2: tie 5 vs 9 -> 5
  EXPECT_EQ(ids_of({1, 2}, 1), (std::vector<AnswerId>{9}));         // 1, 2, 3
  EXPECT_EQ(ids_of({-1, -1}, 2), (std::vector<AnswerId>{2, 5}));    // -1, -1, -2
  EXPECT_EQ(ids_of({0, 0}, 3), (std::vector<AnswerId>{2, 5, 9}));   // all tied
  EXPECT_EQ(code_of([&] { rank_candidates(m, std::vector<float>{1, 0}, 0); }), ErrorCode::contract);
  EXPECT_EQ(code_of([&] { rank_candidates(m, std::vector<float>{1, 0}, 4); }), ErrorCode::contract);
  EXPECT_EQ(code_of([&] { rank_candidates(m, std::vector<float>{1}, 1); }), ErrorCode::dimension);
}

TEST(Accuracy, MatchesPairwiseOracle) {
  const Fixture f = make_fixture();
  const SplitSet s = make_splits(f.ds, 1);
  const EvalReport report = evaluate(f.encoder, f.vocab, s.test, f.ds.answers);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < s.test.size(); ++i) {
    const auto ranking = oracle_ranking(f, s.test[i].question);
    EXPECT_EQ(report.predictions[i].predicted, ranking.front());
    const auto pos = std::size_t(std::find(ranking.begin(), ranking.end(), s.test[i].answer_id) - ranking.begin());
    EXPECT_EQ(report.predictions[i].expected_rank, pos + 1);
    correct += ranking.front() == s.test[i].answer_id;
  }
  EXPECT_DOUBLE_EQ(accuracy_at_1(f.encoder, f.vocab, s.test, f.ds.answers), double(correct) / double(s.test.size()));
}

TEST(Accuracy, RecallProperties) {
  const Fixture f = make_fixture();
  const auto& rows = f.ds.rows;
  const std::size_t n = f.ds.answers.size();
  EXPECT_DOUBLE_EQ(recall_at_k(f.encoder, f.vocab, rows, f.ds.answers, n), 1.0);
  EXPECT_DOUBLE_EQ(recall_at_k(f.encoder, f.vocab, rows, f.ds.answers, 1),
                   accuracy_at_1(f.encoder, f.vocab, rows, f.ds.answers));
  double previous = 0.0;
  for (std::size_t k = 1; k <= n; ++k) {
    const double r = recall_at_k(f.encoder, f.vocab, rows, f.ds.answers, k);
    EXPECT_GE(r, previous);
    previous = r;
  }
  // Full-sort oracle at k = 3.
  std::size_t hits = 0;
  for (const auto& r : rows) {
    const auto ranking = oracle_ranking(f, r.question);
    hits += std::find(ranking.begin(), ranking.begin() + 3, r.answer_id) != ranking.begin() + 3;
  }
  EXPECT_DOUBLE_EQ(recall_at_k(f.encoder, f.vocab, rows, f.ds.answers, 3), double(hits) / double(rows.size()));
  EXPECT_EQ(code_of([&] { recall_at_k(f.encoder, f.vocab, rows, f.ds.answers, 0); }), ErrorCode::contract);
  EXPECT_EQ(code_of([&] { recall_at_k(f.encoder, f.vocab, rows, f.ds.answers, n + 1); }), ErrorCode::contract);
}

TEST(Accuracy, Errors) {
  const Fixture f = make_fixture();
  EXPECT_EQ(code_of([&] { accuracy_at_1(f.encoder, f.vocab, {}, f.ds.answers); }), ErrorCode::contract);
  EXPECT_EQ(code_of([&] { accuracy_at_1(f.encoder, f.vocab, f.ds.rows, {}); }), ErrorCode::contract);
  EXPECT_EQ(code_of([&] { accuracy_at_1(f.encoder, f.vocab, {{"q", 999}}, f.ds.answers); }), ErrorCode::data);
  const Fixture other = make_fixture(4);
  EXPECT_EQ(code_of([&] { accuracy_at_1(f.encoder, other.vocab, f.ds.rows, f.ds.answers); }),
            ErrorCode::fingerprint_mismatch);
}

// Doubling the response tower's last layer doubles every score exactly, a
// strictly increasing transform, so predictions cannot move.
TEST(Accuracy, InvariantUnderScoreScaling) {
  const Fixture f = make_fixture();
  const std::size_t last = f.encoder.config().tower_layers - 1;
  for (float factor : {2.0f, 0.25f}) {
    model::Encoder<float> scaled = f.encoder;
    for (const char* leaf : {"weight", "bias"}) {
      auto& t = scaled.params().get(model::names::tower(model::Side::response, last, leaf));
      for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] *= factor;
    }
    const EvalReport a = evaluate(f.encoder, f.vocab, f.ds.rows, f.ds.answers);
    const EvalReport b = evaluate(scaled, f.vocab, f.ds.rows, f.ds.answers);
    for (std::size_t i = 0; i < a.predictions.size(); ++i) {
      EXPECT_EQ(a.predictions[i].predicted, b.predictions[i].predicted);
      EXPECT_EQ(a.predictions[i].expected_rank, b.predictions[i].expected_rank);
      EXPECT_EQ(float(a.predictions[i].score) * factor, float(b.predictions[i].score));
    }
    EXPECT_EQ(a.accuracy(), b.accuracy());
  }
}

TEST(Accuracy, RandomModelsSitAtChance) {
  synth::WorldConfig wc;
  wc.topics = 76;
  wc.faq_answers = 76;
  wc.questions_per_answer = 2;
  const FaqDataset ds = synth::World(wc).faq(2);
  tok::BpeTrainer t;
  for (const auto& r : ds.rows) t.add_text(r.question);
  for (const auto& [id, a] : ds.answers) t.add_text(a);
  const auto vocab = t.train(200);
  model::EncoderConfig c;
  c.vocab_size = vocab.size();
  c.embed_dim = 16;
  c.ffn_hidden_dim = 32;
  c.final_dim = 16;
  c.num_shared_layers = 1;
  c.max_sequence_length = 24;
  double total = 0.0;
  const int seeds = 10;
  for (int seed = 0; seed < seeds; ++seed) {
    const model::Encoder<float> e(c, vocab.fingerprint(), std::uint64_t(seed));
    total += accuracy_at_1(e, vocab, make_splits(ds, std::uint64_t(seed)).test, ds.answers);
  }
  // Chance is 1/76 ~ 0.013.
  EXPECT_LT(total / seeds, 0.05);
}

TEST(Accuracy, TrainingQuestionMatching) {
  const Fixture f = make_fixture();
  const SplitSet s = make_splits(f.ds, 3);
  const auto train = s.train(2);
  const EvalReport r = evaluate(f.encoder, f.vocab, s.test, f.ds.answers, MatchTarget::training_question, train);
  for (std::size_t i = 0; i < s.test.size(); ++i) {
    const auto q = f.encoder.embed(f.vocab.encode(s.test[i].question, 24), model::Side::input);
    float best = -1e30f;
    AnswerId best_id = 0;
    for (const auto& row : train) {
      const auto k = f.encoder.embed(f.vocab.encode(row.question, 24), model::Side::response);
      float sc = 0.0f;
      for (std::size_t j = 0; j < q.values.size(); ++j) sc += q.values[j] * k.values[j];
      if (sc > best || (sc == best && row.answer_id < best_id)) {
        best = sc;
        best_id = row.answer_id;
      }
    }
    EXPECT_EQ(r.predictions[i].predicted, best_id);
  }
  EXPECT_EQ(code_of([&] { evaluate(f.encoder, f.vocab, s.test, f.ds.answers, MatchTarget::training_question); }),
            ErrorCode::contract);
}

// ---- experiment -------------------------------------------------------------

TEST(Experiment, TableShape) {
  const Fixture f = make_fixture();
  std::map<std::string, model::Model> models;
  for (const auto& v : known_variants()) {
    if (v != "baseline") models.emplace(v, model::Model{f.vocab, f.encoder, 0});
  }
  ExperimentConfig cfg;
  cfg.seed = 1;
  cfg.finetune.epochs = 2;
  cfg.finetune.batch_schedule.assign(2, 16);
  std::size_t calls = 0;
  const ExperimentResult r = run_experiment(f.ds, models, cfg, [&](const std::string&, std::size_t, double) { ++calls; });
  EXPECT_EQ(calls, 30u);
  for (const auto& v : known_variants()) {
    for (std::size_t k : cfg.splits) {
      const double a = r.accuracy(v, k);
      EXPECT_GE(a, 0.0);
      EXPECT_LE(a, 1.0);
    }
  }
  const std::string csv = results_csv(r);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 6);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "variant,1,2,4,6,8,10");
  const auto j = results_json(r);
  EXPECT_EQ(j["cells"].size(), 30u);
  EXPECT_EQ(j["cells"][0]["predictions"].size(), f.ds.answers.size());

  // The fine-tuned copies never touch the starting models.
  EXPECT_EQ(models.at("no_pretrain").encoder.params().get("embed.tokens").data()[0],
            f.encoder.params().get("embed.tokens").data()[0]);
}

TEST(Experiment, Errors) {
  const Fixture f = make_fixture();
  ExperimentConfig cfg;
  cfg.variants = {"baseline", "general_only"};
  EXPECT_EQ(code_of([&] { run_experiment(f.ds, std::map<std::string, model::Model>{}, cfg); }), ErrorCode::config);
  EXPECT_EQ(code_of([&] { run_experiment(f.ds, std::map<std::string, std::string>{}, cfg); }), ErrorCode::config);
  cfg.variants = {"rasa"};
  EXPECT_EQ(code_of([&] { run_experiment(f.ds, std::map<std::string, model::Model>{}, cfg); }), ErrorCode::config);
  cfg.variants = {"baseline"};
  cfg.splits = {12};
  EXPECT_EQ(code_of([&] { run_experiment(f.ds, std::map<std::string, model::Model>{}, cfg); }), ErrorCode::config);
  cfg.splits = {1, 2};
  const auto r = run_experiment(f.ds, std::map<std::string, model::Model>{}, cfg);
  EXPECT_EQ(r.cells.size(), 2u);
}
