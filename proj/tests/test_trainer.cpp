#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "convert/trainer/trainer.hpp"

using namespace convert;
using namespace convert::train;
using convert::model::EncoderConfig;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::validation;  // sentinel: nothing thrown
}

// Independent per-row softmax / NLL.
double loss_oracle(const std::vector<std::vector<double>>& s) {
  double total = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    double z = 0.0;
    for (double v : s[i]) z += std::exp(v);
    total += -std::log(std::exp(s[i][i]) / z);
  }
  return total / double(s.size());
}

nn::Tensor<double> to_tensor(const std::vector<std::vector<double>>& s) {
  nn::Tensor<double> t({s.size(), s[0].size()});
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s[i].size(); ++j) t(i, j) = s[i][j];
  }
  return t;
}

const char* const kWords[] = {"appel", "boom", "citroen", "dak", "eend", "fiets", "gras", "huis",
                              "ijs",   "jas",  "kat",     "lamp", "maan", "neus", "oven", "pen"};

std::vector<pairs::UtterancePair> distinct_pairs(std::size_t n) {
  std::vector<pairs::UtterancePair> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({std::string(kWords[i % 16]) + " " + kWords[(i * 3 + 1) % 16],
                   std::string(kWords[(i * 5 + 2) % 16]) + " " + kWords[(i + 7) % 16] + " " + std::to_string(i),
                   pairs::PairSource::general});
  }
  return out;
}

struct Fixture {
  tok::BpeVocab vocab;
  model::Encoder<float> encoder;
};

Fixture make_fixture(std::size_t dim = 16, double dropout = 0.1, std::uint64_t seed = 5) {
  tok::BpeTrainer t;
  for (const auto& p : distinct_pairs(16)) {
    t.add_text(p.input);
    t.add_text(p.response);
  }
  auto vocab = t.train(80);
  EncoderConfig c;
  c.vocab_size = vocab.size();
  c.embed_dim = dim;
  c.ffn_hidden_dim = 2 * dim;
  c.final_dim = dim;
  c.num_shared_layers = 2;
  c.dropout_rate = dropout;
  model::Encoder<float> e(c, vocab.fingerprint(), seed);
  return {std::move(vocab), std::move(e)};
}

TrainConfig quick_config(std::size_t epochs, std::size_t k, double lr = 1e-3) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_schedule.assign(epochs, k);
  c.peak_lr = lr;
  c.weight_decay = 0.0;
  c.seed = 3;
  return c;
}

}  // namespace

TEST(BatchLoss, SingleRowIsZero) {
  EXPECT_EQ(batch_loss(nn::Tensor<float>({1, 1}, 3.5f)), 0.0);
  EXPECT_EQ(batch_loss(nn::Tensor<double>({1, 1}, -20.0)), 0.0);
}

TEST(BatchLoss, AllEqualScoresGiveLogK) {
  for (std::size_t k : {2, 3, 5, 16}) {
    EXPECT_NEAR(batch_loss(nn::Tensor<double>({k, k}, 0.7)), std::log(double(k)), 1e-12);
    EXPECT_NEAR(batch_loss(nn::Tensor<float>({k, k}, -2.0f)), std::log(double(k)), 1e-6);
  }
}

TEST(BatchLoss, MatchesPerRowOracle) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 3.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::vector<double>> s(4, std::vector<double>(4));
    for (auto& row : s) {
      for (auto& v : row) v = n(rng);
    }
    EXPECT_NEAR(batch_loss(to_tensor(s)), loss_oracle(s), 1e-6);
    EXPECT_GE(batch_loss(to_tensor(s)), 0.0);
  }
}

TEST(BatchLoss, RowShiftInvariance) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<std::vector<double>> s(5, std::vector<double>(5));
  for (auto& row : s) {
    for (auto& v : row) v = n(rng);
  }
  const double base = batch_loss(to_tensor(s));
  for (auto& v : s[2]) v += 17.25;
  EXPECT_NEAR(batch_loss(to_tensor(s)), base, 1e-12);
}

TEST(BatchLoss, NonSquareIsContractError) {
  EXPECT_EQ(code_of([] { batch_loss(nn::Tensor<double>({2, 3})); }), ErrorCode::contract);
}

TEST(BatchLoss, SymmetricAddsColumnTerm) {
  std::vector<std::vector<double>> s = {{1.0, 0.2, -0.5}, {0.0, 2.0, 0.3}, {0.4, 0.1, 1.5}};
  std::vector<std::vector<double>> t(3, std::vector<double>(3));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) t[i][j] = s[j][i];
  }
  EXPECT_NEAR(batch_loss(to_tensor(s), true), loss_oracle(s) + loss_oracle(t), 1e-12);
}

TEST(InBatchAccuracy, DiagonalArgmaxWithLowIndexTies) {
  EXPECT_DOUBLE_EQ(in_batch_accuracy(nn::Tensor<double>::matrix({{2, 1}, {0, 3}})), 1.0);
  EXPECT_DOUBLE_EQ(in_batch_accuracy(nn::Tensor<double>::matrix({{1, 1}, {1, 1}})), 0.5);
}

TEST(LrSchedule, Endpoints) {
  LrSchedule s{0.002, 100, 1000};
  EXPECT_EQ(lr_at(0, s), 0.0);
  EXPECT_EQ(lr_at(100, s), 0.002);
  EXPECT_EQ(lr_at(1000, s), 0.0);
  EXPECT_EQ(code_of([&] { lr_at(1001, s); }), ErrorCode::contract);
}

TEST(LrSchedule, PiecewiseLinearAtManyPoints) {
  LrSchedule s{0.5, 37, 403};
  double max_lr = 0.0;
  std::size_t argmax = 0;
  for (int i = 0; i <= 100; ++i) {
    const std::size_t step = std::size_t(std::lround(double(i) * 403.0 / 100.0));
    const double expected = step <= 37 ? 0.5 * double(step) / 37.0 : 0.5 * double(403 - step) / (403.0 - 37.0);
    EXPECT_NEAR(lr_at(step, s), expected, 1e-12) << step;
  }
  for (std::size_t step = 0; step <= 403; ++step) {
    if (lr_at(step, s) > max_lr) {
      max_lr = lr_at(step, s);
      argmax = step;
    }
  }
  EXPECT_EQ(max_lr, 0.5);
  EXPECT_EQ(argmax, 37u);
}

TEST(LrSchedule, DefaultWarmup) {
  EXPECT_EQ(default_warmup(1'000'000), 10'000u);
  EXPECT_EQ(default_warmup(5'000), 500u);
  EXPECT_EQ(default_warmup(3), 0u);
  LrSchedule s{1.0, 0, 4};
  EXPECT_EQ(lr_at(0, s), 1.0);
  EXPECT_EQ(lr_at(2, s), 0.5);
}

TEST(Curriculum, Defaults) {
  EXPECT_EQ(curriculum_schedule(128, 2048, 8),
            (std::vector<std::size_t>{128, 256, 256, 512, 512, 1024, 1024, 2048}));
  EXPECT_EQ(curriculum_schedule(), curriculum_schedule(128, 2048, 8));
}

TEST(Curriculum, DegenerateAndInfeasible) {
  EXPECT_EQ(curriculum_schedule(64, 64, 1), (std::vector<std::size_t>{64}));
  EXPECT_EQ(code_of([] { curriculum_schedule(64, 128, 1); }), ErrorCode::config);
  EXPECT_EQ(code_of([] { curriculum_schedule(128, 3000, 8); }), ErrorCode::config);
  EXPECT_EQ(code_of([] { curriculum_schedule(128, 4096, 8); }), ErrorCode::config);
  EXPECT_EQ(code_of([] { curriculum_schedule(0, 0, 2); }), ErrorCode::config);
}

TEST(Curriculum, MonotoneAndDoublesOnlyAtEvenEpochs) {
  for (std::size_t epochs = 1; epochs <= 12; ++epochs) {
    const std::size_t end = std::size_t{4} << (epochs / 2);
    auto ks = curriculum_schedule(4, end, epochs);
    ASSERT_EQ(ks.size(), epochs);
    EXPECT_EQ(ks.front(), epochs >= 2 ? (epochs >= 2 ? 4u : 4u) : 4u);
    for (std::size_t e = 1; e < epochs; ++e) {
      const std::size_t epoch_number = e + 1;
      EXPECT_EQ(ks[e], epoch_number % 2 == 0 ? 2 * ks[e - 1] : ks[e - 1]);
    }
  }
}

TEST(TrainConfig, Validation) {
  EXPECT_NO_THROW(TrainConfig{}.validate());
  EXPECT_NO_THROW(default_config(Stage::conversational).validate());
  EXPECT_NO_THROW(default_config(Stage::finetune).validate());
  TrainConfig c;
  c.epochs = 3;
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::config);
  c = quick_config(2, 0);
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::config);
  c = quick_config(2, 4);
  c.warmup_steps = 10;
  c.total_steps = 5;
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::config);
}

TEST(StageDefaults, ConversationalAndFinetune) {
  auto conv = default_config(Stage::conversational);
  EXPECT_EQ(conv.epochs, 10u);
  EXPECT_EQ(conv.batch_schedule, std::vector<std::size_t>(10, 2048));
  auto ft = default_config(Stage::finetune);
  EXPECT_DOUBLE_EQ(ft.peak_lr, default_config(Stage::general).peak_lr / 10);
}

TEST(PlanPairs, EveryRowOncePerEpochShortBatchKept) {
  auto cfg = quick_config(3, 4);
  auto plan = plan_pairs(10, cfg);
  ASSERT_EQ(plan.epochs.size(), 3u);
  for (const auto& epoch : plan.epochs) {
    ASSERT_EQ(epoch.size(), 3u);
    EXPECT_EQ(epoch.back().size(), 2u);
    std::multiset<std::size_t> seen;
    for (const auto& b : epoch) seen.insert(b.begin(), b.end());
    EXPECT_EQ(seen.size(), 10u);
    EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), 10u);
  }
  EXPECT_NE(plan.epochs[0], plan.epochs[1]);
  EXPECT_EQ(plan.updates(), 9u);
}

TEST(PlanPairs, BatchCappedAtDatasetSize) {
  auto plan = plan_pairs(5, quick_config(1, 2048));
  ASSERT_EQ(plan.epochs[0].size(), 1u);
  EXPECT_EQ(plan.batch_sizes[0], 5u);
  EXPECT_EQ(code_of([] { plan_pairs(0, quick_config(1, 2)); }), ErrorCode::data);
}

TEST(PlanFaq, UniqueAnswersGiveCeilSteps) {
  std::vector<faq::FaqRow> rows;
  for (int i = 0; i < 76; ++i) rows.push_back({"q" + std::to_string(i), i});
  auto plan = plan_faq(rows, quick_config(2, 16));
  EXPECT_EQ(plan.epochs[0].size(), 5u);
  EXPECT_EQ(plan.resampled[0], 0u);
}

TEST(PlanFaq, NoBatchHoldsDuplicateAnswers) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<faq::FaqRow> rows;
    const int answers = 1 + int(rng() % 12);
    const int n = 1 + int(rng() % 60);
    for (int i = 0; i < n; ++i) rows.push_back({"q", faq::AnswerId(rng() % answers)});
    auto cfg = quick_config(2, 1 + rng() % 20);
    cfg.seed = rng();
    auto plan = plan_faq(rows, cfg);
    for (const auto& epoch : plan.epochs) {
      std::size_t total = 0;
      std::set<std::size_t> all;
      for (const auto& b : epoch) {
        std::set<faq::AnswerId> ids;
        for (std::size_t idx : b) ids.insert(rows[idx].answer_id);
        EXPECT_EQ(ids.size(), b.size());
        EXPECT_LE(b.size(), cfg.batch_schedule[0]);
        total += b.size();
        all.insert(b.begin(), b.end());
      }
      EXPECT_EQ(total, rows.size());
      EXPECT_EQ(all.size(), rows.size());
    }
  }
}

TEST(PlanFaq, DuplicateIsDeferred) {
  std::vector<faq::FaqRow> rows = {{"a", 1}, {"b", 1}, {"c", 2}};
  auto plan = plan_faq(rows, quick_config(1, 3));
  EXPECT_EQ(plan.epochs[0].size(), 2u);
  EXPECT_EQ(plan.resampled[0], 1u);
}

TEST(ResolveSchedule, HorizonKeepsEveryUpdatePositive) {
  auto cfg = quick_config(1, 2);
  auto s = resolve_schedule(cfg, 30);
  EXPECT_EQ(s.total_steps, 31u);
  EXPECT_EQ(s.warmup_steps, 3u);
  for (std::size_t step = 1; step <= 30; ++step) EXPECT_GT(lr_at(step, s), 0.0);
}

TEST(RunStage, EmptyDataAndVocabularyMismatch) {
  auto f = make_fixture();
  EXPECT_EQ(code_of([&] { run_stage(f.encoder, f.vocab, {}, quick_config(1, 2)); }), ErrorCode::data);
  tok::BpeTrainer t;
  t.add_text("iets anders");
  auto other = t.train(20);
  EXPECT_EQ(code_of([&] { run_stage(f.encoder, other, distinct_pairs(2), quick_config(1, 2)); }),
            ErrorCode::fingerprint_mismatch);
}

TEST(RunStage, OverfitsEightFixedPairs) {
  auto f = make_fixture(32, 0.0);
  auto result = run_stage(f.encoder, f.vocab, distinct_pairs(8), quick_config(50, 8));
  ASSERT_EQ(result.epochs.size(), 50u);
  EXPECT_LT(result.epochs.back().loss, result.epochs.front().loss);
  // measured without dropout
  std::vector<tok::TokenSequence> in, resp;
  for (const auto& p : distinct_pairs(8)) {
    in.push_back(f.vocab.encode(p.input));
    resp.push_back(f.vocab.encode(p.response));
  }
  auto s = model::score_matrix(f.encoder.embed_batch(in, model::Side::input),
                               f.encoder.embed_batch(resp, model::Side::response));
  EXPECT_EQ(in_batch_accuracy(s), 1.0);
}

TEST(RunStage, DeterministicForEqualSeeds) {
  auto a = make_fixture();
  auto b = make_fixture();
  auto data = distinct_pairs(12);
  auto cfg = quick_config(4, 5);
  auto ra = run_stage(a.encoder, a.vocab, data, cfg);
  auto rb = run_stage(b.encoder, b.vocab, data, cfg);
  ASSERT_EQ(ra.epochs.size(), rb.epochs.size());
  for (std::size_t i = 0; i < ra.epochs.size(); ++i) EXPECT_EQ(ra.epochs[i].loss, rb.epochs[i].loss);
  EXPECT_EQ(a.encoder.params(), b.encoder.params());

  auto c = make_fixture();
  cfg.seed = 4;
  auto rc = run_stage(c.encoder, c.vocab, data, cfg);
  EXPECT_NE(rc.epochs.front().loss, ra.epochs.front().loss);
}

TEST(RunStage, EveryStepChangesParameters) {
  auto f = make_fixture();
  auto data = distinct_pairs(6);
  auto cfg = quick_config(1, 3);
  auto plan = plan_pairs(data.size(), cfg);
  std::vector<tok::TokenSequence> in, resp;
  for (const auto& p : data) {
    in.push_back(f.vocab.encode(p.input));
    resp.push_back(f.vocab.encode(p.response));
  }
  StepRunner<float> runner(f.encoder, cfg);
  for (const auto& batch : plan.epochs[0]) {
    std::vector<const tok::TokenSequence*> ip, rp;
    for (std::size_t i : batch) {
      ip.push_back(&in[i]);
      rp.push_back(&resp[i]);
    }
    const auto before = f.encoder.params();
    runner.step(ip, rp, 1e-3);
    EXPECT_FALSE(before == f.encoder.params());
  }
}

TEST(RunStage, MetricsLogAndEpochHook) {
  auto f = make_fixture();
  const auto path = (std::filesystem::temp_directory_path() / "convert_metrics_test.jsonl").string();
  std::filesystem::remove(path);
  StageHooks hooks;
  hooks.metrics_path = path;
  std::size_t calls = 0;
  hooks.on_epoch = [&](const EpochMetrics& m, const model::Encoder<float>&) { EXPECT_EQ(m.epoch, ++calls); };
  auto result = run_stage(f.encoder, f.vocab, distinct_pairs(10), quick_config(3, 4), hooks);
  EXPECT_EQ(calls, 3u);
  EXPECT_EQ(result.steps, 9u);
  std::ifstream in(path);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    for (const char* key : {"epoch", "step", "lr", "loss", "in_batch_acc"}) EXPECT_TRUE(j.contains(key)) << key;
    EXPECT_EQ(j["step"].get<std::size_t>(), 3 * (++lines));
  }
  EXPECT_EQ(lines, 3u);
  std::filesystem::remove(path);
}

TEST(RunStage, NonFiniteValuesAbortWithDiagnostics) {
  auto f = make_fixture();
  for (auto& v : f.encoder.params().get("embed.tokens").values()) v = 3e38f;
  const auto path = (std::filesystem::temp_directory_path() / "convert_diag_test.json").string();
  std::filesystem::remove(path);
  StageHooks hooks;
  hooks.diagnostics_path = path;
  EXPECT_EQ(code_of([&] { run_stage(f.encoder, f.vocab, distinct_pairs(4), quick_config(1, 4), hooks); }),
            ErrorCode::numeric);
  ASSERT_TRUE(std::filesystem::exists(path));
  std::ifstream in(path);
  auto j = nlohmann::json::parse(in);
  EXPECT_EQ(j["step"], 0);
  EXPECT_TRUE(j["parameters"].contains("embed.tokens"));
  std::filesystem::remove(path);
}

TEST(Finetune, DanglingAnswerIsDataError) {
  auto f = make_fixture();
  std::map<faq::AnswerId, std::string> answers = {{1, "appel boom"}};
  std::vector<faq::FaqRow> rows = {{"kat", 1}, {"huis", 2}};
  EXPECT_EQ(code_of([&] { finetune_faq(f.encoder, f.vocab, rows, answers, quick_config(1, 2)); }),
            ErrorCode::data);
}

TEST(Finetune, ReachesFullTrainingAccuracy) {
  auto f = make_fixture(32, 0.0);
  std::map<faq::AnswerId, std::string> answers;
  std::vector<faq::FaqRow> rows;
  for (int a = 0; a < 6; ++a) {
    answers[a * 10] = std::string(kWords[a]) + " " + kWords[a + 6];
    rows.push_back({std::string(kWords[a + 3]) + " " + kWords[(a * 7) % 16], a * 10});
    rows.push_back({std::string(kWords[(a + 9) % 16]) + " " + kWords[a], a * 10});
  }
  auto result = finetune_faq(f.encoder, f.vocab, rows, answers, quick_config(60, 16));
  for (const auto& m : result.epochs) EXPECT_EQ(m.batch_size, 12u);
  EXPECT_EQ(result.epochs.back().in_batch_acc, 1.0);
}
