#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "convert/encoder/encoder.hpp"
#include "convert/faq/dataset.hpp"
#include "convert/numerics/adam.hpp"
#include "convert/pairgen/pairgen.hpp"
#include "convert/tokenizer/bpe.hpp"
#include "convert/trainer/schedule.hpp"

namespace convert::train {

using model::Encoder;
using model::Side;
using nn::Tensor;

enum class Stage { general, conversational, finetune };

inline std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::general: return "general";
    case Stage::conversational: return "conversational";
    case Stage::finetune: return "finetune";
  }
  return "general";
}

inline constexpr double default_peak_lr = 1e-3;

struct TrainConfig {
  Stage stage = Stage::general;
  std::size_t epochs = 8;
  std::vector<std::size_t> batch_schedule = curriculum_schedule();
  double peak_lr = default_peak_lr;
  // Unset: derived from the number of planned updates (see resolve_schedule).
  std::optional<std::size_t> warmup_steps;
  std::optional<std::size_t> total_steps;
  double weight_decay = 1e-5;
  std::uint64_t seed = 1;
  bool symmetric_loss = false;

  void validate() const {
    if (epochs == 0) fail(ErrorCode::config, "epochs must be positive");
    if (batch_schedule.size() != epochs) fail(ErrorCode::config, "batch_schedule length must equal epochs");
    for (std::size_t k : batch_schedule) {
      if (k == 0) fail(ErrorCode::config, "batch sizes must be at least 1");
    }
    if (!(peak_lr > 0.0)) fail(ErrorCode::config, "peak_lr must be positive");
    if (!(weight_decay >= 0.0)) fail(ErrorCode::config, "weight_decay must be non-negative");
    if (warmup_steps && total_steps && *warmup_steps > *total_steps) {
      fail(ErrorCode::config, "warmup_steps exceeds total_steps");
    }
  }
};

// Stage defaults. Fine-tuning uses a tenth of the pre-training peak rate and
// no weight decay, which under Adam would otherwise pull every embedding row
// the FAQ never touches toward zero at roughly the learning rate per step.
inline TrainConfig default_config(Stage stage) {
  TrainConfig c;
  c.stage = stage;
  switch (stage) {
    case Stage::general:
      break;
    case Stage::conversational:
      c.epochs = 10;
      c.batch_schedule.assign(10, 2048);
      break;
    case Stage::finetune:
      c.epochs = 20;
      c.batch_schedule.assign(20, 16);
      c.peak_lr = default_peak_lr / 10;
      c.weight_decay = 0.0;
      break;
  }
  return c;
}

// Mean over rows of -log softmax(S_i)[i]; with `symmetric` the column
// (response -> input) term is added.
inline double batch_loss(const Tensor<float>& scores, bool symmetric = false) {
  return double(nn::in_batch_cross_entropy_value(scores, symmetric));
}

inline double batch_loss(const Tensor<double>& scores, bool symmetric = false) {
  return nn::in_batch_cross_entropy_value(scores, symmetric);
}

// Fraction of rows whose diagonal is the argmax (ties go to the lower index).
template <class T>
double in_batch_accuracy(const Tensor<T>& scores) {
  require(scores.rank() == 2 && scores.rows() == scores.cols(), ErrorCode::contract, "score matrix must be square");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    auto row = scores.row(i);
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    correct += std::size_t(best) == i;
  }
  return double(correct) / double(scores.rows());
}

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  std::size_t step = 0;   // updates done so far
  double lr = 0.0;        // rate of the epoch's last update
  double loss = 0.0;      // row-weighted mean
  double in_batch_acc = 0.0;
  std::size_t batch_size = 0;
  std::size_t resampled = 0;  // FAQ rows deferred to avoid duplicate answers
};

inline nlohmann::json to_json(const EpochMetrics& m) {
  return {{"epoch", m.epoch}, {"step", m.step}, {"lr", m.lr}, {"loss", m.loss}, {"in_batch_acc", m.in_batch_acc}};
}

struct StageHooks {
  std::function<void(const EpochMetrics&, const Encoder<float>&)> on_epoch;  // e.g. checkpointing
  std::string metrics_path;      // JSON lines, one record per epoch
  std::string diagnostics_path;  // written if training aborts on a non-finite value
};

struct StageResult {
  std::vector<EpochMetrics> epochs;
  std::size_t steps = 0;
  LrSchedule schedule;
};

// Batches of row indices for every epoch, planned before training so the
// learning-rate horizon is known up front.
using EpochPlan = std::vector<std::vector<std::size_t>>;

struct TrainingPlan {
  std::vector<EpochPlan> epochs;
  std::vector<std::size_t> batch_sizes;
  std::vector<std::size_t> resampled;

  std::size_t updates() const {
    std::size_t n = 0;
    for (const auto& e : epochs) n += e.size();
    return n;
  }
};

// Seeded shuffle, then consecutive batches of min(K, n); the short tail
// batch is kept.
inline TrainingPlan plan_pairs(std::size_t n, const TrainConfig& cfg) {
  if (n == 0) fail(ErrorCode::data, "no training pairs");
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(n);
  TrainingPlan plan;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t k = std::min(cfg.batch_schedule[e], n);
    EpochPlan batches;
    for (std::size_t b = 0; b < n; b += k) {
      batches.emplace_back(order.begin() + b, order.begin() + std::min(n, b + k));
    }
    plan.epochs.push_back(std::move(batches));
    plan.batch_sizes.push_back(k);
    plan.resampled.push_back(0);
  }
  return plan;
}

// Like plan_pairs, but a row whose answer is already in the batch being
// filled is put back and drawn again for a later batch, so no batch holds
// two rows of the same answer (one would be a false negative for the other).
inline TrainingPlan plan_faq(const std::vector<faq::FaqRow>& rows, const TrainConfig& cfg) {
  if (rows.empty()) fail(ErrorCode::data, "no FAQ training rows");
  std::mt19937_64 rng(cfg.seed);
  TrainingPlan plan;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::vector<std::size_t> pending(rows.size());
    std::iota(pending.begin(), pending.end(), std::size_t{0});
    std::shuffle(pending.begin(), pending.end(), rng);
    const std::size_t k = std::min(cfg.batch_schedule[e], rows.size());
    EpochPlan batches;
    std::size_t resampled = 0;
    while (!pending.empty()) {
      std::vector<std::size_t> batch, rest;
      std::set<faq::AnswerId> used;
      for (std::size_t idx : pending) {
        if (batch.size() < k && used.insert(rows[idx].answer_id).second) {
          batch.push_back(idx);
        } else {
          if (batch.size() < k) ++resampled;
          rest.push_back(idx);
        }
      }
      batches.push_back(std::move(batch));
      pending = std::move(rest);
    }
    plan.epochs.push_back(std::move(batches));
    plan.batch_sizes.push_back(k);
    plan.resampled.push_back(resampled);
  }
  return plan;
}

// Unset schedule fields are derived from the update count. The horizon is
// one past the last update, which runs at lr_at(updates): every update gets a
// positive rate and the curve still ends at zero.
inline LrSchedule resolve_schedule(const TrainConfig& cfg, std::size_t updates) {
  LrSchedule s;
  s.peak_lr = cfg.peak_lr;
  s.total_steps = cfg.total_steps.value_or(updates + 1);
  s.warmup_steps = cfg.warmup_steps.value_or(default_warmup(s.total_steps));
  if (s.warmup_steps > s.total_steps) fail(ErrorCode::config, "warmup_steps exceeds total_steps");
  return s;
}

struct StepResult {
  double loss = 0.0;
  double in_batch_acc = 0.0;
};

// One optimizer update on a batch of (input, response) token sequences.
template <class T>
class StepRunner {
 public:
  StepRunner(Encoder<T>& encoder, const TrainConfig& cfg)
      : encoder_(encoder), cfg_(cfg), adam_(nn::AdamState<T>::for_params(encoder.params())),
        dropout_rng_(cfg.seed ^ 0x9e3779b97f4a7c15ULL) {}

  StepResult step(std::span<const tok::TokenSequence* const> inputs,
                  std::span<const tok::TokenSequence* const> responses, double lr) {
    nn::GradTape<T> tape;
    model::EncoderPass<T> pass(encoder_, tape, model::ForwardMode{true, &dropout_rng_});
    const auto in_batch = model::pack(inputs);
    const auto resp_batch = model::pack(responses);
    auto u = pass.embed(in_batch, Side::input);
    auto r = pass.embed(resp_batch, Side::response);
    auto scores = nn::matmul_nt(u, r);
    auto loss = nn::in_batch_cross_entropy(scores, cfg_.symmetric_loss);
    auto grads = nn::backward(tape, loss, encoder_.params());
    nn::adam_step(encoder_.params(), grads, adam_, lr, cfg_.weight_decay);
    return {double(loss.value().item()), in_batch_accuracy(scores.value())};
  }

  const nn::AdamState<T>& optimizer() const { return adam_; }

 private:
  Encoder<T>& encoder_;
  const TrainConfig& cfg_;
  nn::AdamState<T> adam_;
  std::mt19937_64 dropout_rng_;
};

namespace detail {

inline void dump_diagnostics(const std::string& path, const Encoder<float>& encoder, const EpochMetrics& current,
                             std::size_t step, double lr, const std::string& what) {
  if (path.empty()) return;
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [name, t] : encoder.params()) {
    double sq = 0.0;
    std::size_t bad = 0;
    for (float v : t.values()) {
      if (std::isfinite(v)) {
        sq += double(v) * double(v);
      } else {
        ++bad;
      }
    }
    params[name] = {{"norm", std::sqrt(sq)}, {"non_finite", bad}};
  }
  nlohmann::json j = {{"error", what},         {"epoch", current.epoch}, {"step", step},
                      {"lr", lr},              {"epoch_loss_so_far", current.loss},
                      {"parameters", params}};
  std::ofstream out(path);
  out << j.dump(2) << '\n';
}

}  // namespace detail

// Trains on a fixed plan. inputs[i] is paired with responses[response_of[i]].
inline StageResult train_on_plan(Encoder<float>& encoder, const std::vector<tok::TokenSequence>& inputs,
                                 const std::vector<tok::TokenSequence>& responses,
                                 const std::vector<std::size_t>& response_of, const TrainingPlan& plan,
                                 const TrainConfig& cfg, const StageHooks& hooks) {
  StageResult result;
  result.schedule = resolve_schedule(cfg, plan.updates());
  std::ofstream metrics;
  if (!hooks.metrics_path.empty()) {
    metrics.open(hooks.metrics_path, std::ios::app);
    if (!metrics) fail(ErrorCode::io, "cannot write " + hooks.metrics_path);
  }
  StepRunner<float> runner(encoder, cfg);
  std::size_t step = 0;
  std::vector<const tok::TokenSequence*> in_ptrs, resp_ptrs;
  for (std::size_t e = 0; e < plan.epochs.size(); ++e) {
    EpochMetrics m;
    m.epoch = e + 1;
    m.batch_size = plan.batch_sizes[e];
    m.resampled = plan.resampled[e];
    double loss_sum = 0.0, acc_sum = 0.0;
    std::size_t rows = 0;
    for (const auto& batch : plan.epochs[e]) {
      in_ptrs.clear();
      resp_ptrs.clear();
      for (std::size_t idx : batch) {
        in_ptrs.push_back(&inputs[idx]);
        resp_ptrs.push_back(&responses[response_of[idx]]);
      }
      const double lr = lr_at(step + 1, result.schedule);
      StepResult s;
      try {
        s = runner.step(in_ptrs, resp_ptrs, lr);
      } catch (const Error& err) {
        if (err.code() != ErrorCode::numeric) throw;
        m.loss = rows ? loss_sum / double(rows) : 0.0;
        detail::dump_diagnostics(hooks.diagnostics_path, encoder, m, step, lr, err.message());
        fail(ErrorCode::numeric, "training aborted at epoch " + std::to_string(m.epoch) + ", step " +
                                     std::to_string(step + 1) + ": " + err.message());
      }
      ++step;
      loss_sum += s.loss * double(batch.size());
      acc_sum += s.in_batch_acc * double(batch.size());
      rows += batch.size();
      m.lr = lr;
    }
    m.step = step;
    m.loss = loss_sum / double(rows);
    m.in_batch_acc = acc_sum / double(rows);
    result.epochs.push_back(m);
    if (metrics.is_open()) metrics << to_json(m).dump() << '\n' << std::flush;
    if (hooks.on_epoch) hooks.on_epoch(m, encoder);
  }
  result.steps = step;
  return result;
}

inline std::vector<tok::TokenSequence> encode_all(const tok::BpeVocab& vocab, const std::vector<std::string>& texts,
                                                  std::size_t max_length) {
  std::vector<tok::TokenSequence> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(vocab.encode(t, max_length));
  return out;
}

// One pre-training stage over (input, response) pairs.
inline StageResult run_stage(Encoder<float>& encoder, const tok::BpeVocab& vocab,
                             const std::vector<pairs::UtterancePair>& data, const TrainConfig& cfg,
                             const StageHooks& hooks = {}) {
  cfg.validate();
  if (data.empty()) fail(ErrorCode::data, "no training pairs");
  if (vocab.fingerprint() != encoder.vocab_fingerprint()) {
    fail(ErrorCode::fingerprint_mismatch, "encoder was built for a different vocabulary");
  }
  const std::size_t max_len = encoder.config().max_sequence_length;
  std::vector<tok::TokenSequence> inputs, responses;
  inputs.reserve(data.size());
  responses.reserve(data.size());
  for (const auto& p : data) {
    inputs.push_back(vocab.encode(p.input, max_len));
    responses.push_back(vocab.encode(p.response, max_len));
  }
  std::vector<std::size_t> identity(data.size());
  std::iota(identity.begin(), identity.end(), std::size_t{0});
  return train_on_plan(encoder, inputs, responses, identity, plan_pairs(data.size(), cfg), cfg, hooks);
}

// Fine-tuning on (question, answer text) pairs with in-batch negatives.
inline StageResult finetune_faq(Encoder<float>& encoder, const tok::BpeVocab& vocab,
                                const std::vector<faq::FaqRow>& rows,
                                const std::map<faq::AnswerId, std::string>& answers, const TrainConfig& cfg,
                                const StageHooks& hooks = {}) {
  cfg.validate();
  faq::check_answers_exist(rows, answers);
  if (vocab.fingerprint() != encoder.vocab_fingerprint()) {
    fail(ErrorCode::fingerprint_mismatch, "encoder was built for a different vocabulary");
  }
  const std::size_t max_len = encoder.config().max_sequence_length;
  std::vector<std::string> questions, texts;
  std::map<faq::AnswerId, std::size_t> slot;
  for (const auto& [id, text] : answers) {
    slot.emplace(id, texts.size());
    texts.push_back(text);
  }
  std::vector<std::size_t> response_of;
  for (const auto& r : rows) {
    questions.push_back(r.question);
    response_of.push_back(slot.at(r.answer_id));
  }
  return train_on_plan(encoder, encode_all(vocab, questions, max_len), encode_all(vocab, texts, max_len),
                       response_of, plan_faq(rows, cfg), cfg, hooks);
}

}  // namespace convert::train
