#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "convert/encoder/config.hpp"
#include "convert/numerics/kernels.hpp"
#include "convert/numerics/named_tensors.hpp"
#include "convert/numerics/ops.hpp"
#include "convert/tokenizer/bpe.hpp"

namespace convert::model {

using nn::GradTape;
using nn::ParameterSet;
using nn::Tensor;
using nn::Var;

// Final embedding tagged with the tower that produced it.
template <class T = float>
struct SentenceEmbedding {
  std::vector<T> values;
  Side side = Side::input;
};

// Dot product of an input-side and a response-side embedding.
template <class T>
T score(const SentenceEmbedding<T>& input, const SentenceEmbedding<T>& response) {
  if (input.side != Side::input || response.side != Side::response) {
    fail(ErrorCode::contract, "score expects (input, response) embeddings");
  }
  if (input.values.size() != response.values.size()) fail(ErrorCode::dimension, "embedding sizes differ");
  return nn::dot<T>(input.values, response.values);
}

// Token sequences packed for one forward pass. Row r of the packed matrix is
// position r % stride of sequence r / stride.
struct PackedBatch {
  nn::SequenceLayout layout;
  std::vector<std::size_t> token_ids;
  std::vector<std::size_t> positions;
};

// Real length of a sequence: trailing PAD ids are padding, not tokens.
inline std::size_t effective_length(std::span<const tok::TokenId> ids) {
  std::size_t n = ids.size();
  while (n > 0 && ids[n - 1] == tok::Specials::pad) --n;
  return n;
}

inline PackedBatch pack(std::span<const tok::TokenSequence* const> sequences) {
  require(!sequences.empty(), ErrorCode::contract, "cannot pack an empty batch");
  PackedBatch batch;
  std::size_t stride = 0;
  for (const auto* s : sequences) {
    const std::size_t n = effective_length(s->ids);
    if (n == 0) fail(ErrorCode::contract, "token sequence is empty");
    batch.layout.lengths.push_back(n);
    stride = std::max(stride, n);
  }
  batch.layout.stride = stride;
  batch.token_ids.assign(stride * sequences.size(), tok::Specials::pad);
  batch.positions.resize(stride * sequences.size());
  for (std::size_t b = 0; b < sequences.size(); ++b) {
    for (std::size_t i = 0; i < batch.layout.lengths[b]; ++i) batch.token_ids[b * stride + i] = sequences[b]->ids[i];
    for (std::size_t i = 0; i < stride; ++i) batch.positions[b * stride + i] = i;
  }
  return batch;
}

inline PackedBatch pack(std::span<const tok::TokenSequence> sequences) {
  std::vector<const tok::TokenSequence*> ptrs;
  ptrs.reserve(sequences.size());
  for (const auto& s : sequences) ptrs.push_back(&s);
  return pack(std::span<const tok::TokenSequence* const>(ptrs));
}

struct ForwardMode {
  bool train = false;
  std::mt19937_64* rng = nullptr;  // required when train is set and dropout > 0
};

namespace names {
inline std::string layer(std::size_t i, const char* leaf) { return "shared.layer" + std::to_string(i) + "." + leaf; }
inline std::string tower(Side side, std::size_t i, const char* leaf) {
  return "tower." + std::string(to_string(side)) + "." + std::to_string(i) + "." + leaf;
}
}  // namespace names

template <class T>
class EncoderPass;

// Dual encoder: subword + two-period positional embeddings, a stack of
// pre-norm transformer layers with single-head 64-d attention shared by both
// sides, two-head self-attention pooling with a square-root-of-N reduction,
// and one feed-forward tower per side.
template <class T = float>
class Encoder {
 public:
  Encoder(EncoderConfig config, std::uint64_t vocab_fingerprint, std::uint64_t seed)
      : config_(config), vocab_fingerprint_(vocab_fingerprint) {
    config_.validate();
    initialize(seed);
  }

  // Adopts existing parameters; names and shapes must match the config.
  Encoder(EncoderConfig config, std::uint64_t vocab_fingerprint, ParameterSet<T> params)
      : config_(config), vocab_fingerprint_(vocab_fingerprint), params_(std::move(params)) {
    config_.validate();
    Encoder reference(config_, vocab_fingerprint_, 0);
    if (reference.params_.size() != params_.size()) fail(ErrorCode::config_mismatch, "parameter count mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& [name, t] = reference.params_.at(i);
      if (params_.at(i).first != name || params_.at(i).second.shape() != t.shape()) {
        fail(ErrorCode::config_mismatch, "parameter " + params_.at(i).first + " does not match the config");
      }
    }
  }

  const EncoderConfig& config() const noexcept { return config_; }
  std::uint64_t vocab_fingerprint() const noexcept { return vocab_fingerprint_; }
  ParameterSet<T>& params() noexcept { return params_; }
  const ParameterSet<T>& params() const noexcept { return params_; }

  // M1[i mod L1] + M2[i mod L2]; defined for every position.
  std::vector<T> positional_embedding(std::size_t position) const {
    const auto& m1 = params_.get("embed.position1");
    const auto& m2 = params_.get("embed.position2");
    auto r1 = m1.row(position % config_.period_1);
    auto r2 = m2.row(position % config_.period_2);
    std::vector<T> out(r1.size());
    for (std::size_t c = 0; c < out.size(); ++c) out[c] = r1[c] + r2[c];
    return out;
  }

  // Inference-mode embeddings, one row per sequence.
  Tensor<T> embed_batch(std::span<const tok::TokenSequence> sequences, Side side) const;

  std::vector<SentenceEmbedding<T>> embed(std::span<const tok::TokenSequence> sequences, Side side) const {
    const Tensor<T> rows = embed_batch(sequences, side);
    std::vector<SentenceEmbedding<T>> out;
    for (std::size_t r = 0; r < rows.rows(); ++r) {
      out.push_back({std::vector<T>(rows.row(r).begin(), rows.row(r).end()), side});
    }
    return out;
  }

  SentenceEmbedding<T> embed(const tok::TokenSequence& sequence, Side side) const {
    return embed(std::span<const tok::TokenSequence>(&sequence, 1), side).front();
  }

  template <class U>
  Encoder<U> cast() const {
    ParameterSet<U> converted;
    for (const auto& [name, t] : params_) converted.add(name, t.template cast<U>());
    return Encoder<U>(config_, vocab_fingerprint_, std::move(converted));
  }

 private:
  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto draw = [&](nn::Shape shape, double std_dev) {
      Tensor<T> t(std::move(shape));
      for (auto& v : t.values()) {
        double z;
        do {
          z = normal(rng);
        } while (std::abs(z) > 2.0);
        v = T(z * std_dev);
      }
      return t;
    };
    // fan is the input width for weight matrices and the row width for
    // embedding tables
    auto scaled = [&](nn::Shape shape, std::size_t fan) {
      const double std_dev = config_.init_gain > 0.0 ? config_.init_gain / std::sqrt(double(fan)) : config_.init_std;
      return draw(std::move(shape), std_dev);
    };
    auto table = [&](nn::Shape shape) { return scaled(shape, shape[1]); };
    auto weight = [&](nn::Shape shape) { return scaled(shape, shape[0]); };
    auto zeros = [](std::size_t n) { return Tensor<T>(nn::Shape{n}); };
    auto ones = [](std::size_t n) { return Tensor<T>(nn::Shape{n}, T(1)); };

    const std::size_t d = config_.embed_dim;
    params_.add("embed.tokens", table({config_.vocab_size, d}));
    params_.add("embed.position1", table({config_.period_1, d}));
    params_.add("embed.position2", table({config_.period_2, d}));
    for (std::size_t l = 0; l < config_.num_shared_layers; ++l) {
      params_.add(names::layer(l, "norm1.gamma"), ones(d));
      params_.add(names::layer(l, "norm1.beta"), zeros(d));
      params_.add(names::layer(l, "attn.query"), weight({d, config_.attention_dim}));
      params_.add(names::layer(l, "attn.key"), weight({d, config_.attention_dim}));
      params_.add(names::layer(l, "attn.value"), weight({d, d}));
      params_.add(names::layer(l, "attn.out"), weight({d, d}));
      params_.add(names::layer(l, "attn.out_bias"), zeros(d));
      params_.add(names::layer(l, "norm2.gamma"), ones(d));
      params_.add(names::layer(l, "norm2.beta"), zeros(d));
      params_.add(names::layer(l, "ffn.in"), weight({d, config_.ffn_hidden_dim}));
      params_.add(names::layer(l, "ffn.in_bias"), zeros(config_.ffn_hidden_dim));
      params_.add(names::layer(l, "ffn.out"), weight({config_.ffn_hidden_dim, d}));
      params_.add(names::layer(l, "ffn.out_bias"), zeros(d));
    }
    params_.add("shared.final_norm.gamma", ones(d));
    params_.add("shared.final_norm.beta", zeros(d));
    params_.add("pool.query", weight({d, d}));
    params_.add("pool.key", weight({d, d}));
    params_.add("pool.value", weight({d, d}));
    params_.add("pool.out", weight({d, d}));
    params_.add("pool.out_bias", zeros(d));
    for (Side side : {Side::input, Side::response}) {
      for (std::size_t l = 0; l + 1 < config_.tower_layers; ++l) {
        params_.add(names::tower(side, l, "weight"), weight({d, d}));
        params_.add(names::tower(side, l, "bias"), zeros(d));
      }
      const std::size_t last = config_.tower_layers - 1;
      params_.add(names::tower(side, last, "weight"), weight({d, config_.final_dim}));
      params_.add(names::tower(side, last, "bias"), zeros(config_.final_dim));
    }
  }

  EncoderConfig config_;
  std::uint64_t vocab_fingerprint_ = 0;
  ParameterSet<T> params_;
};

// One forward pass over a tape. Parameters are bound to the tape lazily and
// once, so both sides of a batch reuse the same shared-block leaves.
template <class T = float>
class EncoderPass {
 public:
  EncoderPass(const Encoder<T>& encoder, GradTape<T>& tape, ForwardMode mode = {})
      : encoder_(encoder), tape_(tape), mode_(mode) {
    if (mode_.train && encoder_.config().dropout_rate > 0.0 && !mode_.rng) {
      fail(ErrorCode::contract, "training mode with dropout needs a random generator");
    }
  }

  Var<T> param(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    Var<T> v = tape_.parameter(name, encoder_.params().get(name));
    bound_.emplace(name, v);
    return v;
  }

  // Contextual token matrix H (rows = layout.rows(), cols = embed_dim).
  Var<T> shared_encode(const PackedBatch& batch) {
    const auto& cfg = encoder_.config();
    std::vector<std::size_t> p1(batch.positions.size()), p2(batch.positions.size());
    for (std::size_t r = 0; r < p1.size(); ++r) {
      p1[r] = batch.positions[r] % cfg.period_1;
      p2[r] = batch.positions[r] % cfg.period_2;
    }
    Var<T> x = nn::gather_rows(param("embed.tokens"), batch.token_ids) +
               nn::gather_rows(param("embed.position1"), std::move(p1)) +
               nn::gather_rows(param("embed.position2"), std::move(p2));
    x = dropout(x);
    for (std::size_t l = 0; l < cfg.num_shared_layers; ++l) {
      Var<T> a = nn::layer_norm(x, param(names::layer(l, "norm1.gamma")), param(names::layer(l, "norm1.beta")));
      Var<T> att = nn::masked_attention(nn::matmul(a, param(names::layer(l, "attn.query"))),
                                        nn::matmul(a, param(names::layer(l, "attn.key"))),
                                        nn::matmul(a, param(names::layer(l, "attn.value"))), batch.layout, 1);
      x = x + nn::linear(att, param(names::layer(l, "attn.out")), param(names::layer(l, "attn.out_bias")));
      Var<T> f = nn::layer_norm(x, param(names::layer(l, "norm2.gamma")), param(names::layer(l, "norm2.beta")));
      Var<T> hidden = dropout(nn::gelu(nn::linear(f, param(names::layer(l, "ffn.in")),
                                                  param(names::layer(l, "ffn.in_bias")))));
      x = x + nn::linear(hidden, param(names::layer(l, "ffn.out")), param(names::layer(l, "ffn.out_bias")));
    }
    return nn::layer_norm(x, param("shared.final_norm.gamma"), param("shared.final_norm.beta"));
  }

  // Two-head self-attention over H, then the square-root-of-N reduction.
  // Returns batch x embed_dim.
  Var<T> pool(Var<T> h, const PackedBatch& batch) {
    Var<T> att = nn::masked_attention(nn::matmul(h, param("pool.query")), nn::matmul(h, param("pool.key")),
                                      nn::matmul(h, param("pool.value")), batch.layout,
                                      encoder_.config().pooling_heads);
    Var<T> mixed = nn::linear(att, param("pool.out"), param("pool.out_bias"));
    return nn::sqrt_n_pool(mixed, batch.layout);
  }

  // Side-specific feed-forward tower: hidden layers h + gelu(h W + b), then a
  // linear projection to final_dim.
  Var<T> tower(Var<T> pooled, Side side) {
    if (side != Side::input && side != Side::response) fail(ErrorCode::contract, "invalid encoder side");
    const std::size_t layers = encoder_.config().tower_layers;
    Var<T> h = pooled;
    for (std::size_t l = 0; l + 1 < layers; ++l) {
      h = h + nn::gelu(nn::linear(h, param(names::tower(side, l, "weight")), param(names::tower(side, l, "bias"))));
    }
    return nn::linear(h, param(names::tower(side, layers - 1, "weight")),
                      param(names::tower(side, layers - 1, "bias")));
  }

  Var<T> embed(const PackedBatch& batch, Side side) { return tower(pool(shared_encode(batch), batch), side); }

 private:
  Var<T> dropout(Var<T> x) {
    if (!mode_.train) return x;
    return nn::dropout(x, T(encoder_.config().dropout_rate), *mode_.rng);
  }

  const Encoder<T>& encoder_;
  GradTape<T>& tape_;
  ForwardMode mode_;
  std::unordered_map<std::string, Var<T>> bound_;
};

template <class T>
Tensor<T> Encoder<T>::embed_batch(std::span<const tok::TokenSequence> sequences, Side side) const {
  for (const auto& s : sequences) {
    for (tok::TokenId id : s.ids) {
      if (id >= config_.vocab_size) fail(ErrorCode::range, "token id outside the encoder vocabulary");
    }
  }
  GradTape<T> tape(false);
  EncoderPass<T> pass(*this, tape);
  return pass.embed(pack(sequences), side).value();
}

// S[i][j] = input_i . response_j
template <class T>
Tensor<T> score_matrix(const Tensor<T>& inputs, const Tensor<T>& responses) {
  return nn::matmul_nt(inputs, responses);
}

}  // namespace convert::model
