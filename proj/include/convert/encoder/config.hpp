#pragma once

#include <cstddef>
#include <numeric>
#include <string>

#include <nlohmann/json.hpp>

#include "convert/error.hpp"

namespace convert::model {

enum class Side { input, response };

inline std::string_view to_string(Side s) { return s == Side::input ? "input" : "response"; }

// Architecture hyperparameters. Dimensions default to a desk-scale model;
// the 64-dimensional attention projection, six shared layers, two pooling
// heads and three-layer towers follow the reference architecture.
struct EncoderConfig {
  std::size_t vocab_size = 8000;
  std::size_t embed_dim = 128;
  std::size_t attention_dim = 64;
  std::size_t num_shared_layers = 6;
  std::size_t pooling_heads = 2;
  std::size_t tower_layers = 3;
  std::size_t final_dim = 128;
  std::size_t period_1 = 47;
  std::size_t period_2 = 11;
  std::size_t ffn_hidden_dim = 256;
  double dropout_rate = 0.1;
  std::size_t max_sequence_length = 60;
  // Weights draw from a normal truncated at 2 std with std = init_gain /
  // sqrt(fan), ~0.02 at width 768. A fixed 0.02 at narrow widths leaves the
  // pooling/tower product stuck near a rank-one saddle. init_gain = 0 uses
  // init_std everywhere.
  double init_std = 0.02;
  double init_gain = 0.5;

  void validate() const {
    auto positive = [](std::size_t v, const char* what) {
      if (v == 0) fail(ErrorCode::config, std::string(what) + " must be positive");
    };
    positive(vocab_size, "vocab_size");
    positive(embed_dim, "embed_dim");
    positive(attention_dim, "attention_dim");
    positive(num_shared_layers, "num_shared_layers");
    positive(pooling_heads, "pooling_heads");
    positive(tower_layers, "tower_layers");
    positive(final_dim, "final_dim");
    positive(period_1, "period_1");
    positive(period_2, "period_2");
    positive(ffn_hidden_dim, "ffn_hidden_dim");
    if (max_sequence_length < 2) fail(ErrorCode::config, "max_sequence_length must be at least 2");
    if (std::gcd(period_1, period_2) != 1) fail(ErrorCode::config, "positional periods must be coprime");
    if (embed_dim % pooling_heads != 0) fail(ErrorCode::config, "embed_dim must divide across pooling heads");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail(ErrorCode::config, "dropout_rate must be in [0, 1)");
    if (!(init_std > 0.0)) fail(ErrorCode::config, "init_std must be positive");
    if (!(init_gain >= 0.0)) fail(ErrorCode::config, "init_gain must be non-negative");
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(EncoderConfig, vocab_size, embed_dim, attention_dim, num_shared_layers,
                                   pooling_heads, tower_layers, final_dim, period_1, period_2, ffn_hidden_dim,
                                   dropout_rate, max_sequence_length, init_std, init_gain)

}  // namespace convert::model
