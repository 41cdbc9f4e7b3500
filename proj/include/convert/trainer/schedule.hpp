#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

#include "convert/error.hpp"

namespace convert::train {

struct LrSchedule {
  double peak_lr = 1e-3;
  std::size_t warmup_steps = 10'000;
  std::size_t total_steps = 100'000;
};

// Linear 0 -> peak over [0, warmup], then linear peak -> 0 over
// [warmup, total].
inline double lr_at(std::size_t step, const LrSchedule& s) {
  if (s.warmup_steps > s.total_steps) fail(ErrorCode::config, "warmup_steps exceeds total_steps");
  if (step > s.total_steps) {
    fail(ErrorCode::contract, "step " + std::to_string(step) + " beyond total_steps " + std::to_string(s.total_steps));
  }
  if (step == s.warmup_steps) return s.peak_lr;
  if (step < s.warmup_steps) return s.peak_lr * double(step) / double(s.warmup_steps);
  return s.peak_lr * double(s.total_steps - step) / double(s.total_steps - s.warmup_steps);
}

// Warmup capped at 10% of a short run.
inline std::size_t default_warmup(std::size_t total_steps) {
  return std::min<std::size_t>(10'000, total_steps / 10);
}

// Per-epoch batch sizes: start_k, doubled at every even-numbered epoch
// (2, 4, ...). The endpoints must be reachable exactly that way.
inline std::vector<std::size_t> curriculum_schedule(std::size_t start_k = 128, std::size_t end_k = 2048,
                                                    std::size_t epochs = 8) {
  if (epochs == 0) fail(ErrorCode::config, "curriculum needs at least one epoch");
  if (start_k == 0) fail(ErrorCode::config, "batch size must be positive");
  std::size_t k = start_k;
  std::vector<std::size_t> out;
  for (std::size_t e = 1; e <= epochs; ++e) {
    if (e % 2 == 0) k *= 2;
    out.push_back(k);
  }
  if (out.back() != end_k) {
    fail(ErrorCode::config, "cannot go from batch size " + std::to_string(start_k) + " to " + std::to_string(end_k) +
                                " in " + std::to_string(epochs) + " epochs by doubling every second epoch");
  }
  return out;
}

}  // namespace convert::train
