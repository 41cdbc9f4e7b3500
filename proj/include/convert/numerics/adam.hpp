#pragma once

#include <cmath>
#include <cstdint>

#include "convert/numerics/named_tensors.hpp"

namespace convert::nn {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <class T = float>
struct AdamState {
  NamedTensors<T> first_moment;
  NamedTensors<T> second_moment;
  std::uint64_t step = 0;

  static AdamState for_params(const ParameterSet<T>& params) {
    return AdamState{params.zeros_like(), params.zeros_like(), 0};
  }
};

// One Adam update with bias correction. L2 decay is coupled: weight_decay *
// theta is added to the gradient before the moment updates.
template <class T>
void adam_step(ParameterSet<T>& params, const Gradients<T>& grads, AdamState<T>& state, double lr,
               double weight_decay, const AdamHyper& hyper = {}) {
  if (!(lr > 0.0)) fail(ErrorCode::config, "learning rate must be positive");
  if (!(weight_decay >= 0.0)) fail(ErrorCode::config, "weight decay must be non-negative");
  if (state.first_moment.size() == 0 && params.size() != 0) state = AdamState<T>::for_params(params);
  require(state.first_moment.size() == params.size() && state.second_moment.size() == params.size(),
          ErrorCode::dimension, "optimizer state does not match the parameter set");

  state.step += 1;
  const double t = double(state.step);
  const T correction1 = T(1.0 - std::pow(hyper.beta1, t));
  const T correction2 = T(1.0 - std::pow(hyper.beta2, t));
  const T b1 = T(hyper.beta1);
  const T b2 = T(hyper.beta2);
  const T eps = T(hyper.epsilon);
  const T step_size = T(lr);
  const T decay = T(weight_decay);

  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& [name, theta] = params.at(p);
    const Tensor<T>& g = grads.get(name);
    Tensor<T>& m = state.first_moment.get(name);
    Tensor<T>& v = state.second_moment.get(name);
    if (g.shape() != theta.shape() || m.shape() != theta.shape() || v.shape() != theta.shape()) {
      fail(ErrorCode::dimension, "adam_step shape mismatch for " + name);
    }
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const T gi = g[i] + decay * theta[i];
      m[i] = b1 * m[i] + (T(1) - b1) * gi;
      v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
      const T m_hat = m[i] / correction1;
      const T v_hat = v[i] / correction2;
      theta[i] -= step_size * m_hat / (std::sqrt(v_hat) + eps);
    }
    require_finite(theta, "adam_step");
  }
}

}  // namespace convert::nn
