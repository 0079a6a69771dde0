// First-order optimizers over flat parameter vectors.

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "gm/common.hpp"

namespace gm {

template <typename R>
struct Sgd {
  R lr;

  explicit Sgd(R lr_) : lr(lr_) {}

  void step(std::vector<R>& params, const std::vector<R>& grad) {
    if (params.size() != grad.size()) throw InputError("sgd: size mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
  }
};

template <typename R>
struct Adam {
  R lr;
  R beta1 = R(0.9);
  R beta2 = R(0.999);
  R eps = R(1e-8);
  // Decoupled weight decay; 0 gives plain Adam, >0 gives AdamW.
  R weight_decay = R(0);

  std::vector<R> m, v;
  std::int64_t t = 0;

  explicit Adam(R lr_) : lr(lr_) {}
  Adam(R lr_, R wd) : lr(lr_), weight_decay(wd) {}

  void step(std::vector<R>& params, const std::vector<R>& grad) {
    step_with_lr(params, grad, lr);
  }

  void step_with_lr(std::vector<R>& params, const std::vector<R>& grad, R lr_now) {
    if (params.size() != grad.size()) throw InputError("adam: size mismatch");
    if (m.empty()) {
      m.assign(params.size(), R(0));
      v.assign(params.size(), R(0));
    }
    ++t;
    const R bc1 = R(1) - std::pow(beta1, R(t));
    const R bc2 = R(1) - std::pow(beta2, R(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = beta1 * m[i] + (R(1) - beta1) * grad[i];
      v[i] = beta2 * v[i] + (R(1) - beta2) * grad[i] * grad[i];
      R mhat = m[i] / bc1;
      R vhat = v[i] / bc2;
      params[i] -= lr_now * (mhat / (std::sqrt(vhat) + eps) + weight_decay * params[i]);
    }
  }
};

template <typename R>
Adam<R> make_adamw(R lr, R weight_decay = R(0.01)) {
  return Adam<R>(lr, weight_decay);
}

}  // namespace gm
