#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "carry/rng.hpp"
#include "carry/tensor.hpp"

namespace carry {

struct AdamWConfig {
  double lr = 1.4e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.2;
};

template <typename T>
struct OptimizerState {
  AdamWConfig config;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::uint64_t step = 0;
};

template <typename T>
OptimizerState<T> make_optimizer(const AdamWConfig& cfg, std::span<const Tensor<T>* const> params);

// One decoupled-weight-decay Adam step:
//   p <- p - lr*wd*p - lr * m_hat / (sqrt(v_hat) + eps)
template <typename T>
void adamw_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>* const> grads,
                OptimizerState<T>& state);

// Uniform on +-sqrt(6 / (fan_in + fan_out)).
template <typename T>
Tensor<T> glorot_init(const Shape& shape, RngStream& rng, std::size_t fan_in = 0,
                      std::size_t fan_out = 0);

}  // namespace carry
