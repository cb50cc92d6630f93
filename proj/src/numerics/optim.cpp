#include "carry/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace carry {

template <typename T>
OptimizerState<T> make_optimizer(const AdamWConfig& cfg,
                                 std::span<const Tensor<T>* const> params) {
  OptimizerState<T> st;
  st.config = cfg;
  for (const auto* p : params) {
    st.m.emplace_back(p->shape());
    st.v.emplace_back(p->shape());
  }
  return st;
}

template <typename T>
void adamw_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>* const> grads,
                OptimizerState<T>& state) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw std::invalid_argument("adamw_step: parameter, gradient and state counts differ");
  const auto& c = state.config;
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  const T decay = static_cast<T>(1.0 - c.lr * c.weight_decay);
  const T step_size = static_cast<T>(c.lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(c.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    const auto& g = *grads[i];
    if (p.shape() != g.shape() || p.shape() != state.m[i].shape())
      throw ShapeError("adamw_step", p.shape(), g.shape());
    T* pd = p.ptr();
    const T* gd = g.ptr();
    T* md = state.m[i].ptr();
    T* vd = state.v[i].ptr();
    const std::size_t n = p.size();
#pragma omp simd
    for (std::size_t j = 0; j < n; ++j) {
      md[j] = b1 * md[j] + (T(1) - b1) * gd[j];
      vd[j] = b2 * vd[j] + (T(1) - b2) * gd[j] * gd[j];
      const T denom = std::sqrt(vd[j]) * inv_sqrt_bc2 + eps;
      pd[j] = pd[j] * decay - step_size * md[j] / denom;
    }
  }
}

template <typename T>
Tensor<T> glorot_init(const Shape& shape, RngStream& rng, std::size_t fan_in,
                      std::size_t fan_out) {
  if (shape.size() != 2)
    throw ShapeError("glorot_init expects a 2-D shape, got " + shape_str(shape));
  if (fan_in == 0) fan_in = shape[0];
  if (fan_out == 0) fan_out = shape[1];
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor<T> out(shape);
  for (auto& v : out.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return out;
}

template OptimizerState<float> make_optimizer<float>(const AdamWConfig&,
                                                     std::span<const Tensor<float>* const>);
template OptimizerState<double> make_optimizer<double>(const AdamWConfig&,
                                                       std::span<const Tensor<double>* const>);
template void adamw_step<float>(std::span<Tensor<float>* const>,
                                std::span<const Tensor<float>* const>, OptimizerState<float>&);
template void adamw_step<double>(std::span<Tensor<double>* const>,
                                 std::span<const Tensor<double>* const>, OptimizerState<double>&);
template Tensor<float> glorot_init<float>(const Shape&, RngStream&, std::size_t, std::size_t);
template Tensor<double> glorot_init<double>(const Shape&, RngStream&, std::size_t, std::size_t);

}  // namespace carry
