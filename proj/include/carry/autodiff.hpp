#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "carry/rng.hpp"
#include "carry/tensor.hpp"

namespace carry {

struct Var {
  std::uint32_t id = std::numeric_limits<std::uint32_t>::max();
  bool valid() const { return id != std::numeric_limits<std::uint32_t>::max(); }
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Records primitive applications in creation order, which is a topological
// order; backward() walks it in reverse.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var leaf(Tensor<T> value, bool requires_grad = true) {
    return push(std::move(value), requires_grad && record_, nullptr);
  }
  Var constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }

  const Tensor<T>& value(Var v) const { return node(v).value; }
  const Shape& shape(Var v) const { return node(v).value.shape(); }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  // Gradient accumulated by the last backward(); zeros if v never received one.
  Tensor<T> grad(Var v) const {
    const auto& n = node(v);
    return n.grad.empty() && !n.value.empty() ? Tensor<T>(n.value.shape()) : n.grad;
  }

  void backward(Var loss) {
    if (!loss.valid() || loss.id >= nodes_.size())
      throw TapeError("backward: loss is not on this tape");
    auto& root = nodes_[loss.id];
    if (root.value.size() != 1)
      throw TapeError("backward: loss must be a scalar, got shape " +
                      shape_str(root.value.shape()));
    if (!root.requires_grad)
      throw TapeError("backward: loss does not depend on any recorded parameter");
    for (auto& n : nodes_) n.grad = Tensor<T>();
    root.grad = Tensor<T>(root.value.shape(), T(1));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, n.grad);
    }
  }

  // Primitive plumbing.
  Var record(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(fn));
  }
  Var record(Tensor<T> value, std::span<const Var> inputs, BackwardFn fn) {
    bool needs = false;
    if (record_)
      for (Var in : inputs) needs = needs || node(in).requires_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr);
  }

  // Lazily zero-initialised gradient buffer, or nullptr when v needs none.
  Tensor<T>* grad_buffer(Var v) {
    auto& n = node(v);
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return &n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor<T> value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, std::move(fn)});
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }
  const Node& node(Var v) const {
    if (!v.valid() || v.id >= nodes_.size()) throw TapeError("variable is not on this tape");
    return nodes_[v.id];
  }
  Node& node(Var v) {
    if (!v.valid() || v.id >= nodes_.size()) throw TapeError("variable is not on this tape");
    return nodes_[v.id];
  }

  bool record_;
  std::vector<Node> nodes_;
};

// Differentiable primitives. Shape errors throw ShapeError naming both shapes.
namespace ops {

// a[..., K] x b[K, N] -> [..., N]
template <typename T> Var matmul(Tape<T>& t, Var a, Var b);
// a[B, M, K] x b[B, K, N] (or b[B, N, K] with transpose_b) -> [B, M, N]
template <typename T> Var bmm(Tape<T>& t, Var a, Var b, bool transpose_b = false);
template <typename T> Var add(Tape<T>& t, Var a, Var b);
// a[..., N] + bias[N]
template <typename T> Var add_bias(Tape<T>& t, Var a, Var bias);
template <typename T> Var mul(Tape<T>& t, Var a, Var b);
template <typename T> Var scale(Tape<T>& t, Var a, T s);
template <typename T> Var relu(Tape<T>& t, Var a);
// Softmax over the last axis. With causal, a [..., S, S] input is masked so
// row i only sees columns j <= i (masked entries are exactly zero).
template <typename T> Var softmax(Tape<T>& t, Var a, bool causal = false);
template <typename T> Var layernorm(Tape<T>& t, Var x, Var gain, Var shift, T eps = T(1e-5));
// Training mode zeroes entries with probability p and rescales by 1/(1-p);
// eval mode is the identity.
template <typename T> Var dropout(Tape<T>& t, Var a, T p, RngStream* rng, bool training);
// table[V, D] gathered at tokens -> [tokens.size(), D]
template <typename T> Var embed(Tape<T>& t, Var table, std::span<const int> tokens);
// Mean cross-entropy over rows of logits[R, V]; targets < 0 are ignored.
template <typename T> Var cross_entropy(Tape<T>& t, Var logits, std::span<const int> targets);
// Rotary embedding on x[B, S, D]: pair (2i, 2i+1) at sequence index s is
// rotated by s * base^(-2i/D).
template <typename T> Var rope(Tape<T>& t, Var x, T base = T(10000));
template <typename T> Var sum(Tape<T>& t, Var a);
template <typename T> Var reshape(Tape<T>& t, Var a, Shape shape);

// x[..., K] W[K, N] + bias[N]; bias may be an invalid Var.
template <typename T> Var linear(Tape<T>& t, Var x, Var w, Var bias);
// Concatenation along the last axis (equal leading extents) or the first axis.
template <typename T> Var concat_cols(Tape<T>& t, std::span<const Var> parts);
template <typename T> Var concat_rows(Tape<T>& t, std::span<const Var> parts);
// x[B*S, C] columns [offset, offset + H*dh) -> [B*H, S, dh], head-major per sequence.
template <typename T>
Var split_heads(Tape<T>& t, Var x, std::size_t batch, std::size_t heads, std::size_t offset,
                std::size_t d_head);
// Inverse layout: z[B*H, S, dh] -> [B*S, H*dh].
template <typename T> Var merge_heads(Tape<T>& t, Var z, std::size_t batch);

// Scaled dot-product attention over q, k, v [N, S, dh]: softmax(scale q k^T)
// with optional causal mask, dropout on the weights, then times v. When
// `weights` is non-null it receives the pre-dropout weights [N, S, S].
template <typename T>
Var attention(Tape<T>& t, Var q, Var k, Var v, T scale, bool causal, T p, RngStream* rng,
              bool training, Tensor<T>* weights = nullptr);

}  // namespace ops

// Non-differentiable helpers shared with the analysis code.
template <typename T>
Tensor<T> rope_rotate(const Tensor<T>& vec, std::size_t position, T base = T(10000));
template <typename T>
Tensor<T> softmax_values(Tensor<T> x);
// Pre-affine layer normalisation of each row (population variance).
template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& x, T eps = T(1e-5));

}  // namespace carry
