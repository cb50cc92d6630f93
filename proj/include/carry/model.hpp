#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "carry/addition.hpp"
#include "carry/autodiff.hpp"
#include "carry/tensor.hpp"

namespace carry::model {

enum class DropoutPlacement { AttentionAndMlp, Residual, Both, None };

std::string_view placement_name(DropoutPlacement p);
DropoutPlacement placement_from_name(std::string_view s);

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 2;
  int d_model = 128;
  int d_ff = 128;
  double dropout = 0.1;
  int vocab = data::kVocabSize;
  int width = 3;  // digits per operand in the token layout
  bool causal = false;
  bool biases = true;
  DropoutPlacement dropout_placement = DropoutPlacement::AttentionAndMlp;
  double rope_base = 10000.0;
  double ln_eps = 1e-5;

  int d_head() const { return d_model / n_heads; }
  // Encoder: a + b = = =  (3w + 1). Decoder: a + b = c  (3w + 2 inputs).
  int seq_len() const { return causal ? 3 * width + 2 : 3 * width + 1; }
  // Sequence index whose logits predict answer digit i (most significant first).
  int output_position(int i) const { return 2 * width + 1 + i; }
  bool is_digit_position(int pos) const {
    return (pos >= 0 && pos < width) || (pos > width && pos <= 2 * width);
  }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Named tensors; insertion order is the canonical (checkpoint) order.
template <typename T>
class ParameterSet {
 public:
  void add(std::string name, Tensor<T> value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor<T>& get(const std::string& name) const;
  Tensor<T>& get(const std::string& name);
  std::size_t size() const { return entries_.size(); }
  const std::string& name(std::size_t i) const { return entries_[i].first; }
  const Tensor<T>& at(std::size_t i) const { return entries_[i].second; }
  Tensor<T>& at(std::size_t i) { return entries_[i].second; }
  std::vector<Tensor<T>*> pointers();
  std::vector<const Tensor<T>*> pointers() const;

  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& [n, v] : entries_) out.add(n, v.template cast<U>());
    return out;
  }
  bool operator==(const ParameterSet&) const = default;

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

bool is_bias_param(const std::string& name);

template <typename T>
ParameterSet<T> init_params(const ModelConfig& cfg, std::uint64_t seed);

// Shapes every name must have under cfg (used to validate checkpoints).
std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& cfg);

struct AblationTarget {
  enum class Kind { Head, Mlp, Neurons, SkipAttention };
  Kind kind = Kind::Head;
  int layer = 0;
  int head = 0;
  std::vector<int> neurons;
  bool operator==(const AblationTarget&) const = default;
};

struct AblationSpec {
  std::vector<AblationTarget> targets;

  static AblationSpec head(int layer, int h);
  static AblationSpec mlp(int layer);
  static AblationSpec neurons(int layer, std::vector<int> idx);
  static AblationSpec skip_attention(int layer);
  AblationSpec& with(const AblationSpec& other);

  bool empty() const { return targets.empty(); }
  bool head_ablated(int layer, int h) const;
  bool mlp_ablated(int layer) const;
  bool skip_ablated(int layer) const;
  std::vector<int> ablated_neurons(int layer) const;
  void validate(const ModelConfig& cfg) const;
  // "head:L:H", "mlp:L", "skip:L"; neuron lists come from JSON files.
  std::string str() const;
};

template <typename T>
struct LayerTrace {
  std::vector<Tensor<T>> attention;  // per head [B, S, S]
  std::vector<Tensor<T>> head_out;   // per head additive contribution [B*S, D]
  Tensor<T> resid_pre;               // [B*S, D]
  Tensor<T> attn_out;                // attention block output [B*S, D]
  Tensor<T> resid_mid;
  Tensor<T> mlp_pre;                 // hidden pre-activation z [B*S, d_ff]
  Tensor<T> mlp_post;                // after ReLU (and neuron ablation)
  Tensor<T> mlp_out;                 // [B*S, D]
  Tensor<T> resid_post;
};

template <typename T>
struct ActivationTrace {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<LayerTrace<T>> layers;
  Tensor<T> final_resid;  // before the final layernorm
};

enum class Mode { Train, Eval };

template <typename T>
struct ForwardOptions {
  Mode mode = Mode::Eval;
  const AblationSpec* ablation = nullptr;
  ActivationTrace<T>* capture = nullptr;
  RngStream* dropout_rng = nullptr;
};

// Parameters bound as leaves on a tape.
struct BoundParams {
  std::map<std::string, Var> vars;
  Var operator[](const std::string& name) const;
};

template <typename T>
BoundParams bind(Tape<T>& tape, const ParameterSet<T>& params, bool requires_grad);

// tokens: batch * seq_len ids, row-major. Returns logits [batch * seq, vocab].
template <typename T>
Var forward_on_tape(Tape<T>& tape, const BoundParams& p, const ModelConfig& cfg,
                    std::span<const int> tokens, std::size_t batch,
                    const ForwardOptions<T>& opt);

template <typename T>
Tensor<T> forward(const ParameterSet<T>& params, const ModelConfig& cfg,
                  std::span<const int> tokens, std::size_t batch,
                  const ForwardOptions<T>& opt = {});

struct Batch {
  std::size_t size = 0;
  std::vector<int> tokens;   // size * seq_len
  std::vector<int> targets;  // size * seq_len, -1 = ignored
};

// Encoder: targets are the answer digits at the '=' positions.
// Decoder: next-token targets over the whole "a + b = c =" sequence.
Batch make_batch(const ModelConfig& cfg, std::span<const data::AdditionExample> examples);
Batch make_batch(const ModelConfig& cfg, std::span<const data::AdditionExample* const> examples);

template <typename T>
Var loss_on_tape(Tape<T>& tape, const BoundParams& p, const ModelConfig& cfg, const Batch& batch,
                 const ForwardOptions<T>& opt);

template <typename T>
T loss(const ParameterSet<T>& params, const ModelConfig& cfg, const Batch& batch,
       const ForwardOptions<T>& opt = {});

// Predicted answer digits, `width` per example, digits restricted to 0..9.
// Encoder: argmax at the '=' positions. Decoder: greedy generation.
template <typename T>
std::vector<std::uint8_t> predict(const ParameterSet<T>& params, const ModelConfig& cfg,
                                  const Batch& batch, const AblationSpec* ablation = nullptr);

}  // namespace carry::model
