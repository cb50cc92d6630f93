#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "carry/kernels.hpp"
#include "carry/model.hpp"
#include "carry/optim.hpp"

namespace carry::model {

std::string_view placement_name(DropoutPlacement p) {
  switch (p) {
    case DropoutPlacement::AttentionAndMlp: return "attn_mlp";
    case DropoutPlacement::Residual: return "residual";
    case DropoutPlacement::Both: return "both";
    case DropoutPlacement::None: return "none";
  }
  return "?";
}

DropoutPlacement placement_from_name(std::string_view s) {
  for (auto p : {DropoutPlacement::AttentionAndMlp, DropoutPlacement::Residual,
                 DropoutPlacement::Both, DropoutPlacement::None})
    if (placement_name(p) == s) return p;
  throw ConfigError("unknown dropout placement '" + std::string(s) + "'");
}

void ModelConfig::validate() const {
  if (n_layers < 1 || n_layers > 3) throw ConfigError("n_layers must be 1, 2 or 3");
  if (n_heads < 1 || d_model % n_heads != 0)
    throw ConfigError("d_model must be divisible by n_heads");
  if (d_head() % 2 != 0) throw ConfigError("head dimension must be even for rotary embedding");
  if (d_ff < 1) throw ConfigError("d_ff must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (width < 1 || width > data::kMaxWidth) throw ConfigError("width out of range");
  if (vocab != data::kVocabSize) throw ConfigError("vocabulary must have 12 tokens");
}

template <typename T>
void ParameterSet<T>::add(std::string name, Tensor<T> value) {
  if (index_.count(name)) throw ConfigError("duplicate parameter " + name);
  index_.emplace(name, entries_.size());
  entries_.emplace_back(std::move(name), std::move(value));
}

template <typename T>
const Tensor<T>& ParameterSet<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("missing parameter " + name);
  return entries_[it->second].second;
}

template <typename T>
Tensor<T>& ParameterSet<T>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("missing parameter " + name);
  return entries_[it->second].second;
}

template <typename T>
std::vector<Tensor<T>*> ParameterSet<T>::pointers() {
  std::vector<Tensor<T>*> out;
  for (auto& e : entries_) out.push_back(&e.second);
  return out;
}

template <typename T>
std::vector<const Tensor<T>*> ParameterSet<T>::pointers() const {
  std::vector<const Tensor<T>*> out;
  for (const auto& e : entries_) out.push_back(&e.second);
  return out;
}

bool is_bias_param(const std::string& name) {
  static const char* suffixes[] = {".shift", ".b_in", ".b_out", ".bo", "unembed_bias"};
  for (const char* s : suffixes) {
    const std::string_view sv(s);
    if (name.size() >= sv.size() && name.compare(name.size() - sv.size(), sv.size(), sv) == 0)
      return true;
  }
  for (const char* s : {".attn.bq.", ".attn.bk.", ".attn.bv."})
    if (name.find(s) != std::string::npos) return true;
  return false;
}

namespace {

std::string layer_key(int i, const std::string& rest) {
  return "layers." + std::to_string(i) + "." + rest;
}

}  // namespace

std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& cfg) {
  cfg.validate();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto dh = static_cast<std::size_t>(cfg.d_head());
  const auto ff = static_cast<std::size_t>(cfg.d_ff);
  const auto v = static_cast<std::size_t>(cfg.vocab);
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("embed", Shape{v, d});
  for (int l = 0; l < cfg.n_layers; ++l) {
    out.emplace_back(layer_key(l, "ln1.scale"), Shape{d});
    out.emplace_back(layer_key(l, "ln1.shift"), Shape{d});
    for (const char* m : {"q", "k", "v"})
      for (int h = 0; h < cfg.n_heads; ++h)
        out.emplace_back(layer_key(l, std::string("attn.") + m + "." + std::to_string(h)),
                         Shape{d, dh});
    for (int h = 0; h < cfg.n_heads; ++h)
      out.emplace_back(layer_key(l, "attn.o." + std::to_string(h)), Shape{dh, d});
    if (cfg.biases) {
      for (const char* m : {"bq", "bk", "bv"})
        for (int h = 0; h < cfg.n_heads; ++h)
          out.emplace_back(layer_key(l, std::string("attn.") + m + "." + std::to_string(h)),
                           Shape{dh});
      out.emplace_back(layer_key(l, "attn.bo"), Shape{d});
    }
    out.emplace_back(layer_key(l, "ln2.scale"), Shape{d});
    out.emplace_back(layer_key(l, "ln2.shift"), Shape{d});
    out.emplace_back(layer_key(l, "mlp.w_in"), Shape{d, ff});
    if (cfg.biases) out.emplace_back(layer_key(l, "mlp.b_in"), Shape{ff});
    out.emplace_back(layer_key(l, "mlp.w_out"), Shape{ff, d});
    if (cfg.biases) out.emplace_back(layer_key(l, "mlp.b_out"), Shape{d});
  }
  out.emplace_back("final_ln.scale", Shape{d});
  out.emplace_back("final_ln.shift", Shape{d});
  out.emplace_back("unembed", Shape{d, v});
  if (cfg.biases) out.emplace_back("unembed_bias", Shape{v});
  return out;
}

template <typename T>
ParameterSet<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  RngStream rng(seed, "init");
  ParameterSet<T> p;
  const auto d = static_cast<std::size_t>(cfg.d_model);
  for (auto& [name, shape] : parameter_layout(cfg)) {
    if (name.ends_with(".scale")) {
      p.add(name, Tensor<T>(shape, T(1)));
    } else if (shape.size() == 1) {
      p.add(name, Tensor<T>(shape));
    } else if (name.find(".attn.") != std::string::npos) {
      // per-head slices share the fan of the full d_model x d_model projection
      p.add(name, glorot_init<T>(shape, rng, d, d));
    } else {
      p.add(name, glorot_init<T>(shape, rng));
    }
  }
  return p;
}

AblationSpec AblationSpec::head(int layer, int h) {
  return {{AblationTarget{AblationTarget::Kind::Head, layer, h, {}}}};
}
AblationSpec AblationSpec::mlp(int layer) {
  return {{AblationTarget{AblationTarget::Kind::Mlp, layer, 0, {}}}};
}
AblationSpec AblationSpec::neurons(int layer, std::vector<int> idx) {
  return {{AblationTarget{AblationTarget::Kind::Neurons, layer, 0, std::move(idx)}}};
}
AblationSpec AblationSpec::skip_attention(int layer) {
  return {{AblationTarget{AblationTarget::Kind::SkipAttention, layer, 0, {}}}};
}
AblationSpec& AblationSpec::with(const AblationSpec& other) {
  targets.insert(targets.end(), other.targets.begin(), other.targets.end());
  return *this;
}

bool AblationSpec::head_ablated(int layer, int h) const {
  return std::any_of(targets.begin(), targets.end(), [&](const auto& t) {
    return t.kind == AblationTarget::Kind::Head && t.layer == layer && t.head == h;
  });
}
bool AblationSpec::mlp_ablated(int layer) const {
  return std::any_of(targets.begin(), targets.end(), [&](const auto& t) {
    return t.kind == AblationTarget::Kind::Mlp && t.layer == layer;
  });
}
bool AblationSpec::skip_ablated(int layer) const {
  return std::any_of(targets.begin(), targets.end(), [&](const auto& t) {
    return t.kind == AblationTarget::Kind::SkipAttention && t.layer == layer;
  });
}
std::vector<int> AblationSpec::ablated_neurons(int layer) const {
  std::set<int> s;
  for (const auto& t : targets)
    if (t.kind == AblationTarget::Kind::Neurons && t.layer == layer)
      s.insert(t.neurons.begin(), t.neurons.end());
  return {s.begin(), s.end()};
}

void AblationSpec::validate(const ModelConfig& cfg) const {
  for (const auto& t : targets) {
    if (t.layer < 0 || t.layer >= cfg.n_layers)
      throw ConfigError("ablation layer " + std::to_string(t.layer) + " out of range");
    if (t.kind == AblationTarget::Kind::Head && (t.head < 0 || t.head >= cfg.n_heads))
      throw ConfigError("ablation head " + std::to_string(t.head) + " out of range");
    for (int n : t.neurons)
      if (n < 0 || n >= cfg.d_ff)
        throw ConfigError("ablation neuron " + std::to_string(n) + " out of range");
  }
}

std::string AblationSpec::str() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& t = targets[i];
    if (i) os << ',';
    switch (t.kind) {
      case AblationTarget::Kind::Head: os << "head:" << t.layer << ':' << t.head; break;
      case AblationTarget::Kind::Mlp: os << "mlp:" << t.layer; break;
      case AblationTarget::Kind::SkipAttention: os << "skip:" << t.layer; break;
      case AblationTarget::Kind::Neurons:
        os << "neurons:" << t.layer << ':' << t.neurons.size();
        break;
    }
  }
  return os.str();
}

Var BoundParams::operator[](const std::string& name) const {
  auto it = vars.find(name);
  if (it == vars.end()) throw ConfigError("parameter " + name + " not bound");
  return it->second;
}

template <typename T>
BoundParams bind(Tape<T>& tape, const ParameterSet<T>& params, bool requires_grad) {
  BoundParams b;
  for (std::size_t i = 0; i < params.size(); ++i)
    b.vars.emplace(params.name(i), tape.leaf(params.at(i), requires_grad));
  return b;
}

template <typename T>
Var forward_on_tape(Tape<T>& tape, const BoundParams& p, const ModelConfig& cfg,
                    std::span<const int> tokens, std::size_t batch,
                    const ForwardOptions<T>& opt) {
  const auto seq = static_cast<std::size_t>(cfg.seq_len());
  if (tokens.size() != batch * seq)
    throw ShapeError("forward: expected " + std::to_string(batch) + " sequences of length " +
                     std::to_string(seq) + ", got " + std::to_string(tokens.size()) + " tokens");
  static const AblationSpec kNone;
  const AblationSpec& abl = opt.ablation ? *opt.ablation : kNone;
  abl.validate(cfg);

  const bool training = opt.mode == Mode::Train;
  const T p_drop = static_cast<T>(cfg.dropout);
  const bool drop_inner = cfg.dropout_placement == DropoutPlacement::AttentionAndMlp ||
                          cfg.dropout_placement == DropoutPlacement::Both;
  const bool drop_resid = cfg.dropout_placement == DropoutPlacement::Residual ||
                          cfg.dropout_placement == DropoutPlacement::Both;
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto dh = static_cast<std::size_t>(cfg.d_head());
  const auto rows = batch * seq;
  const T eps = static_cast<T>(cfg.ln_eps);
  const T rope_base = static_cast<T>(cfg.rope_base);
  const T att_scale = T(1) / std::sqrt(static_cast<T>(dh));

  auto* cap = opt.capture;
  if (cap) {
    cap->batch = batch;
    cap->seq = seq;
    cap->layers.assign(static_cast<std::size_t>(cfg.n_layers), {});
  }

  Var x = ops::embed(tape, p["embed"], tokens);
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerTrace<T>* lt = cap ? &cap->layers[static_cast<std::size_t>(l)] : nullptr;
    const auto key = [l](const std::string& rest) { return layer_key(l, rest); };
    if (lt) lt->resid_pre = tape.value(x);

    Var h = ops::layernorm(tape, x, p[key("ln1.scale")], p[key("ln1.shift")], eps);
    const auto heads = static_cast<std::size_t>(cfg.n_heads);
    std::vector<Var> w_parts, b_parts, o_parts;
    for (const char* m : {"q", "k", "v"})
      for (std::size_t hd = 0; hd < heads; ++hd) {
        w_parts.push_back(p[key(std::string("attn.") + m + "." + std::to_string(hd))]);
        if (cfg.biases)
          b_parts.push_back(p[key(std::string("attn.b") + m + "." + std::to_string(hd))]);
      }
    for (std::size_t hd = 0; hd < heads; ++hd) o_parts.push_back(p[key("attn.o." + std::to_string(hd))]);
    const Var w_qkv = ops::concat_cols<T>(tape, w_parts);
    const Var b_qkv = cfg.biases ? ops::concat_cols<T>(tape, b_parts) : Var{};
    const Var qkv = ops::linear(tape, h, w_qkv, b_qkv);
    const Var q = ops::rope(tape, ops::split_heads(tape, qkv, batch, heads, 0, dh), rope_base);
    const Var k = ops::rope(tape, ops::split_heads(tape, qkv, batch, heads, d, dh), rope_base);
    const Var v = ops::split_heads(tape, qkv, batch, heads, 2 * d, dh);
    Tensor<T> weights;
    const Var z_heads = ops::attention(tape, q, k, v, att_scale, cfg.causal, p_drop,
                                       opt.dropout_rng, training && drop_inner,
                                       lt ? &weights : nullptr);
    Var z = ops::merge_heads(tape, z_heads, batch);
    Tensor<T> head_mask;
    for (std::size_t hd = 0; hd < heads; ++hd) {
      if (!abl.head_ablated(l, static_cast<int>(hd))) continue;
      if (head_mask.empty()) head_mask = Tensor<T>({rows, d}, T(1));
      for (std::size_t r = 0; r < rows; ++r) std::fill_n(head_mask.ptr() + r * d + hd * dh, dh, T(0));
    }
    if (!head_mask.empty()) z = ops::mul(tape, z, tape.constant(std::move(head_mask)));
    const Var w_o = ops::concat_rows<T>(tape, o_parts);
    Var attn = ops::linear(tape, z, w_o, cfg.biases ? p[key("attn.bo")] : Var{});
    if (lt) {
      // split the captured weights and per-head contributions back out
      for (std::size_t hd = 0; hd < heads; ++hd) {
        Tensor<T> a({batch, seq, seq});
        for (std::size_t b = 0; b < batch; ++b)
          std::copy_n(weights.ptr() + (b * heads + hd) * seq * seq, seq * seq, a.ptr() + b * seq * seq);
        lt->attention.push_back(std::move(a));
        Tensor<T> zh({rows, dh});
        const auto& zv = tape.value(z);
        for (std::size_t r = 0; r < rows; ++r) std::copy_n(zv.ptr() + r * d + hd * dh, dh, zh.ptr() + r * dh);
        Tensor<T> out({rows, d});
        kernels::parallel::gemm<T>(kernels::Trans::No, kernels::Trans::No, {rows, d, dh}, T(1),
                                   zh.ptr(), dh, tape.value(o_parts[hd]).ptr(), d, T(0), out.ptr(), d);
        lt->head_out.push_back(std::move(out));
      }
    }
    if (drop_resid) attn = ops::dropout(tape, attn, p_drop, opt.dropout_rng, training);
    if (lt) lt->attn_out = tape.value(attn);

    Var bypass = x;
    if (abl.skip_ablated(l)) {
      Tensor<T> mask({rows, d}, T(1));
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t s = 0; s < seq; ++s)
          if (cfg.is_digit_position(static_cast<int>(s)))
            std::fill_n(mask.ptr() + (b * seq + s) * d, d, T(0));
      bypass = ops::mul(tape, x, tape.constant(std::move(mask)));
    }
    x = ops::add(tape, bypass, attn);
    if (lt) lt->resid_mid = tape.value(x);

    Var h2 = ops::layernorm(tape, x, p[key("ln2.scale")], p[key("ln2.shift")], eps);
    Var pre = ops::linear(tape, h2, p[key("mlp.w_in")], cfg.biases ? p[key("mlp.b_in")] : Var{});
    Var post = ops::relu(tape, pre);
    if (drop_inner) post = ops::dropout(tape, post, p_drop, opt.dropout_rng, training);
    if (const auto dead = abl.ablated_neurons(l); !dead.empty()) {
      const auto ff = static_cast<std::size_t>(cfg.d_ff);
      Tensor<T> mask({rows, ff}, T(1));
      for (std::size_t r = 0; r < rows; ++r)
        for (int n : dead) mask[r * ff + static_cast<std::size_t>(n)] = T(0);
      post = ops::mul(tape, post, tape.constant(std::move(mask)));
    }
    if (lt) {
      lt->mlp_pre = tape.value(pre);
      lt->mlp_post = tape.value(post);
    }
    Var mlp_out =
        ops::linear(tape, post, p[key("mlp.w_out")], cfg.biases ? p[key("mlp.b_out")] : Var{});
    if (drop_resid) mlp_out = ops::dropout(tape, mlp_out, p_drop, opt.dropout_rng, training);
    if (abl.mlp_ablated(l)) {
      if (lt) lt->mlp_out = Tensor<T>({rows, d});
    } else {
      if (lt) lt->mlp_out = tape.value(mlp_out);
      x = ops::add(tape, x, mlp_out);
    }
    if (lt) lt->resid_post = tape.value(x);
  }
  if (cap) cap->final_resid = tape.value(x);
  Var hf = ops::layernorm(tape, x, p["final_ln.scale"], p["final_ln.shift"], eps);
  Var logits = ops::linear(tape, hf, p["unembed"], cfg.biases ? p["unembed_bias"] : Var{});
  return logits;
}

template <typename T>
Tensor<T> forward(const ParameterSet<T>& params, const ModelConfig& cfg,
                  std::span<const int> tokens, std::size_t batch, const ForwardOptions<T>& opt) {
  Tape<T> tape(false);
  auto bound = bind(tape, params, false);
  return tape.value(forward_on_tape(tape, bound, cfg, tokens, batch, opt));
}

namespace {

template <typename Range>
Batch make_batch_impl(const ModelConfig& cfg, const Range& examples) {
  const auto seq = static_cast<std::size_t>(cfg.seq_len());
  Batch b;
  b.size = examples.size();
  b.tokens.reserve(b.size * seq);
  b.targets.reserve(b.size * seq);
  for (const auto& item : examples) {
    const data::AdditionExample& ex = [&]() -> const data::AdditionExample& {
      if constexpr (std::is_pointer_v<std::decay_t<decltype(item)>>)
        return *item;
      else
        return item;
    }();
    if (ex.width > cfg.width)
      throw ConfigError("example of width " + std::to_string(ex.width) +
                        " does not fit the model layout width " + std::to_string(cfg.width));
    if (!cfg.causal) {
      const auto seqt = data::tokenize(ex, cfg.width);
      b.tokens.insert(b.tokens.end(), seqt.tokens.begin(), seqt.tokens.end());
      const auto ans = data::digits_of(ex.a + ex.b, cfg.width);
      for (std::size_t s = 0; s < seq; ++s) {
        const int pos = static_cast<int>(s);
        b.targets.push_back(pos > 2 * cfg.width ? ans[s - static_cast<std::size_t>(2 * cfg.width + 1)]
                                                : -1);
      }
    } else {
      const auto full = data::tokenize_generative(ex, cfg.width);
      b.tokens.insert(b.tokens.end(), full.tokens.begin(), full.tokens.end() - 1);
      b.targets.insert(b.targets.end(), full.tokens.begin() + 1, full.tokens.end());
    }
  }
  return b;
}

}  // namespace

Batch make_batch(const ModelConfig& cfg, std::span<const data::AdditionExample> examples) {
  return make_batch_impl(cfg, examples);
}

Batch make_batch(const ModelConfig& cfg, std::span<const data::AdditionExample* const> examples) {
  return make_batch_impl(cfg, examples);
}

template <typename T>
Var loss_on_tape(Tape<T>& tape, const BoundParams& p, const ModelConfig& cfg, const Batch& batch,
                 const ForwardOptions<T>& opt) {
  Var logits = forward_on_tape(tape, p, cfg, batch.tokens, batch.size, opt);
  return ops::cross_entropy(tape, logits, batch.targets);
}

template <typename T>
T loss(const ParameterSet<T>& params, const ModelConfig& cfg, const Batch& batch,
       const ForwardOptions<T>& opt) {
  Tape<T> tape(false);
  auto bound = bind(tape, params, false);
  return tape.value(loss_on_tape(tape, bound, cfg, batch, opt))[0];
}

namespace {

template <typename T>
std::uint8_t argmax_digit(const T* row) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < 10; ++c)
    if (row[c] > row[best]) best = c;
  return static_cast<std::uint8_t>(best);
}

}  // namespace

template <typename T>
std::vector<std::uint8_t> predict(const ParameterSet<T>& params, const ModelConfig& cfg,
                                  const Batch& batch, const AblationSpec* ablation) {
  const auto seq = static_cast<std::size_t>(cfg.seq_len());
  const auto w = static_cast<std::size_t>(cfg.width);
  const auto vocab = static_cast<std::size_t>(cfg.vocab);
  std::vector<std::uint8_t> out(batch.size * w);
  ForwardOptions<T> opt;
  opt.ablation = ablation;
  if (!cfg.causal) {
    const auto logits = forward(params, cfg, batch.tokens, batch.size, opt);
    for (std::size_t b = 0; b < batch.size; ++b)
      for (std::size_t i = 0; i < w; ++i) {
        const auto pos = static_cast<std::size_t>(cfg.output_position(static_cast<int>(i)));
        out[b * w + i] = argmax_digit(logits.ptr() + (b * seq + pos) * vocab);
      }
    return out;
  }
  std::vector<int> tokens = batch.tokens;
  // blank the answer so nothing leaks from the teacher-forced layout
  for (std::size_t b = 0; b < batch.size; ++b)
    for (std::size_t s = 2 * w + 2; s < seq; ++s) tokens[b * seq + s] = 0;
  for (std::size_t i = 0; i < w; ++i) {
    const auto logits = forward(params, cfg, tokens, batch.size, opt);
    const auto pos = static_cast<std::size_t>(cfg.output_position(static_cast<int>(i)));
    for (std::size_t b = 0; b < batch.size; ++b) {
      const auto digit = argmax_digit(logits.ptr() + (b * seq + pos) * vocab);
      out[b * w + i] = digit;
      if (pos + 1 < seq) tokens[b * seq + pos + 1] = digit;
    }
  }
  return out;
}

#define CARRY_MODEL(T)                                                                     \
  template class ParameterSet<T>;                                                          \
  template ParameterSet<T> init_params<T>(const ModelConfig&, std::uint64_t);              \
  template BoundParams bind<T>(Tape<T>&, const ParameterSet<T>&, bool);                    \
  template Var forward_on_tape<T>(Tape<T>&, const BoundParams&, const ModelConfig&,        \
                                  std::span<const int>, std::size_t,                       \
                                  const ForwardOptions<T>&);                               \
  template Tensor<T> forward<T>(const ParameterSet<T>&, const ModelConfig&,                \
                                std::span<const int>, std::size_t,                         \
                                const ForwardOptions<T>&);                                 \
  template Var loss_on_tape<T>(Tape<T>&, const BoundParams&, const ModelConfig&,           \
                               const Batch&, const ForwardOptions<T>&);                    \
  template T loss<T>(const ParameterSet<T>&, const ModelConfig&, const Batch&,             \
                     const ForwardOptions<T>&);                                            \
  template std::vector<std::uint8_t> predict<T>(const ParameterSet<T>&, const ModelConfig&, \
                                                const Batch&, const AblationSpec*);

CARRY_MODEL(float)
CARRY_MODEL(double)
#undef CARRY_MODEL

}  // namespace carry::model
