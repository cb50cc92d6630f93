#include <gtest/gtest.h>

#include <cmath>

#include "carry/model.hpp"

namespace carry::model {
namespace {

ModelConfig small(int layers = 2, bool causal = false) {
  ModelConfig cfg;
  cfg.n_layers = layers;
  cfg.d_model = 16;
  cfg.d_ff = 24;
  cfg.n_heads = 2;
  cfg.causal = causal;
  return cfg;
}

// Random weights of a visible scale so ablations change the output.
ParameterSet<double> params_for(const ModelConfig& cfg, std::uint64_t seed = 1) {
  auto p = init_params<double>(cfg, seed);
  RngStream r(seed, "perturb");
  for (std::size_t i = 0; i < p.size(); ++i)
    for (auto& v : p.at(i).data()) v += r.uniform(-0.3, 0.3);
  return p;
}

Batch batch_for(const ModelConfig& cfg, std::size_t n = 16, std::uint64_t seed = 5) {
  const auto ex = data::sample_examples(3, n, seed);
  return make_batch(cfg, std::span<const data::AdditionExample>(ex));
}

Tensor<double> logits(const ParameterSet<double>& p, const ModelConfig& cfg, const Batch& b,
                      const AblationSpec* abl = nullptr, ActivationTrace<double>* trace = nullptr) {
  ForwardOptions<double> fo;
  fo.ablation = abl;
  fo.capture = trace;
  return forward(p, cfg, std::span<const int>(b.tokens), b.size, fo);
}

void expect_close(const Tensor<double>& a, const Tensor<double>& b, double tol = 1e-12) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a[i], b[i], tol) << "at " << i;
}

double max_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

TEST(Params, LayoutAndCount) {
  const ModelConfig cfg;  // D=128, two heads, d_ff=128, two layers
  const auto layout = parameter_layout(cfg);
  const auto p = init_params<float>(cfg, 0);
  ASSERT_EQ(layout.size(), p.size());
  std::size_t total = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    EXPECT_EQ(p.name(i), layout[i].first);
    EXPECT_EQ(p.at(i).shape(), layout[i].second);
    total += p.at(i).size();
  }
  const std::size_t d = 128, f = 128, v = 12;
  const std::size_t per_layer = 2 * d + 4 * d * d + 3 * d + d + 2 * d + d * f + f + f * d + d;
  EXPECT_EQ(total, v * d + 2 * per_layer + 2 * d + d * v + v);
  EXPECT_TRUE(p.contains("layers.1.attn.q.0"));
  EXPECT_TRUE(p.contains("layers.0.attn.o.1"));
  EXPECT_TRUE(is_bias_param("layers.0.mlp.b_in"));
  EXPECT_TRUE(is_bias_param("unembed_bias"));
  EXPECT_FALSE(is_bias_param("layers.0.ln1.scale"));
  EXPECT_FALSE(is_bias_param("embed"));
}

TEST(Params, InitIsSeeded) {
  const auto cfg = small();
  EXPECT_EQ(init_params<double>(cfg, 3), init_params<double>(cfg, 3));
  EXPECT_NE(init_params<double>(cfg, 3), init_params<double>(cfg, 4));
  const auto p = init_params<double>(cfg, 3);
  for (double g : p.get("layers.0.ln1.scale").data()) EXPECT_EQ(g, 1.0);
  for (double b : p.get("layers.0.mlp.b_in").data()) EXPECT_EQ(b, 0.0);
}

TEST(Config, Validation) {
  auto cfg = small();
  cfg.n_heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small();
  cfg.n_layers = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small();
  cfg.dropout = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_NO_THROW(small().validate());
  EXPECT_EQ(small().seq_len(), 10);
  EXPECT_EQ(small(2, true).seq_len(), 11);
  EXPECT_EQ(small().output_position(0), 7);
}

TEST(Ablation, Validation) {
  const auto cfg = small();
  EXPECT_THROW(AblationSpec::head(2, 0).validate(cfg), ConfigError);
  EXPECT_THROW(AblationSpec::head(0, 2).validate(cfg), ConfigError);
  EXPECT_THROW(AblationSpec::neurons(1, {24}).validate(cfg), ConfigError);
  EXPECT_NO_THROW(AblationSpec::head(1, 1).with(AblationSpec::mlp(0)).validate(cfg));
}

TEST(Forward, ShapeAndPrecisionAgreement) {
  const auto cfg = small();
  const auto p = params_for(cfg);
  const auto b = batch_for(cfg);
  const auto y = logits(p, cfg, b);
  EXPECT_EQ(y.size(), b.size * 10 * 12);
  ForwardOptions<float> fo;
  const auto yf = forward(p.cast<float>(), cfg, std::span<const int>(b.tokens), b.size, fo);
  for (std::size_t i = 0; i < y.size(); ++i) ASSERT_NEAR(yf[i], y[i], 1e-4);
}

TEST(Ablation, EmptySpecIsBitIdentical) {
  const auto cfg = small();
  const auto p = params_for(cfg);
  const auto b = batch_for(cfg);
  const AblationSpec none;
  EXPECT_EQ(logits(p, cfg, b), logits(p, cfg, b, &none));
}

TEST(Ablation, HeadEqualsZeroedOutputProjection) {
  const auto cfg = small();
  const auto p = params_for(cfg);
  const auto b = batch_for(cfg);
  for (int l = 0; l < 2; ++l)
    for (int h = 0; h < 2; ++h) {
      auto q = p;
      q.get("layers." + std::to_string(l) + ".attn.o." + std::to_string(h)).fill(0);
      const auto spec = AblationSpec::head(l, h);
      const auto ablated = logits(p, cfg, b, &spec);
      expect_close(ablated, logits(q, cfg, b));
      EXPECT_GT(max_diff(ablated, logits(p, cfg, b)), 1e-6);
    }
}

TEST(Ablation, JointHeadsEqualManualZeroing) {
  const auto cfg = small();
  const auto p = params_for(cfg);
  const auto b = batch_for(cfg);
  auto spec = AblationSpec::head(1, 0);
  spec.with(AblationSpec::head(1, 1)).with(AblationSpec::head(0, 1));
  auto q = p;
  q.get("layers.1.attn.o.0").fill(0);
  q.get("layers.1.attn.o.1").fill(0);
  q.get("layers.0.attn.o.1").fill(0);
  expect_close(logits(p, cfg, b, &spec), logits(q, cfg, b));
}

TEST(Ablation, MlpEqualsZeroedOutputWeights) {
  const auto cfg = small();
  const auto p = params_for(cfg);
  const auto b = batch_for(cfg);
  auto q = p;
  q.get("layers.1.mlp.w_out").fill(0);
  q.get("layers.1.mlp.b_out").fill(0);
  const auto spec = AblationSpec::mlp(1);
  expect_close(logits(p, cfg, b, &spec), logits(q, cfg, b));
}

TEST(Ablation, NeuronsEqualZeroedInputColumns) {
  const auto cfg = small();
  const auto p = params_for(cfg);
  const auto b = batch_for(cfg);
  const std::vector<int> idx{0, 5, 23};
  auto q = p;
  auto& w = q.get("layers.1.mlp.w_in");
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (int n : idx) w.at(r, static_cast<std::size_t>(n)) = 0;
  for (int n : idx) q.get("layers.1.mlp.b_in")[static_cast<std::size_t>(n)] = 0;
  const auto spec = AblationSpec::neurons(1, idx);
  ActivationTrace<double> tr;
  expect_close(logits(p, cfg, b, &spec, &tr), logits(q, cfg, b));
  for (std::size_t r = 0; r < tr.layers[1].mlp_post.rows(); ++r)
    for (int n : idx) EXPECT_EQ(tr.layers[1].mlp_post.at(r, static_cast<std::size_t>(n)), 0.0);
}

TEST(Ablation, SkipRemovesResidualAtDigitPositions) {
  const auto cfg = small();
  const auto p = params_for(cfg);
  const auto b = batch_for(cfg, 4);
  const auto spec = AblationSpec::skip_attention(0);
  ActivationTrace<double> tr;
  logits(p, cfg, b, &spec, &tr);
  const auto& L = tr.layers[0];
  for (std::size_t r = 0; r < L.resid_mid.rows(); ++r) {
    const int pos = static_cast<int>(r % 10);
    for (std::size_t c = 0; c < 16; ++c) {
      const double want = L.attn_out.at(r, c) + (cfg.is_digit_position(pos) ? 0.0 : L.resid_pre.at(r, c));
      ASSERT_NEAR(L.resid_mid.at(r, c), want, 1e-12);
    }
  }
}

TEST(Trace, ResidualDecomposition) {
  const auto cfg = small();
  const auto p = params_for(cfg);
  const auto b = batch_for(cfg, 4);
  ActivationTrace<double> tr;
  logits(p, cfg, b, nullptr, &tr);
  ASSERT_EQ(tr.layers.size(), 2u);
  EXPECT_EQ(tr.batch, 4u);
  EXPECT_EQ(tr.seq, 10u);
  for (const auto& L : tr.layers) {
    for (std::size_t i = 0; i < L.resid_mid.size(); ++i) {
      ASSERT_NEAR(L.resid_mid[i], L.resid_pre[i] + L.attn_out[i], 1e-12);
      ASSERT_NEAR(L.resid_post[i], L.resid_mid[i] + L.mlp_out[i], 1e-12);
    }
    for (const auto& a : L.attention)
      for (std::size_t r = 0; r < a.rows(); ++r) {
        double s = 0;
        for (std::size_t c = 0; c < a.cols(); ++c) s += a.at(r, c);
        ASSERT_NEAR(s, 1.0, 1e-12);
      }
    for (std::size_t i = 0; i < L.mlp_post.size(); ++i)
      ASSERT_EQ(L.mlp_post[i], std::max(0.0, L.mlp_pre[i]));
  }
  // head contributions plus the output bias rebuild the attention block output
  const auto& L = tr.layers[1];
  const auto& bo = p.get("layers.1.attn.bo");
  for (std::size_t r = 0; r < L.attn_out.rows(); ++r)
    for (std::size_t c = 0; c < 16; ++c)
      ASSERT_NEAR(L.head_out[0].at(r, c) + L.head_out[1].at(r, c) + bo[c], L.attn_out.at(r, c), 1e-12);
}

TEST(Causal, LaterTokensDoNotAffectEarlierLogits) {
  const auto cfg = small(2, true);
  const auto p = params_for(cfg);
  auto b = batch_for(cfg, 3);
  const auto before = logits(p, cfg, b);
  for (std::size_t i = 0; i < b.size; ++i) b.tokens[i * 11 + 10] = (b.tokens[i * 11 + 10] + 3) % 10;
  const auto after = logits(p, cfg, b);
  for (std::size_t i = 0; i < b.size; ++i) {
    for (std::size_t s = 0; s < 10; ++s)
      for (std::size_t v = 0; v < 12; ++v)
        ASSERT_EQ(before[(i * 11 + s) * 12 + v], after[(i * 11 + s) * 12 + v]);
    double d = 0;
    for (std::size_t v = 0; v < 12; ++v) d += std::abs(before[(i * 11 + 10) * 12 + v] - after[(i * 11 + 10) * 12 + v]);
    EXPECT_GT(d, 0.0);
  }
}

TEST(Encoder, EveryPositionSeesEveryToken) {
  const auto cfg = small();
  const auto p = params_for(cfg);
  auto b = batch_for(cfg, 2);
  const auto before = logits(p, cfg, b);
  b.tokens[9] = (b.tokens[9] + 1) % 10;  // change the last token of the first example
  const auto after = logits(p, cfg, b);
  double d = 0;
  for (std::size_t v = 0; v < 12; ++v) d += std::abs(before[v] - after[v]);
  EXPECT_GT(d, 0.0);
}

TEST(Loss, UniformLogitsGiveLogVocab) {
  for (bool causal : {false, true}) {
    const auto cfg = small(2, causal);
    auto p = params_for(cfg);
    p.get("unembed").fill(0);
    p.get("unembed_bias").fill(0);
    EXPECT_NEAR(loss(p, cfg, batch_for(cfg)), std::log(12.0), 1e-12);
  }
}

TEST(Batch, TargetsOnlyAtOutputPositions) {
  const auto cfg = small();
  const auto ex = data::make_example(145, 156, 3);
  const auto b = make_batch(cfg, std::span<const data::AdditionExample>(&ex, 1));
  const std::vector<int> tokens{1, 4, 5, 10, 1, 5, 6, 11, 11, 11};
  EXPECT_EQ(b.tokens, tokens);
  const std::vector<int> targets{-1, -1, -1, -1, -1, -1, -1, 3, 0, 1};
  EXPECT_EQ(b.targets, targets);
  const auto dec = make_batch(small(2, true), std::span<const data::AdditionExample>(&ex, 1));
  EXPECT_EQ(dec.tokens.size(), 11u);
  EXPECT_EQ(dec.targets.back(), 11);
}

TEST(Predict, DigitsInRangeAndArgmax) {
  const auto cfg = small();
  const auto p = params_for(cfg);
  const auto b = batch_for(cfg, 32);
  const auto pred = predict(p, cfg, b);
  ASSERT_EQ(pred.size(), 32u * 3);
  const auto y = logits(p, cfg, b);
  for (std::size_t i = 0; i < 32; ++i)
    for (std::size_t k = 0; k < 3; ++k) {
      const std::size_t row = i * 10 + 7 + k;
      int best = 0;
      for (int v = 1; v < 10; ++v)
        if (y[row * 12 + static_cast<std::size_t>(v)] > y[row * 12 + static_cast<std::size_t>(best)]) best = v;
      EXPECT_LE(pred[i * 3 + k], 9);
      EXPECT_EQ(pred[i * 3 + k], best);
    }
}

TEST(Dropout, TrainModeIsStochasticEvalIsNot) {
  auto cfg = small();
  cfg.dropout = 0.3;
  const auto p = params_for(cfg);
  const auto b = batch_for(cfg, 4);
  RngStream r1(1, "d"), r2(2, "d");
  ForwardOptions<double> t1, t2;
  t1.mode = t2.mode = Mode::Train;
  t1.dropout_rng = &r1;
  t2.dropout_rng = &r2;
  const auto a = forward(p, cfg, std::span<const int>(b.tokens), b.size, t1);
  const auto c = forward(p, cfg, std::span<const int>(b.tokens), b.size, t2);
  EXPECT_GT(max_diff(a, c), 0.0);
  EXPECT_EQ(logits(p, cfg, b), logits(p, cfg, b));
}

}  // namespace
}  // namespace carry::model
