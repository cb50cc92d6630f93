#include <gtest/gtest.h>

#include <cmath>

#include "carry/model.hpp"

namespace carry::model {
namespace {

struct Case {
  int layers;
  bool causal;
  bool dropout;
  double h;
};

// Central differences on every coordinate of a small model, 64-bit.
void check_model(const Case& c) {
  ModelConfig cfg;
  cfg.n_layers = c.layers;
  cfg.d_model = 8;
  cfg.d_ff = 12;
  cfg.n_heads = 2;
  cfg.causal = c.causal;
  cfg.dropout = c.dropout ? 0.2 : 0.0;
  auto params = init_params<double>(cfg, 7);
  RngStream perturb(3, "perturb");
  for (std::size_t i = 0; i < params.size(); ++i)
    for (auto& v : params.at(i).data()) v += perturb.uniform(-0.3, 0.3);
  const auto ex = data::sample_examples(3, 4, 11);
  const Batch batch = make_batch(cfg, std::span<const data::AdditionExample>(ex));

  const auto eval_loss = [&](const ParameterSet<double>& p) {
    RngStream rng(5, "dropout");
    ForwardOptions<double> fo;
    fo.mode = c.dropout ? Mode::Train : Mode::Eval;
    fo.dropout_rng = &rng;
    return loss(p, cfg, batch, fo);
  };

  Tape<double> tape;
  const auto bound = bind(tape, params, true);
  RngStream rng(5, "dropout");
  ForwardOptions<double> fo;
  fo.mode = c.dropout ? Mode::Train : Mode::Eval;
  fo.dropout_rng = &rng;
  const Var l = loss_on_tape(tape, bound, cfg, batch, fo);
  tape.backward(l);

  const double h = c.h;
  double worst = 0;
  std::string worst_name;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto g = tape.grad(bound[params.name(i)]);
    for (std::size_t j = 0; j < params.at(i).size(); ++j) {
      auto p = params;
      p.at(i)[j] += h;
      const double up = eval_loss(p);
      p.at(i)[j] -= 2 * h;
      const double down = eval_loss(p);
      const double num = (up - down) / (2 * h);
      const double err = std::abs(num - g[j]) / std::max(1.0, std::abs(num) + std::abs(g[j]));
      if (err > worst) {
        worst = err;
        worst_name = params.name(i) + "[" + std::to_string(j) + "]";
      }
    }
  }
  EXPECT_LE(worst, 1e-4) << "worst coordinate " << worst_name;
}

TEST(ModelGradcheck, OneLayerEncoder) { check_model({1, false, false, 1e-3}); }
TEST(ModelGradcheck, OneLayerDecoder) { check_model({1, true, false, 1e-3}); }
TEST(ModelGradcheck, OneLayerDropout) { check_model({1, false, true, 1e-3}); }
// Deeper stacks put some ReLU pre-activations within 1e-3 of zero; a smaller
// step keeps the kink out of the stencil.
TEST(ModelGradcheck, TwoLayerEncoder) { check_model({2, false, false, 1e-5}); }
TEST(ModelGradcheck, TwoLayerEncoderWithDropout) { check_model({2, false, true, 1e-5}); }
TEST(ModelGradcheck, TwoLayerDecoder) { check_model({2, true, false, 1e-5}); }

}  // namespace
}  // namespace carry::model
