#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <regex>

#include "carry/interp.hpp"

namespace carry::interp {
namespace {

model::ModelConfig tiny_cfg() {
  model::ModelConfig cfg;
  cfg.d_model = 16;
  cfg.d_ff = 24;
  cfg.dropout = 0;
  return cfg;
}

Params tiny_params(const model::ModelConfig& cfg, std::uint64_t seed = 1) {
  auto p = model::init_params<float>(cfg, seed);
  RngStream r(seed, "perturb");
  for (std::size_t i = 0; i < p.size(); ++i)
    for (auto& v : p.at(i).data()) v += static_cast<float>(r.uniform(-0.3, 0.3));
  return p;
}

Tensor<double> uniform_attention(int seq) {
  return Tensor<double>({static_cast<std::size_t>(seq), static_cast<std::size_t>(seq)}, 1.0 / seq);
}

TEST(Staircase, UniformAttention) {
  for (bool final_layer : {false, true}) EXPECT_NEAR(staircase_score(uniform_attention(10), 3, final_layer), 0.1, 1e-12);
  EXPECT_NEAR(staircase_score(uniform_attention(13), 4, true), 1.0 / 13, 1e-12);
}

TEST(Staircase, OneHotPartnerAttention) {
  const std::size_t w = 3, seq = 10;
  Tensor<double> a({seq, seq}, 0.0);
  for (std::size_t r = 0; r < seq; ++r) a.at(r, r) = 1.0;
  for (std::size_t i = 0; i < w; ++i) {
    a.at(i, i) = 0;
    a.at(i, i + w + 1) = 1;
    a.at(i + w + 1, i + w + 1) = 0;
    a.at(i + w + 1, i) = 1;
    a.at(2 * w + 1 + i, 2 * w + 1 + i) = 0;
    a.at(2 * w + 1 + i, i) = 1;
  }
  EXPECT_NEAR(staircase_score(a, 3, false), 1.0, 1e-12);
  EXPECT_NEAR(staircase_score(a, 3, true), 1.0, 1e-12);
}

TEST(Transition, ConstantSeriesHasNone) {
  std::vector<int> e(400);
  std::iota(e.begin(), e.end(), 0);
  const std::vector<double> s(400, 0.3);
  EXPECT_FALSE(detect_transition(e, s).has_value());
}

TEST(Transition, StepIsFoundAtItsEpoch) {
  std::vector<int> e(400);
  std::iota(e.begin(), e.end(), 0);
  std::vector<double> s(400, 0.1);
  for (std::size_t i = 200; i < 400; ++i) s[i] = 0.9;
  EXPECT_EQ(detect_transition(e, s), 200);
  // a jump below the threshold is ignored
  for (std::size_t i = 200; i < 400; ++i) s[i] = 0.25;
  EXPECT_FALSE(detect_transition(e, s).has_value());
}

TEST(LossCurves, DropKinkAndOnset) {
  std::vector<int> e(300);
  std::iota(e.begin(), e.end(), 0);
  std::vector<double> loss(300, 1.0);
  for (std::size_t i = 100; i < 300; ++i) loss[i] = 0.5;
  EXPECT_EQ(loss_drop(e, loss), 100);
  EXPECT_FALSE(loss_drop(e, loss, 0.3, 20, 150).has_value());
  EXPECT_FALSE(loss_drop(e, std::vector<double>(300, 1.0)).has_value());

  // log loss falling linearly until epoch 100, flat afterwards
  std::vector<double> kinked(300);
  for (std::size_t i = 0; i < 300; ++i) kinked[i] = std::exp(-0.05 * static_cast<double>(std::min<std::size_t>(i, 100)));
  const auto k = loss_kink(e, kinked);
  ASSERT_TRUE(k.has_value());
  EXPECT_NEAR(*k, 100, 3);

  std::vector<double> rise(300, 0.0);
  for (std::size_t i = 50; i < 300; ++i) rise[i] = std::min(1.0, static_cast<double>(i - 50) / 100.0);
  const auto o = rise_onset(e, rise);
  ASSERT_TRUE(o.has_value());
  EXPECT_NEAR(*o, 60, 3);
  EXPECT_FALSE(rise_onset(e, std::vector<double>(300, 0.5)).has_value());
}

TEST(Pca, AxisAlignedData) {
  std::vector<std::vector<double>> x;
  RngStream r(1, "pca");
  for (int i = 0; i < 500; ++i) x.push_back({5 * r.uniform(-1, 1) + 2, 0.5 * r.uniform(-1, 1) - 1, 0.0});
  const auto f = pca(x, 2);
  ASSERT_EQ(f.components.size(), 2u);
  EXPECT_NEAR(f.components[0][0], 1.0, 1e-3);
  EXPECT_NEAR(std::abs(f.components[1][1]), 1.0, 1e-3);
  EXPECT_GT(f.components[1][1], 0.0);  // sign convention
  EXPECT_GE(f.explained[0], f.explained[1]);
  EXPECT_NEAR(f.explained[0] + f.explained[1], 1.0, 1e-9);
  EXPECT_NEAR(f.mean[0], 2.0, 0.3);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      const double dot = std::inner_product(f.components[i].begin(), f.components[i].end(), f.components[j].begin(), 0.0);
      EXPECT_NEAR(dot, i == j ? 1.0 : 0.0, 1e-9);
    }
}

TEST(Pca, FullRankReconstructionIsExact) {
  std::vector<std::vector<double>> x;
  RngStream r(2, "pca");
  for (int i = 0; i < 40; ++i) x.push_back({r.uniform(), r.uniform(), r.uniform(), r.uniform()});
  const auto back = pca_reconstruct(pca(x, 4));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(back[i][j], x[i][j], 1e-10);
  EXPECT_THROW(pca(x, 5), InterpError);
}

TEST(Svd, RankOneMatrix) {
  const std::vector<double> u{1, 2, 3}, v{2, 0, -1, 1};
  std::vector<std::vector<double>> x(3, std::vector<double>(4));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) x[i][j] = u[i] * v[j];
  const auto f = svd(x, 2);
  EXPECT_NEAR(f.singular[0], std::sqrt(14.0) * std::sqrt(6.0), 1e-10);
  EXPECT_NEAR(f.singular[1], 0.0, 1e-10);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(std::abs(f.right[0][j]), std::abs(v[j]) / std::sqrt(6.0), 1e-10);
}

TEST(Squashing, SpreadRatio) {
  const std::vector<std::vector<double>> same(4, std::vector<double>{1, 2, 3});
  const std::vector<std::vector<double>> varied{{1, 0, 0}, {0, 1, 0}, {1, 1, 0}, {1, 0, 1}};
  EXPECT_FALSE(spread_ratio(same, varied).has_value());
  EXPECT_EQ(spread_ratio(varied, same), 0.0);
  EXPECT_NEAR(*spread_ratio(varied, varied), 1.0, 1e-12);
}

TEST(Correlation, PearsonAndPointBiserial) {
  const std::vector<double> x{1, 2, 3, 4, 5};
  EXPECT_NEAR(*pearson(x, x), 1.0, 1e-12);
  const std::vector<double> neg{5, 4, 3, 2, 1};
  EXPECT_NEAR(*pearson(x, neg), -1.0, 1e-12);
  EXPECT_FALSE(pearson(x, std::vector<double>(5, 2.0)).has_value());
  const bool m[] = {false, false, true, true, true};
  const std::vector<double> mi{0, 0, 1, 1, 1};
  EXPECT_NEAR(*point_biserial(x, m), *pearson(x, mi), 1e-12);
}

TEST(Svm, SeparablePoints) {
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  RngStream r(4, "svm");
  for (int i = 0; i < 200; ++i) {
    const double a = r.uniform(-1, 1), b = r.uniform(-1, 1);
    if (std::abs(a + 0.5 * b) < 0.1) continue;
    x.push_back({a, b});
    y.push_back(a + 0.5 * b > 0 ? 1 : -1);
  }
  const auto c = fit_linear_svm(x, y, 3);
  EXPECT_GE(c.accuracy(x, y), 0.98);
}

TEST(Digits, LayoutIndexing) {
  const auto ex = data::make_example(150, 160, 3);  // 310, tens carry into hundreds
  EXPECT_EQ(answer_digit_at(ex, 3, 0), 3);
  EXPECT_TRUE(carry_at(ex, 3, 0));
  EXPECT_FALSE(carry_at(ex, 3, 1));
  EXPECT_EQ(naive_sum_digit_at(ex, 3, 0), 2);
  EXPECT_EQ(answer_digit_at(ex, 4, 0), 0);
  EXPECT_FALSE(carry_at(ex, 4, 0));
  EXPECT_EQ(answer_digit_at(ex, 4, 1), 3);
}

TEST(PccReference, NoCarryExpectations) {
  const model::ModelConfig cfg;
  std::vector<data::AdditionExample> ex;
  for (const auto& e : data::gen_dataset(3))
    if (e.task.name() == "C@1" && ex.size() < 50) ex.push_back(e);
  std::vector<std::uint8_t> pred;
  for (const auto& e : ex) pred.insert(pred.end(), e.answer_digits.begin(), e.answer_digits.end());
  const auto t = training::score_predictions(cfg, ex, pred);
  std::vector<std::string> cells;
  const auto ref = no_carry_reference(t, ex, 3, &cells);
  ASSERT_EQ(ref.size(), 6u);
  ASSERT_EQ(cells.size(), 6u);
  EXPECT_EQ(cells[0], "C@1:0:plain");
  EXPECT_EQ(cells[1], "C@1:0:corrected");
  EXPECT_EQ(ref, (std::vector<double>{0, 1, 1, 0, 1, 0}));
  EXPECT_EQ(pcc_observed(t).size(), ref.size());
}

TEST(Checkerboard, StatisticOnBlocks) {
  Tensor<double> sim({4, 4}, 0.0);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) sim.at(i, j) = (i < 2) == (j < 2) ? 1.0 : 0.2;
  const std::vector<std::string> labels{"a", "a", "b", "b"};
  EXPECT_NEAR(checkerboard_statistic(sim, labels), 0.8, 1e-12);
}

TEST(Checkerboard, IdenticalExamplesAreFullySimilar) {
  const auto cfg = tiny_cfg();
  const auto p = tiny_params(cfg);
  const std::vector<data::AdditionExample> ex(5, data::make_example(145, 156, 3));
  const auto cb = cosine_checkerboard(p, cfg, ex, nullptr);
  ASSERT_EQ(cb.similarity.rows(), 5u);
  for (double v : cb.similarity.data()) EXPECT_NEAR(v, 1.0, 1e-5);
}

TEST(Attention, SingleExampleSummaryEqualsRawAttention) {
  const auto cfg = tiny_cfg();
  const auto p = tiny_params(cfg);
  const std::vector<data::AdditionExample> ex{data::make_example(145, 156, 3)};
  const auto s = attention_summary(p, cfg, ex, GroupBy::Task);
  ASSERT_EQ(s.groups.size(), 1u);
  EXPECT_EQ(s.groups[0].name, "C all con.");
  model::ActivationTrace<float> tr;
  model::ForwardOptions<float> fo;
  fo.capture = &tr;
  const auto b = model::make_batch(cfg, std::span<const data::AdditionExample>(ex));
  model::forward(p, cfg, std::span<const int>(b.tokens), 1, fo);
  for (int l = 0; l < 2; ++l)
    for (int h = 0; h < 2; ++h) {
      const auto& m = s.at("C all con.", l, h);
      const auto& raw = tr.layers[static_cast<std::size_t>(l)].attention[static_cast<std::size_t>(h)];
      for (std::size_t i = 0; i < m.size(); ++i) EXPECT_NEAR(m[i], raw[i], 1e-6);
      for (double v : s.groups[0].variance[static_cast<std::size_t>(l * 2 + h)].data()) EXPECT_NEAR(v, 0.0, 1e-12);
    }
}

TEST(Attention, GroupsCoverAllExamples) {
  const auto cfg = tiny_cfg();
  const auto p = tiny_params(cfg);
  const auto ex = data::sample_examples(3, 300, 2);
  const auto s = attention_summary(p, cfg, ex, GroupBy::Task);
  std::size_t n = 0;
  for (const auto& g : s.groups) n += g.count;
  EXPECT_EQ(n, 300u);
  const auto pooled = s.pooled(0, 0);
  for (std::size_t r = 0; r < pooled.rows(); ++r) {
    double sum = 0;
    for (std::size_t c = 0; c < pooled.cols(); ++c) sum += pooled.at(r, c);
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
  EXPECT_EQ(staircase_scores(s).size(), 4u);
  std::size_t seen = 0;
  for_each_trace(p, cfg, ex, nullptr, 64, [&](std::size_t first, const model::ActivationTrace<float>& t) {
    EXPECT_EQ(first, seen);
    seen += t.batch;
  });
  EXPECT_EQ(seen, 300u);
}

TEST(DecisionHead, CandidatesCoverEveryHead) {
  const auto cfg = tiny_cfg();
  const auto p = tiny_params(cfg);
  const auto ex = data::sample_examples(3, 200, 3);
  const auto d = identify_decision_head(p, cfg, ex);
  // the search runs over the final layer
  ASSERT_EQ(d.candidates.size(), 2u);
  EXPECT_EQ(d.layer, 1);
  double best = -1;
  for (const auto& c : d.candidates) {
    EXPECT_EQ(c.layer, 1);
    EXPECT_NEAR(c.degradation, d.baseline_exact - c.exact_match, 1e-12);
    best = std::max(best, c.degradation);
  }
  bool found = false;
  for (const auto& c : d.candidates)
    if (c.layer == d.layer && c.head == d.head) {
      found = true;
      EXPECT_EQ(c.degradation, best);
    }
  EXPECT_TRUE(found);
}

TEST(Neurons, SelectionIsReproducibleFromStatistics) {
  const auto cfg = tiny_cfg();
  const auto p = tiny_params(cfg);
  const auto ex = data::sample_examples(3, 400, 4);
  const auto sel = select_carry_neurons(p, cfg, ex);
  EXPECT_EQ(sel.layer, 1);
  EXPECT_EQ(sel.tasks.front(), "NC");
  EXPECT_EQ(selection_from_statistics(sel), sel.indices);
  EXPECT_TRUE(std::is_sorted(sel.indices.begin(), sel.indices.end()));
  for (int i : sel.indices) {
    EXPECT_GE(i, 0);
    EXPECT_LT(i, 24);
  }
  const auto sv = svd_dissection(p, cfg, ex, 5);
  EXPECT_EQ(sv.neuron.size(), 24u);
  EXPECT_EQ(sv.top.size(), 5u);
  for (std::size_t i = 1; i < sv.singular_values.size(); ++i) EXPECT_LE(sv.singular_values[i], sv.singular_values[i - 1]);
}

TEST(Pca, ResidualPcaLabels) {
  const auto cfg = tiny_cfg();
  const auto p = tiny_params(cfg);
  const auto ex = data::sample_examples(3, 200, 6);
  const auto r = residual_pca(p, cfg, ex, 1, Block::Attention, 7, 2);
  ASSERT_EQ(r.projected.size(), 200u);
  ASSERT_EQ(r.task.size(), 200u);
  for (std::size_t i = 0; i < ex.size(); ++i) {
    EXPECT_EQ(r.answer_digit[i], ex[i].answer_digits[0]);
    EXPECT_EQ(r.carry_needed[i], static_cast<bool>(ex[i].carry_flags[0]));
  }
  EXPECT_THROW(residual_pca(p, cfg, ex, 2, Block::Attention, 7, 2), std::exception);
}

TEST(Svg, OutputsAreWellFormed) {
  EXPECT_TRUE(std::regex_match(magma_hex(0.0), std::regex("#[0-9a-f]{6}")));
  EXPECT_NE(magma_hex(0.0), magma_hex(1.0));
  const std::vector<HeatmapPanel> panels{{"a", Tensor<double>({2, 3}, 0.5)}, {"b", Tensor<double>({2, 3}, 1.0)}};
  const auto svg = heatmap_svg(panels, 2, 0.0, 1.0);
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
  std::size_t rects = 0;
  for (std::size_t at = svg.find("<rect"); at != std::string::npos; at = svg.find("<rect", at + 1)) ++rects;
  EXPECT_GE(rects, 12u);
  const std::vector<std::string> labels{"x", "y"};
  const auto sc = scatter_svg({{0, 0}, {1, 1}}, labels, "t");
  EXPECT_NE(sc.find("</svg>"), std::string::npos);
}

}  // namespace
}  // namespace carry::interp
