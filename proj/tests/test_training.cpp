#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "carry/training.hpp"

namespace carry::training {
namespace {

using data::AdditionExample;
using model::ParameterSet;

std::vector<AdditionExample> all_three_digit_of(const std::string& task, std::size_t limit) {
  std::vector<AdditionExample> out;
  for (const auto& ex : data::gen_dataset(3)) {
    if (ex.task.name() != task) continue;
    out.push_back(ex);
    if (out.size() == limit) break;
  }
  return out;
}

std::vector<std::uint8_t> perfect(std::span<const AdditionExample> ex) {
  std::vector<std::uint8_t> p;
  for (const auto& e : ex) p.insert(p.end(), e.answer_digits.begin(), e.answer_digits.end());
  return p;
}

// Digit sums with every carried one dropped.
std::vector<std::uint8_t> carry_free(std::span<const AdditionExample> ex) {
  std::vector<std::uint8_t> p;
  for (const auto& e : ex)
    for (std::size_t i = 0; i < e.answer_digits.size(); ++i)
      p.push_back(static_cast<std::uint8_t>((e.a_digits[i] + e.b_digits[i]) % 10));
  return p;
}

fs::path temp_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("carry_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

TEST(WeightNorm, HandValues) {
  ParameterSet<float> p;
  p.add("embed", Tensor<float>({2}, 0.0f));
  EXPECT_EQ(weight_norm(p), 0.0);
  p.get("embed") = Tensor<float>({2}, {3.0f, 4.0f});
  EXPECT_DOUBLE_EQ(weight_norm(p), 25.0);
  p.get("embed") = Tensor<float>({2}, {6.0f, 8.0f});
  EXPECT_DOUBLE_EQ(weight_norm(p), 100.0);
  // biases and layernorm shifts are excluded, layernorm gains are not
  p.add("layers.0.mlp.b_in", Tensor<float>({3}, 5.0f));
  p.add("layers.0.ln1.shift", Tensor<float>({3}, 5.0f));
  p.add("unembed_bias", Tensor<float>({3}, 5.0f));
  EXPECT_DOUBLE_EQ(weight_norm(p), 100.0);
  p.add("layers.0.ln1.scale", Tensor<float>({4}, 1.0f));
  EXPECT_DOUBLE_EQ(weight_norm(p), 104.0);
}

TEST(Score, PerfectPredictions) {
  const model::ModelConfig cfg;
  const auto ex = data::sample_examples(3, 3000, 1);
  const auto t = score_predictions(cfg, ex, perfect(ex));
  std::size_t total = 0;
  for (std::size_t g = 0; g < t.groups.size(); ++g) {
    total += t.counts[g];
    EXPECT_EQ(t.exact[g], 1.0);
    for (int p = 0; p < 3; ++p) {
      EXPECT_EQ(t.accuracy[g][static_cast<std::size_t>(p)], 1.0);
      EXPECT_EQ(t.corrected[g][static_cast<std::size_t>(p)], 0.0);
    }
  }
  EXPECT_EQ(total, ex.size());
  const std::vector<std::string> order{"NC", "C@1", "C@2", "C all", "C all con."};
  EXPECT_EQ(t.groups, order);
}

TEST(Score, CarryFreePredictionsOnSingleCarry) {
  const model::ModelConfig cfg;
  const auto ex = all_three_digit_of("C@1", 500);
  ASSERT_EQ(ex.size(), 500u);
  const auto t = score_predictions(cfg, ex, carry_free(ex));
  ASSERT_EQ(t.groups.size(), 1u);
  EXPECT_EQ(t.acc("C@1"), (std::vector<double>{0.0, 1.0, 1.0}));
  EXPECT_EQ(t.corr("C@1"), (std::vector<double>{1.0, 0.0, 0.0}));
  EXPECT_EQ(t.exact[0], 0.0);
}

TEST(Score, ShiftedPredictionsOnlyMatchWithDirectionAdd) {
  const model::ModelConfig cfg;
  const auto ex = all_three_digit_of("C@1", 200);
  auto pred = perfect(ex);
  // one lower at the hundreds digit: the corrected +1 shift recovers it
  for (std::size_t i = 0; i < ex.size(); ++i) pred[i * 3] = static_cast<std::uint8_t>((pred[i * 3] + 9) % 10);
  const auto t = score_predictions(cfg, ex, pred, CorrectionDirection::Add);
  EXPECT_EQ(t.acc("C@1")[0], 0.0);
  EXPECT_EQ(t.corr("C@1")[0], 1.0);
  const auto s = score_predictions(cfg, ex, pred, CorrectionDirection::Subtract);
  EXPECT_EQ(s.corr("C@1")[0], 0.0);
}

TEST(Score, RejectsWrongLength) {
  const model::ModelConfig cfg;
  const auto ex = data::sample_examples(3, 10, 1);
  std::vector<std::uint8_t> pred(29);
  EXPECT_ANY_THROW(score_predictions(cfg, ex, pred));
}

TEST(Metrics, CsvRowMatchesHeader) {
  MetricsRecord m;
  m.epoch = 3;
  m.position_accuracy = {0.5, 0.25, 1.0};
  const auto header = metrics_csv_header(3);
  const auto row = metrics_csv_row(m);
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), std::count(row.begin(), row.end(), ','));
  EXPECT_EQ(header.rfind("epoch,train_loss,test_loss", 0), 0u);
}

TEST(Config, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.split = 0;
  EXPECT_THROW(c.validate(), model::ConfigError);
  c = {};
  c.width = 4;
  EXPECT_THROW(c.validate(), model::ConfigError);
  c = {};
  c.prime_k = 10;
  c.prime_width = 3;
  EXPECT_THROW(c.validate(), model::ConfigError);
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.model.d_model = 16;
  c.model.d_ff = 16;
  c.model.width = 2;
  c.width = 2;
  c.batch = 128;
  c.epochs = 4;
  c.optim.lr = 3e-3;
  c.eval_subset = 0;
  c.seed = 7;
  c.checkpoint_every = 2;
  return c;
}

TEST(Train, ReproducibleAndWritesRunDirectory) {
  const auto cfg = tiny_config();
  const auto split = make_split(cfg);
  EXPECT_EQ(split.train.size() + split.test.size(), 5050u);
  const auto dir = temp_dir("train");
  const auto a = train(cfg, split, dir);
  const auto b = train(cfg, split, {});
  ASSERT_EQ(a.history.size(), 5u);  // epoch 0 is the untrained evaluation
  EXPECT_EQ(a.history.front().epoch, 0);
  EXPECT_TRUE(std::isnan(a.history[0].train_loss));
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    if (i > 0) EXPECT_EQ(a.history[i].train_loss, b.history[i].train_loss);
    EXPECT_EQ(a.history[i].test_loss, b.history[i].test_loss);
  }
  EXPECT_EQ(a.final_checkpoint.params, b.final_checkpoint.params);
  EXPECT_LT(a.history.back().test_loss, a.history.front().test_loss);
  EXPECT_EQ(a.stop_epoch, 4);
  EXPECT_TRUE(fs::exists(dir / "manifest.json"));
  EXPECT_TRUE(fs::exists(dir / "metrics.csv"));
  const auto cks = list_checkpoints(dir);
  ASSERT_GE(cks.size(), 2u);
  EXPECT_EQ(cks[0].first, 2);
  EXPECT_EQ(cks[1].first, 4);
  const auto loaded = load_checkpoint(cks[1].second);
  EXPECT_EQ(loaded.params, a.final_checkpoint.params);
  EXPECT_EQ(loaded.epoch, 4);

  auto other = cfg;
  other.seed = 8;
  const auto c = train(other, make_split(other), {});
  EXPECT_NE(c.final_checkpoint.params, a.final_checkpoint.params);
}

TEST(Train, EvaluateAgreesWithPredictions) {
  const auto cfg = tiny_config();
  const auto split = make_split(cfg);
  const auto r = train(cfg, split, {});
  const auto m = evaluate(r.final_checkpoint.params, cfg.model, split.test);
  const auto pred = predict_all(r.final_checkpoint.params, cfg.model, split.test);
  std::size_t exact = 0;
  for (std::size_t i = 0; i < split.test.size(); ++i) {
    bool ok = true;
    for (std::size_t k = 0; k < 2; ++k) ok = ok && pred[i * 2 + k] == split.test[i].answer_digits[k];
    exact += ok;
  }
  EXPECT_DOUBLE_EQ(m.exact_match, static_cast<double>(exact) / static_cast<double>(split.test.size()));
  EXPECT_EQ(m.evaluated, split.test.size());
  EXPECT_NEAR(m.test_loss, r.final_metrics.test_loss, 1e-5);
  EXPECT_NEAR(m.weight_norm, weight_norm(r.final_checkpoint.params), 1e-6 * m.weight_norm);
}

TEST(Corrected, PerfectModelHasZeroCorrectedAccuracy) {
  // a model that is perfect on its evaluation set has corrected accuracy 0
  const auto cfg = tiny_config();
  const auto split = make_split(cfg);
  const auto r = train(cfg, split, {});
  const auto pred = predict_all(r.final_checkpoint.params, cfg.model, split.test);
  std::vector<AdditionExample> right;
  for (std::size_t i = 0; i < split.test.size(); ++i)
    if (pred[i * 2] == split.test[i].answer_digits[0] && pred[i * 2 + 1] == split.test[i].answer_digits[1])
      right.push_back(split.test[i]);
  ASSERT_FALSE(right.empty());
  const auto t = corrected_accuracy(r.final_checkpoint.params, cfg.model, right, nullptr);
  for (std::size_t g = 0; g < t.groups.size(); ++g)
    for (double c : t.corrected[g]) EXPECT_EQ(c, 0.0);
}

Checkpoint sample_checkpoint() {
  const auto cfg = tiny_config();
  return train(cfg, make_split(cfg), {}).final_checkpoint;
}

TEST(Checkpoint, RoundTrip) {
  auto ck = sample_checkpoint();
  ck.rng_cursors = {{"shuffle", 12}, {"dropout", 99}};
  ASSERT_TRUE(ck.optimizer.has_value());
  const auto path = temp_dir("ckpt") / "x.bin";
  save_checkpoint(ck, path);
  const auto back = load_checkpoint(path);
  EXPECT_EQ(back.config, ck.config);
  EXPECT_EQ(back.params, ck.params);
  EXPECT_EQ(back.epoch, ck.epoch);
  EXPECT_EQ(back.seed, ck.seed);
  EXPECT_EQ(back.rng_cursors, ck.rng_cursors);
  EXPECT_EQ(back.data_width, ck.data_width);
  ASSERT_TRUE(back.optimizer.has_value());
  EXPECT_EQ(back.optimizer->step, ck.optimizer->step);
  EXPECT_EQ(back.optimizer->m, ck.optimizer->m);
  EXPECT_EQ(back.optimizer->v, ck.optimizer->v);
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  const auto ck = sample_checkpoint();
  const auto dir = temp_dir("corrupt");
  save_checkpoint(ck, dir / "good.bin");
  const auto size = fs::file_size(dir / "good.bin");
  fs::copy_file(dir / "good.bin", dir / "short.bin");
  fs::resize_file(dir / "short.bin", size / 2);
  EXPECT_THROW(load_checkpoint(dir / "short.bin"), CheckpointError);
  {
    std::ofstream os(dir / "junk.bin", std::ios::binary);
    os << "not a checkpoint at all";
  }
  EXPECT_THROW(load_checkpoint(dir / "junk.bin"), CheckpointError);
  EXPECT_THROW(load_checkpoint(dir / "missing.bin"), CheckpointError);
}

TEST(Checkpoint, ListingIsNumeric) {
  const auto dir = temp_dir("list");
  fs::create_directories(dir / "ckpt");
  for (int e : {10, 2, 100, 1}) std::ofstream(dir / "ckpt" / ("epoch_" + std::to_string(e) + ".bin")) << "x";
  std::ofstream(dir / "ckpt" / "notes.txt") << "x";
  const auto l = list_checkpoints(dir);
  ASSERT_EQ(l.size(), 4u);
  EXPECT_EQ(l[0].first, 1);
  EXPECT_EQ(l[1].first, 2);
  EXPECT_EQ(l[2].first, 10);
  EXPECT_EQ(l[3].first, 100);
}

TEST(Finetune, ZeroEpochsLeavesCheckpointUnchanged) {
  const auto ck = sample_checkpoint();
  const auto extra = data::sample_examples(2, 50, 3);
  const auto r = finetune(ck, extra, 0, 16, 1);
  EXPECT_EQ(r.checkpoint.params, ck.params);
  EXPECT_EQ(r.checkpoint.optimizer->step, ck.optimizer->step);
  EXPECT_EQ(r.checkpoint.epoch, ck.epoch);
  EXPECT_EQ(r.weight_norm_after, r.weight_norm_before);
}

TEST(Finetune, ContinuesOptimizerAndIsSeeded) {
  const auto ck = sample_checkpoint();
  const auto extra = data::sample_examples(2, 50, 3);
  const auto a = finetune(ck, extra, 2, 16, 1);
  const auto b = finetune(ck, extra, 2, 16, 1);
  EXPECT_EQ(a.checkpoint.params, b.checkpoint.params);
  EXPECT_NE(a.checkpoint.params, ck.params);
  EXPECT_EQ(a.checkpoint.optimizer->step, ck.optimizer->step + 8);  // 4 batches per epoch
  EXPECT_EQ(a.checkpoint.epoch, ck.epoch + 2);
  EXPECT_EQ(a.epoch_loss.size(), 2u);
  EXPECT_DOUBLE_EQ(a.weight_norm_before, weight_norm(ck.params));
  const auto wide = data::sample_examples(3, 5, 3);
  EXPECT_THROW(finetune(ck, wide, 1, 16, 1), model::ConfigError);
}

}  // namespace
}  // namespace carry::training
