#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "carry/addition.hpp"
#include "carry/model.hpp"
#include "carry/optim.hpp"

namespace carry::training {

namespace fs = std::filesystem;

class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, int epoch, std::size_t batch)
      : std::runtime_error(what), epoch(epoch), batch(batch) {}
  int epoch;
  std::size_t batch;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  model::ModelConfig model;
  AdamWConfig optim;
  double split = 0.3;
  std::size_t batch = 1024;
  int epochs = 1000;
  std::uint64_t seed = 0;
  int width = 3;
  int checkpoint_every = 10;  // 0 disables periodic checkpoints
  bool checkpoint_every_epoch = false;
  bool early_stop = true;
  double stop_accuracy = 0.999;
  // Per-epoch test metrics use this many test examples (0 = all). The stop
  // gate is always confirmed on the full test set.
  std::size_t eval_subset = 20000;
  std::size_t prime_k = 0;
  int prime_width = 0;
  // Optional per-epoch exact-match on sampled sums of another width.
  std::size_t probe_size = 0;
  int probe_width = 0;

  void validate() const;
};

// Accuracy per (group, output position); groups are task names.
struct TaskAccuracyTable {
  int positions = 0;
  std::vector<std::string> groups;
  std::vector<std::size_t> counts;
  std::vector<std::vector<double>> accuracy;   // [group][position]
  std::vector<std::vector<double>> corrected;  // [group][position]
  std::vector<double> exact;                   // [group]

  std::size_t index_of(const std::string& group) const;
  const std::vector<double>& acc(const std::string& group) const {
    return accuracy[index_of(group)];
  }
  const std::vector<double>& corr(const std::string& group) const {
    return corrected[index_of(group)];
  }
};

struct MetricsRecord {
  int epoch = 0;
  double train_loss = 0;
  double test_loss = 0;
  double exact_match = 0;
  double min_position_accuracy = 0;
  std::vector<double> position_accuracy;
  TaskAccuracyTable table;
  double weight_norm = 0;
  std::size_t evaluated = 0;
  double probe_exact = std::numeric_limits<double>::quiet_NaN();
};

// Corrected-accuracy shift. Auto adds one where the example receives a carry
// at that position and subtracts one elsewhere.
enum class CorrectionDirection { Auto, Add, Subtract };

struct EvalOptions {
  const model::AblationSpec* ablation = nullptr;
  CorrectionDirection direction = CorrectionDirection::Auto;
  std::size_t batch = 2048;
  bool compute_loss = true;
};

// Scores digit predictions (positions per example = cfg width) against examples.
TaskAccuracyTable score_predictions(const model::ModelConfig& cfg,
                                    std::span<const data::AdditionExample> examples,
                                    std::span<const std::uint8_t> predicted,
                                    CorrectionDirection direction = CorrectionDirection::Auto);

// Predicted digits for every example.
std::vector<std::uint8_t> predict_all(const model::ParameterSet<float>& params,
                                      const model::ModelConfig& cfg,
                                      std::span<const data::AdditionExample> examples,
                                      const model::AblationSpec* ablation = nullptr,
                                      std::size_t batch = 2048);

MetricsRecord evaluate(const model::ParameterSet<float>& params, const model::ModelConfig& cfg,
                       std::span<const data::AdditionExample> examples,
                       const EvalOptions& opt = {});

TaskAccuracyTable corrected_accuracy(const model::ParameterSet<float>& params,
                                     const model::ModelConfig& cfg,
                                     std::span<const data::AdditionExample> examples,
                                     const model::AblationSpec* ablation,
                                     CorrectionDirection direction = CorrectionDirection::Auto);

// Sum of squared entries over weight tensors; biases and layernorm shifts excluded.
template <typename T>
double weight_norm(const model::ParameterSet<T>& params);

struct Checkpoint {
  model::ModelConfig config;
  model::ParameterSet<float> params;
  std::optional<OptimizerState<float>> optimizer;
  int epoch = 0;
  std::uint64_t seed = 0;
  std::map<std::string, std::uint64_t> rng_cursors;
  int data_width = 3;  // width of the base training sums
};

void save_checkpoint(const Checkpoint& ck, const fs::path& path);
Checkpoint load_checkpoint(const fs::path& path);
// Sorted (epoch, path) pairs under run_dir/ckpt.
std::vector<std::pair<int, fs::path>> list_checkpoints(const fs::path& run_dir);

struct TrainResult {
  std::vector<MetricsRecord> history;
  MetricsRecord final_metrics;  // on the full test set
  int stop_epoch = 0;
  bool converged = false;
  Checkpoint final_checkpoint;
};

struct TrainHooks {
  std::function<void(const MetricsRecord&)> on_epoch;
  std::function<void(const std::string&)> log;
};

// Trains on split.train, evaluates on split.test. When run_dir is non-empty
// writes manifest.json, metrics.csv and ckpt/epoch_{N}.bin.
TrainResult train(const TrainConfig& cfg, const data::DatasetSplit& split, const fs::path& run_dir,
                  const TrainHooks& hooks = {});

// Builds the split a TrainConfig describes (enumeration, split, optional priming).
data::DatasetSplit make_split(const TrainConfig& cfg);

struct FinetuneResult {
  Checkpoint checkpoint;
  double weight_norm_before = 0;
  double weight_norm_after = 0;
  std::vector<double> epoch_loss;
};

// Continues AdamW from the checkpoint's optimizer state on `extra` only.
FinetuneResult finetune(const Checkpoint& start, std::span<const data::AdditionExample> extra,
                        int epochs, std::size_t batch, std::uint64_t seed);

std::string metrics_csv_header(int positions);
std::string metrics_csv_row(const MetricsRecord& m);

}  // namespace carry::training
