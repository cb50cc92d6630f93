#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <limits>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "carry/addition.hpp"
#include "carry/model.hpp"
#include "carry/training.hpp"

namespace carry::interp {

namespace fs = std::filesystem;

class InterpError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Params = model::ParameterSet<float>;
using Examples = std::span<const data::AdditionExample>;

// Runs capture-enabled eval forwards over the examples in batches and calls
// fn(first_example_index, trace) once per batch.
void for_each_trace(const Params& params, const model::ModelConfig& cfg, Examples examples,
                    const model::AblationSpec* ablation, std::size_t batch,
                    const std::function<void(std::size_t, const model::ActivationTrace<float>&)>& fn);

// Answer digit / received carry of an example at a layout digit index
// (0 = most significant layout position); left padding reads as 0 / false.
int answer_digit_at(const data::AdditionExample& ex, int layout_width, int index);
bool carry_at(const data::AdditionExample& ex, int layout_width, int index);
int naive_sum_digit_at(const data::AdditionExample& ex, int layout_width, int index);

// ---------------------------------------------------------------- attention

enum class GroupBy { Task, Pattern };

struct AttentionGroup {
  std::string name;
  std::size_t count = 0;
  // index layer * heads + head, each [seq, seq]
  std::vector<Tensor<double>> mean;
  std::vector<Tensor<double>> variance;
};

struct AttentionSummary {
  int layers = 0;
  int heads = 0;
  int seq = 0;
  int width = 0;
  std::vector<AttentionGroup> groups;

  const AttentionGroup& group(const std::string& name) const;
  const Tensor<double>& at(const std::string& group_name, int layer, int head) const;
  // Count-weighted mean over all groups.
  Tensor<double> pooled(int layer, int head) const;
};

AttentionSummary attention_summary(const Params& params, const model::ModelConfig& cfg,
                                   Examples examples, GroupBy group_by,
                                   const model::AblationSpec* ablation = nullptr);

// Mean partner-column mass over the digit rows. When final_layer is set each
// output row also contributes its larger mass on the two digits of its position.
// Uniform attention scores 1/seq, one-hot partner attention scores 1.
double staircase_score(const Tensor<double>& attention, int width, bool final_layer);

struct StaircaseScore {
  int layer = 0;
  int head = 0;
  double score = 0;
};
std::vector<StaircaseScore> staircase_scores(const AttentionSummary& summary);

struct TransitionParams {
  int window = 20;
  double jump = 0.2;
};
// Earliest epoch whose score exceeds the minimum over the preceding `window`
// epochs by at least `jump`.
std::optional<int> detect_transition(std::span<const int> epochs, std::span<const double> scores,
                                     const TransitionParams& tp = {});

// ------------------------------------------------------------ decision head

struct HeadAblation {
  int layer = 0;
  int head = 0;
  double exact_match = 0;
  double degradation = 0;
  training::TaskAccuracyTable table;
};

struct DecisionHead {
  int layer = 0;
  int head = 0;
  double baseline_exact = 0;
  std::vector<HeadAblation> candidates;
  std::vector<int> tied;  // heads sharing the maximal degradation, when more than one
};

DecisionHead identify_decision_head(const Params& params, const model::ModelConfig& cfg,
                                    Examples examples);

// ---------------------------------------------------------------------- PCA

enum class Block { ResidPre, Attention, ResidMid, Mlp, ResidPost };
std::string_view block_name(Block b);
Block block_from_name(std::string_view s);

struct PcaResult {
  int layer = 0;
  Block block = Block::Attention;
  int position = 0;
  std::vector<double> mean;                    // [D]
  std::vector<std::vector<double>> components;  // k x D, orthonormal
  std::vector<double> explained;               // variance ratios, non-increasing
  std::vector<std::vector<double>> projected;  // examples x k
  std::vector<std::string> task;
  std::vector<int> answer_digit;  // -1 at non-output positions
  std::vector<int> naive_sum_digit;
  std::vector<bool> carry_needed;
};

// Mean-centred PCA of the rows of x [n, d]; components follow the sign
// convention that each component's largest-magnitude entry is positive.
struct PcaFit {
  std::vector<double> mean;
  std::vector<std::vector<double>> components;
  std::vector<double> explained;
  std::vector<std::vector<double>> projected;
};
PcaFit pca(const std::vector<std::vector<double>>& x, int k);
// Inverse map of projected coordinates (exact when k = d).
std::vector<std::vector<double>> pca_reconstruct(const PcaFit& fit);

PcaResult residual_pca(const Params& params, const model::ModelConfig& cfg, Examples examples,
                       int layer, Block block, int position, int k = 2,
                       const model::AblationSpec* ablation = nullptr);

// Soft-margin linear SVM (Pegasos) on points with labels in {-1, +1}.
struct LinearClassifier {
  std::vector<double> w;
  double b = 0;
  int predict(std::span<const double> x) const;
  double accuracy(const std::vector<std::vector<double>>& x, std::span<const int> y) const;
};
LinearClassifier fit_linear_svm(const std::vector<std::vector<double>>& x, std::span<const int> y,
                                std::uint64_t seed = 0, double lambda = 1e-4, int epochs = 200);

// --------------------------------------------------------- neuron dissection

enum class NeuronStat { Post, Pre };
enum class NeuronPositions { CarryPositions, AllOutputs };

struct NeuronSelectionOptions {
  NeuronStat stat = NeuronStat::Post;
  NeuronPositions positions = NeuronPositions::CarryPositions;
  double margin = 0;
};

struct NeuronSelection {
  int layer = 0;
  std::vector<int> indices;
  std::vector<std::string> tasks;                 // tasks[0] is the no-carry reference
  std::vector<std::vector<double>> task_means;    // [task][neuron]
  std::vector<std::size_t> task_rows;             // samples behind each mean
  NeuronSelectionOptions options;
};

NeuronSelection select_carry_neurons(const Params& params, const model::ModelConfig& cfg,
                                     Examples examples, const NeuronSelectionOptions& opt = {});
// Re-derives the index set from stored statistics.
std::vector<int> selection_from_statistics(const NeuronSelection& sel);

struct SvdResult {
  std::vector<double> singular_values;
  std::vector<double> explained;               // sigma^2 share
  std::vector<std::array<double, 2>> neuron;   // per neuron, leading two right-vector entries
  std::vector<int> top;                        // neurons ranked by |coordinate|
  std::vector<std::string> tasks;
  // mean projection on the leading two axes per (task, output position)
  std::vector<std::vector<std::array<double, 2>>> activity;
};

struct SvdFit {
  std::vector<double> singular;
  std::vector<std::vector<double>> right;  // components x columns
  std::vector<std::vector<double>> left;   // components x rows, scaled by singular values
};
SvdFit svd(const std::vector<std::vector<double>>& x, int k);

SvdResult svd_dissection(const Params& params, const model::ModelConfig& cfg, Examples examples,
                         int top_n = 20);

// Pearson correlation between x and a binary membership indicator.
std::optional<double> point_biserial(std::span<const double> x, std::span<const bool> member);
std::optional<double> pearson(std::span<const double> x, std::span<const double> y);

// ---------------------------------------------------------------- squashing

struct SquashingReport {
  std::vector<int> positions;
  std::vector<std::optional<double>> ratio;  // per output position
  std::vector<std::size_t> groups_used;
  std::string group_definition = "examples sharing the full answer";
};

// Spread (max - min) of pairwise cosine overlaps after over before.
std::optional<double> spread_ratio(const std::vector<std::vector<double>>& before,
                                   const std::vector<std::vector<double>>& after);

SquashingReport squashing_ratio(const Params& params, const model::ModelConfig& cfg,
                                Examples examples, std::size_t max_group = 200);

// ---------------------------------------------------------------------- PCC

enum class PccMode { OwnMlp, FinalNeurons };

struct PccPoint {
  int epoch = 0;
  std::optional<double> pcc;
  std::vector<double> observed;
};

struct PccSeries {
  PccMode mode = PccMode::OwnMlp;
  std::vector<std::string> cells;  // "task:position:plain|corrected"
  std::vector<double> reference;
  std::vector<PccPoint> points;
};

// Accuracies expected if carrying were impossible: plain 1 / corrected 0 on
// cells without a received carry, the reverse on carry cells. Cell order is
// group-major, then position, then plain before corrected.
std::vector<double> no_carry_reference(const training::TaskAccuracyTable& table,
                                       Examples examples, int layout_width,
                                       std::vector<std::string>* cells = nullptr);
std::vector<double> pcc_observed(const training::TaskAccuracyTable& table);

PccSeries pcc_evolution(const fs::path& run_dir, Examples examples, PccMode mode = PccMode::OwnMlp,
                        int stride = 1);

// Epoch of the maximum second difference of the moving-average log series.
std::optional<int> loss_kink(std::span<const int> epochs, std::span<const double> loss,
                             int smooth = 5);
// First epoch at or after `from` whose loss is at most (1 - fraction) of a loss
// seen within the preceding `window` epochs.
std::optional<int> loss_drop(std::span<const int> epochs, std::span<const double> loss,
                             double fraction = 0.3, int window = 20,
                             int from = std::numeric_limits<int>::min());
// First epoch where the moving average reaches baseline + fraction of its total rise.
std::optional<int> rise_onset(std::span<const int> epochs, std::span<const double> values,
                              double fraction = 0.1, int smooth = 5);

// ------------------------------------------------------------- checkerboard

struct Checkerboard {
  std::vector<std::string> patterns;  // per example, sorted
  std::vector<std::size_t> order;     // indices into the group
  Tensor<double> similarity;          // [n, n] in sorted order
  double statistic = 0;               // within-pattern minus cross-pattern mean
};

Checkerboard cosine_checkerboard(const Params& params, const model::ModelConfig& cfg,
                                 Examples group, const model::AblationSpec* ablation);
double checkerboard_statistic(const Tensor<double>& sim, std::span<const std::string> labels);

// Exact-match with the layer-0 attention bypass removed at digit positions.
double skip_ablation_experiment(const Params& params, const model::ModelConfig& cfg,
                                Examples examples);

// ------------------------------------------------------------------- output

// Magma-like colour for v in [0, 1].
std::string magma_hex(double v);

struct HeatmapPanel {
  std::string title;
  Tensor<double> values;  // [rows, cols]
};
// Grid of heatmaps; value range [vmin, vmax] is shared by all panels.
std::string heatmap_svg(std::span<const HeatmapPanel> panels, int columns, double vmin,
                        double vmax, std::span<const std::string> tick_labels = {});
std::string scatter_svg(const std::vector<std::vector<double>>& points,
                        std::span<const std::string> labels, const std::string& title);

void write_file(const fs::path& p, const std::string& text);

}  // namespace carry::interp
