#include <algorithm>
#include <cmath>
#include <map>

#include "carry/interp.hpp"

namespace carry::interp {

using data::AdditionExample;
using model::ModelConfig;

void for_each_trace(const Params& params, const ModelConfig& cfg, Examples examples,
                    const model::AblationSpec* ablation, std::size_t batch,
                    const std::function<void(std::size_t, const model::ActivationTrace<float>&)>& fn) {
  if (batch == 0) batch = 1;
  for (std::size_t i0 = 0; i0 < examples.size(); i0 += batch) {
    const auto chunk = examples.subspan(i0, std::min(batch, examples.size() - i0));
    const auto b = model::make_batch(cfg, chunk);
    model::ActivationTrace<float> trace;
    model::ForwardOptions<float> fo;
    fo.ablation = ablation;
    fo.capture = &trace;
    model::forward(params, cfg, b.tokens, b.size, fo);
    fn(i0, trace);
  }
}

namespace {

int layout_offset(const AdditionExample& ex, int layout_width) {
  if (ex.width > layout_width)
    throw InterpError("example width " + std::to_string(ex.width) + " exceeds layout width " +
                      std::to_string(layout_width));
  return layout_width - ex.width;
}

}  // namespace

int answer_digit_at(const AdditionExample& ex, int layout_width, int index) {
  const int j = index - layout_offset(ex, layout_width);
  return j < 0 ? 0 : ex.answer_digits[static_cast<std::size_t>(j)];
}

bool carry_at(const AdditionExample& ex, int layout_width, int index) {
  const int j = index - layout_offset(ex, layout_width);
  return j >= 0 && ex.carry_flags[static_cast<std::size_t>(j)];
}

int naive_sum_digit_at(const AdditionExample& ex, int layout_width, int index) {
  const int j = index - layout_offset(ex, layout_width);
  if (j < 0) return 0;
  const auto u = static_cast<std::size_t>(j);
  return (ex.a_digits[u] + ex.b_digits[u]) % 10;
}

// ---------------------------------------------------------------- summary

const AttentionGroup& AttentionSummary::group(const std::string& name) const {
  for (const auto& g : groups)
    if (g.name == name) return g;
  throw InterpError("no attention group named " + name);
}

const Tensor<double>& AttentionSummary::at(const std::string& group_name, int layer, int head) const {
  if (layer < 0 || layer >= layers || head < 0 || head >= heads)
    throw InterpError("attention head " + std::to_string(layer) + ":" + std::to_string(head) +
                      " out of range");
  return group(group_name).mean[static_cast<std::size_t>(layer * heads + head)];
}

Tensor<double> AttentionSummary::pooled(int layer, int head) const {
  const auto s = static_cast<std::size_t>(seq);
  Tensor<double> out({s, s});
  std::size_t total = 0;
  for (const auto& g : groups) {
    const auto& m = g.mean[static_cast<std::size_t>(layer * heads + head)];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += m[i] * static_cast<double>(g.count);
    total += g.count;
  }
  if (total == 0) throw InterpError("attention summary has no examples");
  for (auto& v : out.data()) v /= static_cast<double>(total);
  return out;
}

AttentionSummary attention_summary(const Params& params, const ModelConfig& cfg, Examples examples,
                                   GroupBy group_by, const model::AblationSpec* ablation) {
  if (examples.empty()) throw InterpError("attention_summary: empty example group");
  AttentionSummary out;
  out.layers = cfg.n_layers;
  out.heads = cfg.n_heads;
  out.seq = cfg.seq_len();
  out.width = cfg.width;
  const auto s = static_cast<std::size_t>(out.seq);
  const auto slots = static_cast<std::size_t>(out.layers * out.heads);

  // Welford accumulation per group
  std::map<std::string, std::size_t> index;
  std::vector<std::string> order;
  for (const auto& ex : examples) {
    const auto name = group_by == GroupBy::Task ? ex.task.name() : data::carry_pattern(ex).str();
    if (index.emplace(name, order.size()).second) order.push_back(name);
  }
  // task groups follow the canonical task order, patterns sort lexically
  if (group_by == GroupBy::Task) {
    std::map<std::string, int> rank;
    for (const auto& ex : examples) rank[ex.task.name()] = static_cast<int>(ex.task.task);
    std::stable_sort(order.begin(), order.end(),
                     [&](const auto& a, const auto& b) { return rank[a] < rank[b]; });
  } else {
    std::sort(order.begin(), order.end());
  }
  for (std::size_t i = 0; i < order.size(); ++i) index[order[i]] = i;
  out.groups.resize(order.size());
  for (std::size_t g = 0; g < order.size(); ++g) {
    out.groups[g].name = order[g];
    out.groups[g].mean.assign(slots, Tensor<double>({s, s}));
    out.groups[g].variance.assign(slots, Tensor<double>({s, s}));
  }

  for_each_trace(params, cfg, examples, ablation, 1024,
                 [&](std::size_t first, const model::ActivationTrace<float>& tr) {
                   for (std::size_t b = 0; b < tr.batch; ++b) {
                     const auto& ex = examples[first + b];
                     const auto name = group_by == GroupBy::Task
                                           ? ex.task.name()
                                           : data::carry_pattern(ex).str();
                     auto& grp = out.groups[index.at(name)];
                     ++grp.count;
                     const double n = static_cast<double>(grp.count);
                     for (std::size_t l = 0; l < tr.layers.size(); ++l)
                       for (std::size_t h = 0; h < tr.layers[l].attention.size(); ++h) {
                         const auto slot = l * static_cast<std::size_t>(out.heads) + h;
                         const float* a = tr.layers[l].attention[h].ptr() + b * s * s;
                         auto& mean = grp.mean[slot];
                         auto& m2 = grp.variance[slot];
                         for (std::size_t i = 0; i < s * s; ++i) {
                           const double x = a[i];
                           const double d = x - mean[i];
                           mean[i] += d / n;
                           m2[i] += d * (x - mean[i]);
                         }
                       }
                   }
                 });
  for (auto& g : out.groups)
    for (auto& m2 : g.variance)
      for (auto& v : m2.data()) v /= static_cast<double>(g.count);
  return out;
}

double staircase_score(const Tensor<double>& attention, int width, bool final_layer) {
  if (attention.rank() != 2 || attention.dim(0) != attention.dim(1))
    throw ShapeError("staircase_score expects a square matrix, got " + shape_str(attention.shape()));
  const auto s = attention.dim(0);
  const auto w = static_cast<std::size_t>(width);
  if (s < 3 * w + 1) throw InterpError("attention matrix too small for width " + std::to_string(width));
  double total = 0;
  std::size_t rows = 0;
  for (std::size_t i = 0; i < w; ++i) {
    total += attention.at(i, i + w + 1) + attention.at(i + w + 1, i);
    rows += 2;
  }
  if (final_layer) {
    for (std::size_t i = 0; i < w; ++i) {
      const std::size_t r = 2 * w + 1 + i;
      if (r >= s) break;
      total += std::max(attention.at(r, i), attention.at(r, i + w + 1));
      ++rows;
    }
  }
  return total / static_cast<double>(rows);
}

std::vector<StaircaseScore> staircase_scores(const AttentionSummary& summary) {
  std::vector<StaircaseScore> out;
  for (int l = 0; l < summary.layers; ++l)
    for (int h = 0; h < summary.heads; ++h)
      out.push_back({l, h,
                     staircase_score(summary.pooled(l, h), summary.width, l == summary.layers - 1)});
  return out;
}

std::optional<int> detect_transition(std::span<const int> epochs, std::span<const double> scores,
                                     const TransitionParams& tp) {
  if (epochs.size() != scores.size()) throw InterpError("detect_transition: length mismatch");
  for (std::size_t i = 0; i < scores.size(); ++i) {
    double low = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < i; ++j)
      if (epochs[j] >= epochs[i] - tp.window) low = std::min(low, scores[j]);
    if (std::isfinite(low) && scores[i] - low >= tp.jump) return epochs[i];
  }
  return std::nullopt;
}

// ----------------------------------------------------------- decision head

DecisionHead identify_decision_head(const Params& params, const ModelConfig& cfg,
                                    Examples examples) {
  if (cfg.n_layers < 2) throw InterpError("identify_decision_head needs at least two layers");
  if (examples.empty()) throw InterpError("identify_decision_head: no examples");
  DecisionHead out;
  training::EvalOptions eo;
  eo.compute_loss = false;
  out.baseline_exact = training::evaluate(params, cfg, examples, eo).exact_match;
  out.layer = cfg.n_layers - 1;
  double worst = -std::numeric_limits<double>::infinity();
  for (int h = 0; h < cfg.n_heads; ++h) {
    const auto spec = model::AblationSpec::head(out.layer, h);
    eo.ablation = &spec;
    auto m = training::evaluate(params, cfg, examples, eo);
    HeadAblation ha;
    ha.layer = out.layer;
    ha.head = h;
    ha.exact_match = m.exact_match;
    ha.degradation = out.baseline_exact - m.exact_match;
    ha.table = std::move(m.table);
    worst = std::max(worst, ha.degradation);
    out.candidates.push_back(std::move(ha));
  }
  for (const auto& c : out.candidates)
    if (c.degradation == worst) out.tied.push_back(c.head);
  out.head = out.tied.front();
  if (out.tied.size() == 1) out.tied.clear();
  return out;
}

double skip_ablation_experiment(const Params& params, const ModelConfig& cfg, Examples examples) {
  if (cfg.n_layers < 2) throw InterpError("skip ablation experiment needs a two-layer model");
  const auto spec = model::AblationSpec::skip_attention(0);
  training::EvalOptions eo;
  eo.compute_loss = false;
  eo.ablation = &spec;
  return training::evaluate(params, cfg, examples, eo).exact_match;
}

}  // namespace carry::interp
