#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "carry/interp.hpp"

namespace carry::interp {

using data::AdditionExample;
using model::ModelConfig;

namespace {

constexpr const char* kReference = "NC";

bool any_carry(const AdditionExample& ex) {
  return std::any_of(ex.carry_flags.begin(), ex.carry_flags.end(), [](bool b) { return b; });
}

std::string group_of(const AdditionExample& ex) {
  return any_carry(ex) ? ex.task.name() : std::string(kReference);
}

// Group names ordered by task enum, reference first.
std::vector<std::string> ordered_tasks(Examples examples) {
  std::map<std::string, int> rank;
  for (const auto& ex : examples)
    rank.emplace(group_of(ex), any_carry(ex) ? static_cast<int>(ex.task.task) + 1 : 0);
  std::vector<std::pair<int, std::string>> keyed;
  for (const auto& [n, r] : rank) keyed.emplace_back(r, n);
  std::sort(keyed.begin(), keyed.end());
  std::vector<std::string> out;
  for (auto& k : keyed) out.push_back(k.second);
  return out;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  const double den = std::sqrt(aa * bb);
  return den > 0 ? ab / den : 0.0;
}

std::vector<double> moving_average(std::span<const double> x, int smooth) {
  const int n = static_cast<int>(x.size());
  const int half = std::max(0, smooth / 2);
  std::vector<double> out(x.size());
  for (int i = 0; i < n; ++i) {
    const int lo = std::max(0, i - half), hi = std::min(n - 1, i + half);
    double s = 0;
    for (int j = lo; j <= hi; ++j) s += x[static_cast<std::size_t>(j)];
    out[static_cast<std::size_t>(i)] = s / (hi - lo + 1);
  }
  return out;
}

}  // namespace

// --------------------------------------------------------------- selection

NeuronSelection select_carry_neurons(const Params& params, const ModelConfig& cfg, Examples examples,
                                     const NeuronSelectionOptions& opt) {
  if (examples.empty()) throw InterpError("select_carry_neurons: no examples");
  NeuronSelection sel;
  sel.layer = cfg.n_layers - 1;
  sel.options = opt;
  sel.tasks = ordered_tasks(examples);
  if (sel.tasks.front() != kReference)
    throw InterpError("select_carry_neurons: examples contain no carry-free sums");
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < sel.tasks.size(); ++i) index[sel.tasks[i]] = i;
  const auto ff = static_cast<std::size_t>(cfg.d_ff);
  sel.task_means.assign(sel.tasks.size(), std::vector<double>(ff, 0.0));
  sel.task_rows.assign(sel.tasks.size(), 0);

  for_each_trace(params, cfg, examples, nullptr, 1024,
                 [&](std::size_t first, const model::ActivationTrace<float>& tr) {
                   const auto& lt = tr.layers[static_cast<std::size_t>(sel.layer)];
                   const auto& act = opt.stat == NeuronStat::Post ? lt.mlp_post : lt.mlp_pre;
                   for (std::size_t b = 0; b < tr.batch; ++b) {
                     const auto& ex = examples[first + b];
                     const auto g = index.at(group_of(ex));
                     for (int p = 0; p < cfg.width; ++p) {
                       if (opt.positions == NeuronPositions::CarryPositions && g != 0 &&
                           !carry_at(ex, cfg.width, p))
                         continue;
                       const auto pos = static_cast<std::size_t>(cfg.output_position(p));
                       const float* row = act.ptr() + (b * tr.seq + pos) * ff;
                       auto& acc = sel.task_means[g];
                       for (std::size_t n = 0; n < ff; ++n) acc[n] += row[n];
                       ++sel.task_rows[g];
                     }
                   }
                 });
  for (std::size_t g = 0; g < sel.tasks.size(); ++g)
    for (auto& v : sel.task_means[g]) v /= std::max<std::size_t>(1, sel.task_rows[g]);
  sel.indices = selection_from_statistics(sel);
  return sel;
}

std::vector<int> selection_from_statistics(const NeuronSelection& sel) {
  std::vector<int> out;
  if (sel.task_means.empty()) return out;
  const auto& ref = sel.task_means.front();
  for (std::size_t n = 0; n < ref.size(); ++n) {
    bool pick = false;
    for (std::size_t g = 1; g < sel.task_means.size(); ++g)
      pick = pick || (sel.task_rows[g] > 0 && sel.task_means[g][n] > ref[n] + sel.options.margin);
    if (pick) out.push_back(static_cast<int>(n));
  }
  return out;
}

// --------------------------------------------------------------------- SVD

SvdResult svd_dissection(const Params& params, const ModelConfig& cfg, Examples examples, int top_n) {
  if (examples.empty()) throw InterpError("svd_dissection: no examples");
  const int layer = cfg.n_layers - 1;
  const auto ff = static_cast<std::size_t>(cfg.d_ff);
  std::vector<std::vector<double>> rows;
  std::vector<std::pair<std::string, int>> row_key;
  for_each_trace(params, cfg, examples, nullptr, 1024,
                 [&](std::size_t first, const model::ActivationTrace<float>& tr) {
                   const auto& pre = tr.layers[static_cast<std::size_t>(layer)].mlp_pre;
                   for (std::size_t b = 0; b < tr.batch; ++b)
                     for (int p = 0; p < cfg.width; ++p) {
                       const auto pos = static_cast<std::size_t>(cfg.output_position(p));
                       const float* r = pre.ptr() + (b * tr.seq + pos) * ff;
                       rows.emplace_back(r, r + ff);
                       row_key.emplace_back(group_of(examples[first + b]), p);
                     }
                 });
  const auto fit = svd(rows, 2);
  SvdResult out;
  out.singular_values = fit.singular;
  double total = 0;
  for (double s : fit.singular) total += s * s;
  for (double s : fit.singular) out.explained.push_back(total > 0 ? s * s / total : 0.0);
  for (std::size_t n = 0; n < ff; ++n) out.neuron.push_back({fit.right[0][n], fit.right[1][n]});
  out.top.resize(ff);
  std::iota(out.top.begin(), out.top.end(), 0);
  std::stable_sort(out.top.begin(), out.top.end(), [&](int a, int b) {
    const auto& ca = out.neuron[static_cast<std::size_t>(a)];
    const auto& cb = out.neuron[static_cast<std::size_t>(b)];
    return std::hypot(ca[0], ca[1]) > std::hypot(cb[0], cb[1]);
  });
  out.top.resize(std::min<std::size_t>(ff, static_cast<std::size_t>(std::max(0, top_n))));

  out.tasks = ordered_tasks(examples);
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < out.tasks.size(); ++i) index[out.tasks[i]] = i;
  const auto w = static_cast<std::size_t>(cfg.width);
  out.activity.assign(out.tasks.size(), std::vector<std::array<double, 2>>(w, {0.0, 0.0}));
  std::vector<std::vector<std::size_t>> counts(out.tasks.size(), std::vector<std::size_t>(w, 0));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto g = index.at(row_key[r].first);
    const auto p = static_cast<std::size_t>(row_key[r].second);
    out.activity[g][p][0] += fit.left[0][r];
    out.activity[g][p][1] += fit.left[1][r];
    ++counts[g][p];
  }
  for (std::size_t g = 0; g < out.tasks.size(); ++g)
    for (std::size_t p = 0; p < w; ++p)
      for (auto& v : out.activity[g][p]) v /= std::max<std::size_t>(1, counts[g][p]);
  return out;
}

std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) return std::nullopt;
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0 || syy <= 0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

std::optional<double> point_biserial(std::span<const double> x, std::span<const bool> member) {
  std::vector<double> y(member.size());
  for (std::size_t i = 0; i < member.size(); ++i) y[i] = member[i] ? 1.0 : 0.0;
  return pearson(x, y);
}

// --------------------------------------------------------------- squashing

std::optional<double> spread_ratio(const std::vector<std::vector<double>>& before,
                                   const std::vector<std::vector<double>>& after) {
  if (before.size() != after.size() || before.size() < 2)
    throw InterpError("spread_ratio needs a group of at least two examples");
  const auto spread = [](const std::vector<std::vector<double>>& v) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t i = 0; i < v.size(); ++i)
      for (std::size_t j = i + 1; j < v.size(); ++j) {
        const double c = cosine(v[i], v[j]);
        lo = std::min(lo, c);
        hi = std::max(hi, c);
      }
    return hi - lo;
  };
  const double b = spread(before);
  if (b <= 1e-12) return std::nullopt;
  return spread(after) / b;
}

SquashingReport squashing_ratio(const Params& params, const ModelConfig& cfg, Examples examples,
                                std::size_t max_group) {
  const int layer = cfg.n_layers - 1;
  const auto d = static_cast<std::size_t>(cfg.d_model);
  std::map<std::uint64_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    auto& g = groups[examples[i].a + examples[i].b];
    if (g.size() < max_group) g.push_back(i);
  }
  std::vector<std::size_t> keep;
  for (const auto& [sum, idx] : groups)
    if (idx.size() >= 2) keep.insert(keep.end(), idx.begin(), idx.end());
  if (keep.empty()) throw InterpError("squashing_ratio: no answer shared by two examples");
  std::sort(keep.begin(), keep.end());
  std::vector<data::AdditionExample> subset;
  for (auto i : keep) subset.push_back(examples[i]);

  const auto w = static_cast<std::size_t>(cfg.width);
  // before/after vectors per example and output position
  std::vector<std::vector<std::vector<double>>> before(subset.size()), after(subset.size());
  for_each_trace(params, cfg, subset, nullptr, 1024,
                 [&](std::size_t first, const model::ActivationTrace<float>& tr) {
                   const auto& lt = tr.layers[static_cast<std::size_t>(layer)];
                   for (std::size_t b = 0; b < tr.batch; ++b)
                     for (std::size_t p = 0; p < w; ++p) {
                       const auto pos = static_cast<std::size_t>(cfg.output_position(static_cast<int>(p)));
                       const float* mid = lt.resid_mid.ptr() + (b * tr.seq + pos) * d;
                       const float* post = lt.resid_post.ptr() + (b * tr.seq + pos) * d;
                       before[first + b].emplace_back(mid, mid + d);
                       after[first + b].emplace_back(post, post + d);
                     }
                 });
  std::map<std::uint64_t, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < subset.size(); ++i) members[subset[i].a + subset[i].b].push_back(i);

  SquashingReport rep;
  for (std::size_t p = 0; p < w; ++p) {
    rep.positions.push_back(cfg.output_position(static_cast<int>(p)));
    double sum = 0;
    std::size_t used = 0;
    for (const auto& [s, idx] : members) {
      std::vector<std::vector<double>> bv, av;
      for (auto i : idx) {
        bv.push_back(before[i][p]);
        av.push_back(after[i][p]);
      }
      if (const auto r = spread_ratio(bv, av)) {
        sum += *r;
        ++used;
      }
    }
    rep.ratio.push_back(used ? std::optional<double>(sum / static_cast<double>(used)) : std::nullopt);
    rep.groups_used.push_back(used);
  }
  return rep;
}

// ------------------------------------------------------------ checkerboard

double checkerboard_statistic(const Tensor<double>& sim, std::span<const std::string> labels) {
  const auto n = labels.size();
  if (sim.rank() != 2 || sim.dim(0) != n || sim.dim(1) != n)
    throw ShapeError("checkerboard_statistic: matrix " + shape_str(sim.shape()) + " for " +
                     std::to_string(n) + " labels");
  double within = 0, cross = 0;
  std::size_t nw = 0, nc = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      if (labels[i] == labels[j]) {
        within += sim.at(i, j);
        ++nw;
      } else {
        cross += sim.at(i, j);
        ++nc;
      }
    }
  if (nc == 0) return 0.0;
  const double w = nw ? within / static_cast<double>(nw) : 1.0;
  return w - cross / static_cast<double>(nc);
}

Checkerboard cosine_checkerboard(const Params& params, const ModelConfig& cfg, Examples group,
                                 const model::AblationSpec* ablation) {
  if (group.size() < 2) throw InterpError("cosine_checkerboard needs at least two examples");
  Checkerboard out;
  const auto n = group.size();
  std::vector<std::string> pattern(n);
  for (std::size_t i = 0; i < n; ++i) pattern[i] = data::carry_pattern(group[i]).str();
  out.order.resize(n);
  std::iota(out.order.begin(), out.order.end(), 0);
  std::stable_sort(out.order.begin(), out.order.end(),
                   [&](auto a, auto b) { return pattern[a] < pattern[b]; });
  const auto d = static_cast<std::size_t>(cfg.d_model);
  std::vector<std::vector<double>> hidden(n);
  for_each_trace(params, cfg, group, ablation, 1024,
                 [&](std::size_t first, const model::ActivationTrace<float>& tr) {
                   for (std::size_t b = 0; b < tr.batch; ++b)
                     for (int p = 0; p < cfg.width; ++p) {
                       const auto pos = static_cast<std::size_t>(cfg.output_position(p));
                       const float* v = tr.final_resid.ptr() + (b * tr.seq + pos) * d;
                       hidden[first + b].insert(hidden[first + b].end(), v, v + d);
                     }
                 });
  out.similarity = Tensor<double>({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    out.patterns.push_back(pattern[out.order[i]]);
    for (std::size_t j = 0; j < n; ++j)
      out.similarity.at(i, j) = cosine(hidden[out.order[i]], hidden[out.order[j]]);
  }
  out.statistic = checkerboard_statistic(out.similarity, out.patterns);
  return out;
}

// --------------------------------------------------------------------- PCC

std::vector<double> no_carry_reference(const training::TaskAccuracyTable& table, Examples examples,
                                       int layout_width, std::vector<std::string>* cells) {
  const auto g = table.groups.size();
  const auto w = static_cast<std::size_t>(table.positions);
  std::vector<std::vector<std::size_t>> carry(g, std::vector<std::size_t>(w, 0));
  std::vector<std::size_t> count(g, 0);
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < g; ++i) index[table.groups[i]] = i;
  for (const auto& ex : examples) {
    const auto it = index.find(ex.task.name());
    if (it == index.end()) continue;
    ++count[it->second];
    for (std::size_t p = 0; p < w; ++p) carry[it->second][p] += carry_at(ex, layout_width, static_cast<int>(p));
  }
  std::vector<double> ref;
  if (cells) cells->clear();
  for (std::size_t i = 0; i < g; ++i)
    for (std::size_t p = 0; p < w; ++p) {
      const bool c = 2 * carry[i][p] >= count[i] && count[i] > 0;
      ref.push_back(c ? 0.0 : 1.0);
      ref.push_back(c ? 1.0 : 0.0);
      if (cells) {
        const auto base = table.groups[i] + ":" + std::to_string(p) + ":";
        cells->push_back(base + "plain");
        cells->push_back(base + "corrected");
      }
    }
  return ref;
}

std::vector<double> pcc_observed(const training::TaskAccuracyTable& table) {
  std::vector<double> out;
  for (std::size_t i = 0; i < table.groups.size(); ++i)
    for (int p = 0; p < table.positions; ++p) {
      out.push_back(table.accuracy[i][static_cast<std::size_t>(p)]);
      out.push_back(table.corrected[i][static_cast<std::size_t>(p)]);
    }
  return out;
}

PccSeries pcc_evolution(const fs::path& run_dir, Examples examples, PccMode mode, int stride) {
  const auto ckpts = training::list_checkpoints(run_dir);
  if (ckpts.empty()) throw InterpError("no checkpoints under " + (run_dir / "ckpt").string());
  if (examples.empty()) throw InterpError("pcc_evolution: no examples");
  PccSeries out;
  out.mode = mode;
  model::AblationSpec spec;
  if (mode == PccMode::FinalNeurons) {
    const auto last = training::load_checkpoint(ckpts.back().second);
    const auto sel = select_carry_neurons(last.params, last.config, examples);
    spec = model::AblationSpec::neurons(sel.layer, sel.indices);
  }
  stride = std::max(1, stride);
  for (std::size_t i = 0; i < ckpts.size(); ++i) {
    const bool last = i + 1 == ckpts.size();
    if (ckpts[i].first % stride != 0 && !last) continue;
    const auto ck = training::load_checkpoint(ckpts[i].second);
    if (mode == PccMode::OwnMlp) spec = model::AblationSpec::mlp(ck.config.n_layers - 1);
    const auto table = training::corrected_accuracy(ck.params, ck.config, examples, &spec);
    if (out.reference.empty()) out.reference = no_carry_reference(table, examples, ck.config.width, &out.cells);
    PccPoint pt;
    pt.epoch = ck.epoch;
    pt.observed = pcc_observed(table);
    pt.pcc = pearson(pt.observed, out.reference);
    out.points.push_back(std::move(pt));
  }
  return out;
}

std::optional<int> loss_kink(std::span<const int> epochs, std::span<const double> loss, int smooth) {
  if (epochs.size() != loss.size()) throw InterpError("loss_kink: length mismatch");
  if (loss.size() < 3) return std::nullopt;
  std::vector<double> lg;
  for (double v : loss) lg.push_back(std::log(std::max(v, 1e-300)));
  const auto y = moving_average(lg, smooth);
  std::optional<int> best;
  double best_d2 = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i + 1 < y.size(); ++i) {
    const double d2 = y[i + 1] - 2 * y[i] + y[i - 1];
    if (d2 > best_d2) {
      best_d2 = d2;
      best = epochs[i];
    }
  }
  return best;
}

std::optional<int> rise_onset(std::span<const int> epochs, std::span<const double> values,
                              double fraction, int smooth) {
  if (epochs.size() != values.size()) throw InterpError("rise_onset: length mismatch");
  if (values.empty()) return std::nullopt;
  const auto y = moving_average(values, smooth);
  const auto peak = static_cast<std::size_t>(std::max_element(y.begin(), y.end()) - y.begin());
  const auto low = static_cast<std::size_t>(std::min_element(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(peak) + 1) - y.begin());
  const double rise = y[peak] - y[low];
  if (rise <= 0) return std::nullopt;
  for (std::size_t i = low; i <= peak; ++i)
    if (y[i] >= y[low] + fraction * rise) return epochs[i];
  return std::nullopt;
}

std::optional<int> loss_drop(std::span<const int> epochs, std::span<const double> loss,
                             double fraction, int window, int from) {
  if (epochs.size() != loss.size()) throw InterpError("loss_drop: length mismatch");
  for (std::size_t i = 0; i < loss.size(); ++i) {
    if (epochs[i] < from) continue;
    for (std::size_t j = 0; j < i; ++j)
      if (epochs[j] >= epochs[i] - window && loss[i] <= (1.0 - fraction) * loss[j]) return epochs[i];
  }
  return std::nullopt;
}

}  // namespace carry::interp
