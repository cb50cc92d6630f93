#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "carry/runtime.hpp"
#include "carry/serialize.hpp"
#include "carry/training.hpp"

namespace carry::training {

using data::AdditionExample;
using model::ModelConfig;
using model::ParameterSet;

void TrainConfig::validate() const {
  model.validate();
  if (!(split > 0.0 && split <= 1.0)) throw model::ConfigError("split fraction must lie in (0, 1]");
  if (batch == 0) throw model::ConfigError("batch size must be positive");
  if (epochs < 0) throw model::ConfigError("epochs must be non-negative");
  if (!(optim.lr > 0)) throw model::ConfigError("learning rate must be positive");
  if (optim.weight_decay < 0) throw model::ConfigError("weight decay must be non-negative");
  if (width < 1 || width > model.width)
    throw model::ConfigError("data width must not exceed the model layout width");
  if (prime_k > 0 && prime_width <= width)
    throw model::ConfigError("priming width must exceed the base width");
  if (prime_k > 0 && prime_width > model.width)
    throw model::ConfigError("priming width exceeds the model layout width");
  if (probe_size > 0 && (probe_width < 1 || probe_width > model.width))
    throw model::ConfigError("probe width must lie within the model layout width");
}

std::size_t TaskAccuracyTable::index_of(const std::string& group) const {
  auto it = std::find(groups.begin(), groups.end(), group);
  if (it == groups.end()) throw std::out_of_range("no group " + group + " in accuracy table");
  return static_cast<std::size_t>(it - groups.begin());
}

namespace {

bool receives_carry(const AdditionExample& ex, int layout_width, int pos) {
  const int j = pos - (layout_width - ex.width);
  return j >= 0 && ex.carry_flags[static_cast<std::size_t>(j)];
}

std::vector<std::string> ordered_groups(std::span<const AdditionExample> examples) {
  std::vector<std::pair<int, std::string>> keyed;
  for (const auto& ex : examples) {
    std::pair<int, std::string> k{static_cast<int>(ex.task.task), ex.task.name()};
    if (std::find(keyed.begin(), keyed.end(), k) == keyed.end()) keyed.push_back(std::move(k));
  }
  std::sort(keyed.begin(), keyed.end());
  std::vector<std::string> out;
  for (auto& k : keyed) out.push_back(std::move(k.second));
  return out;
}

}  // namespace

TaskAccuracyTable score_predictions(const ModelConfig& cfg, std::span<const AdditionExample> examples,
                                    std::span<const std::uint8_t> predicted,
                                    CorrectionDirection direction) {
  const auto w = static_cast<std::size_t>(cfg.width);
  if (predicted.size() != examples.size() * w)
    throw ShapeError("score_predictions: " + std::to_string(predicted.size()) +
                     " digits for " + std::to_string(examples.size()) + " examples");
  TaskAccuracyTable t;
  t.positions = cfg.width;
  t.groups = ordered_groups(examples);
  const auto g = t.groups.size();
  t.counts.assign(g, 0);
  t.accuracy.assign(g, std::vector<double>(w, 0.0));
  t.corrected.assign(g, std::vector<double>(w, 0.0));
  t.exact.assign(g, 0.0);
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < g; ++i) index[t.groups[i]] = i;

  for (std::size_t e = 0; e < examples.size(); ++e) {
    const auto& ex = examples[e];
    const auto gi = index.at(ex.task.name());
    const auto target = data::digits_of(ex.a + ex.b, cfg.width);
    ++t.counts[gi];
    bool all = true;
    for (std::size_t p = 0; p < w; ++p) {
      const int pred = predicted[e * w + p];
      const int tgt = target[p];
      if (pred == tgt) {
        t.accuracy[gi][p] += 1;
      } else {
        all = false;
      }
      int shift = 0;
      switch (direction) {
        case CorrectionDirection::Add: shift = 1; break;
        case CorrectionDirection::Subtract: shift = -1; break;
        case CorrectionDirection::Auto:
          shift = receives_carry(ex, cfg.width, static_cast<int>(p)) ? 1 : -1;
          break;
      }
      if ((pred + shift + 10) % 10 == tgt) t.corrected[gi][p] += 1;
    }
    if (all) t.exact[gi] += 1;
  }
  for (std::size_t i = 0; i < g; ++i) {
    const double n = static_cast<double>(t.counts[i]);
    for (std::size_t p = 0; p < w; ++p) {
      t.accuracy[i][p] /= n;
      t.corrected[i][p] /= n;
    }
    t.exact[i] /= n;
  }
  return t;
}

namespace {

struct BatchOutcome {
  double loss_sum = 0;
  std::size_t loss_count = 0;
};

// Predictions for one batch; adds the cross-entropy sum when requested.
std::vector<std::uint8_t> run_batch(const ParameterSet<float>& params, const ModelConfig& cfg,
                                    std::span<const AdditionExample> chunk,
                                    const model::AblationSpec* ablation, bool with_loss,
                                    BatchOutcome& acc) {
  const auto batch = model::make_batch(cfg, chunk);
  const auto w = static_cast<std::size_t>(cfg.width);
  const auto seq = static_cast<std::size_t>(cfg.seq_len());
  const auto vocab = static_cast<std::size_t>(cfg.vocab);
  std::vector<std::uint8_t> preds;
  model::ForwardOptions<float> opt;
  opt.ablation = ablation;
  Tensor<float> logits;
  if (with_loss || !cfg.causal) logits = model::forward(params, cfg, batch.tokens, batch.size, opt);
  if (with_loss) {
    for (std::size_t r = 0; r < batch.size * seq; ++r) {
      const int tgt = batch.targets[r];
      if (tgt < 0) continue;
      const float* row = logits.ptr() + r * vocab;
      const double mx = *std::max_element(row, row + vocab);
      double z = 0;
      for (std::size_t c = 0; c < vocab; ++c) z += std::exp(static_cast<double>(row[c]) - mx);
      acc.loss_sum += std::log(z) + mx - row[tgt];
      ++acc.loss_count;
    }
  }
  if (cfg.causal) return model::predict(params, cfg, batch, ablation);
  preds.resize(batch.size * w);
  for (std::size_t b = 0; b < batch.size; ++b)
    for (std::size_t i = 0; i < w; ++i) {
      const float* row =
          logits.ptr() + (b * seq + static_cast<std::size_t>(cfg.output_position(static_cast<int>(i)))) * vocab;
      preds[b * w + i] = static_cast<std::uint8_t>(std::max_element(row, row + 10) - row);
    }
  return preds;
}

}  // namespace

std::vector<std::uint8_t> predict_all(const ParameterSet<float>& params, const ModelConfig& cfg,
                                      std::span<const AdditionExample> examples,
                                      const model::AblationSpec* ablation, std::size_t batch) {
  std::vector<std::uint8_t> out;
  out.reserve(examples.size() * static_cast<std::size_t>(cfg.width));
  BatchOutcome unused;
  for (std::size_t i = 0; i < examples.size(); i += batch) {
    const auto n = std::min(batch, examples.size() - i);
    const auto p = run_batch(params, cfg, examples.subspan(i, n), ablation, false, unused);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

template <typename T>
double weight_norm(const ParameterSet<T>& params) {
  double s = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (model::is_bias_param(params.name(i))) continue;
    for (T v : params.at(i).data()) s += static_cast<double>(v) * static_cast<double>(v);
  }
  return s;
}

template double weight_norm<float>(const ParameterSet<float>&);
template double weight_norm<double>(const ParameterSet<double>&);

MetricsRecord evaluate(const ParameterSet<float>& params, const ModelConfig& cfg,
                       std::span<const AdditionExample> examples, const EvalOptions& opt) {
  MetricsRecord m;
  m.evaluated = examples.size();
  m.weight_norm = weight_norm(params);
  const auto w = static_cast<std::size_t>(cfg.width);
  if (examples.empty()) return m;
  std::vector<std::uint8_t> preds;
  preds.reserve(examples.size() * w);
  BatchOutcome acc;
  for (std::size_t i = 0; i < examples.size(); i += opt.batch) {
    const auto n = std::min(opt.batch, examples.size() - i);
    const auto p =
        run_batch(params, cfg, examples.subspan(i, n), opt.ablation, opt.compute_loss, acc);
    preds.insert(preds.end(), p.begin(), p.end());
  }
  if (acc.loss_count) m.test_loss = acc.loss_sum / static_cast<double>(acc.loss_count);
  m.table = score_predictions(cfg, examples, preds, opt.direction);
  m.position_accuracy.assign(w, 0.0);
  std::size_t exact = 0;
  for (std::size_t e = 0; e < examples.size(); ++e) {
    const auto target = data::digits_of(examples[e].a + examples[e].b, cfg.width);
    bool all = true;
    for (std::size_t p = 0; p < w; ++p) {
      if (preds[e * w + p] == target[p])
        m.position_accuracy[p] += 1;
      else
        all = false;
    }
    exact += all;
  }
  for (auto& a : m.position_accuracy) a /= static_cast<double>(examples.size());
  m.exact_match = static_cast<double>(exact) / static_cast<double>(examples.size());
  m.min_position_accuracy = *std::min_element(m.position_accuracy.begin(), m.position_accuracy.end());
  return m;
}

TaskAccuracyTable corrected_accuracy(const ParameterSet<float>& params, const ModelConfig& cfg,
                                     std::span<const AdditionExample> examples,
                                     const model::AblationSpec* ablation,
                                     CorrectionDirection direction) {
  const auto preds = predict_all(params, cfg, examples, ablation);
  return score_predictions(cfg, examples, preds, direction);
}

std::string metrics_csv_header(int positions) {
  std::ostringstream os;
  os << "epoch,train_loss,test_loss,exact_match,min_position_accuracy";
  for (int p = 0; p < positions; ++p) os << ",pos_" << p;
  os << ",weight_norm,evaluated,probe_exact";
  return os.str();
}

std::string metrics_csv_row(const MetricsRecord& m) {
  std::ostringstream os;
  os.precision(9);
  os << m.epoch << ',' << m.train_loss << ',' << m.test_loss << ',' << m.exact_match << ','
     << m.min_position_accuracy;
  for (double a : m.position_accuracy) os << ',' << a;
  os << ',' << m.weight_norm << ',' << m.evaluated << ',' << m.probe_exact;
  return os.str();
}

data::DatasetSplit make_split(const TrainConfig& cfg) {
  cfg.validate();
  auto split = data::split(data::gen_dataset(cfg.width), cfg.split, cfg.seed);
  if (cfg.prime_k > 0)
    split = data::prime_dataset(std::move(split), cfg.prime_width, cfg.prime_k, cfg.seed);
  split.layout_width = cfg.model.width;
  return split;
}

namespace {

struct Stepper {
  const ModelConfig& mcfg;
  ParameterSet<float>& params;
  OptimizerState<float>& opt;

  // One optimizer step on `chunk`; returns the batch loss.
  float step(std::span<const AdditionExample* const> chunk, RngStream* drop) {
    const auto batch = model::make_batch(mcfg, chunk);
    Tape<float> tape(true);
    const auto bound = model::bind(tape, params, true);
    model::ForwardOptions<float> fo;
    fo.mode = model::Mode::Train;
    fo.dropout_rng = drop;
    const Var l = model::loss_on_tape(tape, bound, mcfg, batch, fo);
    const float value = tape.value(l)[0];
    if (!std::isfinite(value)) return value;
    tape.backward(l);
    std::vector<Tensor<float>> grads;
    grads.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) grads.push_back(tape.grad(bound[params.name(i)]));
    std::vector<const Tensor<float>*> gp;
    for (const auto& g : grads) gp.push_back(&g);
    auto pp = params.pointers();
    adamw_step<float>(pp, gp, opt);
    return value;
  }
};

std::vector<const AdditionExample*> pointers_of(std::span<const AdditionExample> xs) {
  std::vector<const AdditionExample*> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back(&x);
  return out;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const data::DatasetSplit& split, const fs::path& run_dir,
                  const TrainHooks& hooks) {
  cfg.validate();
  tune_allocator();
  const ModelConfig& mcfg = cfg.model;
  if (split.layout_width != 0 && split.layout_width > mcfg.width)
    throw model::ConfigError("split layout width " + std::to_string(split.layout_width) +
                             " exceeds the model width " + std::to_string(mcfg.width));
  if (split.train.empty()) throw model::ConfigError("empty training set");
  const auto log = [&](const std::string& s) {
    if (hooks.log) hooks.log(s);
  };

  auto params = model::init_params<float>(mcfg, cfg.seed);
  auto opt = make_optimizer<float>(cfg.optim, params.pointers());
  const RngStream shuffle(cfg.seed, "shuffle");
  const RngStream dropout(cfg.seed, "dropout");

  // fixed evaluation subset
  std::vector<AdditionExample> eval_set;
  if (cfg.eval_subset == 0 || cfg.eval_subset >= split.test.size()) {
    eval_set = split.test;
  } else {
    std::vector<std::size_t> idx(split.test.size());
    std::iota(idx.begin(), idx.end(), 0);
    RngStream(cfg.seed, "eval").shuffle(idx.begin(), idx.end());
    idx.resize(cfg.eval_subset);
    std::sort(idx.begin(), idx.end());
    for (auto i : idx) eval_set.push_back(split.test[i]);
  }

  std::vector<AdditionExample> probe;
  if (cfg.probe_size > 0)
    probe = data::sample_examples(cfg.probe_width, cfg.probe_size, cfg.seed ^ 0x9e3779b97f4a7c15ULL,
                                  split.train);
  const auto score = [&](int epoch) {
    auto m = evaluate(params, mcfg, eval_set);
    m.epoch = epoch;
    if (!probe.empty()) {
      EvalOptions po;
      po.compute_loss = false;
      m.probe_exact = evaluate(params, mcfg, probe, po).exact_match;
    }
    return m;
  };

  std::ofstream metrics;
  if (!run_dir.empty()) {
    fs::create_directories(run_dir / "ckpt");
    json manifest = {{"config", to_json(cfg)},
                     {"train_size", split.train.size()},
                     {"test_size", split.test.size()},
                     {"layout_width", split.layout_width},
                     {"eval_subset_size", eval_set.size()}};
    std::ostringstream ids;
    for (const auto& ex : split.train) ids << ex.a << '+' << ex.b << ';';
    manifest["train_hash"] = content_hash(ids.str());
    manifest["config_hash"] = content_hash(manifest["config"].dump());
    std::ofstream(run_dir / "manifest.json") << manifest.dump(2) << '\n';
    metrics.open(run_dir / "metrics.csv", std::ios::trunc);
    metrics << metrics_csv_header(mcfg.width) << '\n';
  }

  auto make_ckpt = [&](int epoch, bool with_opt) {
    Checkpoint ck;
    ck.config = mcfg;
    ck.params = params;
    if (with_opt) ck.optimizer = opt;
    ck.epoch = epoch;
    ck.seed = cfg.seed;
    ck.data_width = cfg.width;
    ck.rng_cursors = {{"shuffle", static_cast<std::uint64_t>(epoch)},
                      {"dropout", static_cast<std::uint64_t>(epoch)},
                      {"optimizer_step", opt.step}};
    return ck;
  };
  auto save = [&](int epoch, bool with_opt) {
    if (run_dir.empty()) return;
    save_checkpoint(make_ckpt(epoch, with_opt),
                    run_dir / "ckpt" / ("epoch_" + std::to_string(epoch) + ".bin"));
  };

  TrainResult result;
  auto record = [&](MetricsRecord m) {
    if (metrics.is_open()) metrics << metrics_csv_row(m) << '\n' << std::flush;
    if (hooks.on_epoch) hooks.on_epoch(m);
    result.history.push_back(std::move(m));
  };

  {
    auto m0 = score(0);
    m0.train_loss = std::numeric_limits<double>::quiet_NaN();
    record(m0);
    if (cfg.checkpoint_every_epoch) save(0, false);
  }

  Stepper stepper{mcfg, params, opt};
  auto order = pointers_of(split.train);
  int epoch = 0;
  for (epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    auto sh = shuffle.fork(static_cast<std::uint64_t>(epoch));
    auto drop = dropout.fork(static_cast<std::uint64_t>(epoch));
    auto sorted = pointers_of(split.train);
    sh.shuffle(sorted.begin(), sorted.end());
    order.swap(sorted);
    double loss_sum = 0;
    std::size_t seen = 0;
    for (std::size_t i = 0, b = 0; i < order.size(); i += cfg.batch, ++b) {
      const auto n = std::min(cfg.batch, order.size() - i);
      const float l = stepper.step(std::span(order).subspan(i, n), &drop);
      if (!std::isfinite(l))
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                 std::to_string(b),
                             epoch, b);
      loss_sum += static_cast<double>(l) * static_cast<double>(n);
      seen += n;
    }
    auto m = score(epoch);
    m.train_loss = loss_sum / static_cast<double>(seen);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ostringstream os;
    os.precision(4);
    os << "epoch " << epoch << " train_loss " << m.train_loss << " test_loss " << m.test_loss
       << " exact " << m.exact_match;
    if (!probe.empty()) os << " probe " << m.probe_exact;
    os << " (" << secs << " s)";
    log(os.str());
    bool stop = false;
    if (cfg.early_stop && m.exact_match >= cfg.stop_accuracy) {
      const auto full = eval_set.size() == split.test.size() ? m : evaluate(params, mcfg, split.test);
      log("full test exact-match " + std::to_string(full.exact_match));
      stop = full.exact_match >= cfg.stop_accuracy;
    }
    record(m);
    const bool periodic = cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0;
    if (periodic || cfg.checkpoint_every_epoch) save(epoch, periodic);
    if (stop) {
      result.converged = true;
      break;
    }
  }
  result.stop_epoch = std::min(epoch, cfg.epochs);
  result.final_metrics = evaluate(params, mcfg, split.test);
  result.final_metrics.epoch = result.stop_epoch;
  result.final_checkpoint = make_ckpt(result.stop_epoch, true);
  if (!run_dir.empty()) {
    save_checkpoint(result.final_checkpoint, run_dir / "ckpt" / "final.bin");
    json fin = {{"stop_epoch", result.stop_epoch},
                {"converged", result.converged},
                {"test_exact_match", result.final_metrics.exact_match},
                {"test_loss", result.final_metrics.test_loss},
                {"position_accuracy", result.final_metrics.position_accuracy},
                {"weight_norm", result.final_metrics.weight_norm},
                {"table", to_json(result.final_metrics.table)}};
    std::ofstream(run_dir / "final.json") << fin.dump(2) << '\n';
  }
  return result;
}

FinetuneResult finetune(const Checkpoint& start, std::span<const AdditionExample> extra, int epochs,
                        std::size_t batch, std::uint64_t seed) {
  if (epochs < 0) throw model::ConfigError("epochs must be non-negative");
  if (batch == 0) throw model::ConfigError("batch size must be positive");
  for (const auto& ex : extra)
    if (ex.width > start.config.width)
      throw model::ConfigError("finetuning sum of width " + std::to_string(ex.width) +
                               " does not fit the checkpoint sequence width " +
                               std::to_string(start.config.width));
  FinetuneResult r;
  r.checkpoint = start;
  r.weight_norm_before = weight_norm(start.params);
  if (epochs == 0 || extra.empty()) {
    r.weight_norm_after = r.weight_norm_before;
    return r;
  }
  if (!r.checkpoint.optimizer) throw CheckpointError("checkpoint carries no optimizer state");
  auto& ck = r.checkpoint;
  Stepper stepper{ck.config, ck.params, *ck.optimizer};
  const RngStream shuffle(seed, "finetune-shuffle");
  const RngStream dropout(seed, "finetune-dropout");
  auto order = pointers_of(extra);
  for (int e = 1; e <= epochs; ++e) {
    auto sh = shuffle.fork(static_cast<std::uint64_t>(e));
    auto drop = dropout.fork(static_cast<std::uint64_t>(e));
    sh.shuffle(order.begin(), order.end());
    double sum = 0;
    for (std::size_t i = 0, b = 0; i < order.size(); i += batch, ++b) {
      const auto n = std::min(batch, order.size() - i);
      const float l = stepper.step(std::span(order).subspan(i, n), &drop);
      if (!std::isfinite(l))
        throw NumericalError("non-finite loss while finetuning at epoch " + std::to_string(e), e, b);
      sum += static_cast<double>(l) * static_cast<double>(n);
    }
    r.epoch_loss.push_back(sum / static_cast<double>(order.size()));
  }
  ck.epoch += epochs;
  r.weight_norm_after = weight_norm(ck.params);
  return r;
}

}  // namespace carry::training
