#include <iostream>
#include <sstream>

#include "cli.hpp"

namespace carry::cli {

void add_gen(CLI::App& app, Context& ctx) {
  auto* cmd = app.add_subcommand("gen", "Enumerate the addition dataset as CSV");
  struct Opts {
    int width = 3;
    std::string out = "data/addition.csv";
    double max_examples = 1e8;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--width", o->width, "Digits per operand")->capture_default_str();
  cmd->add_option("--out", o->out, "Output CSV path")->capture_default_str();
  cmd->add_option("--max-examples", o->max_examples, "Refuse larger enumerations")
      ->capture_default_str();
  cmd->callback([o, &ctx] {
    RunManifest man(ctx, "gen");
    man.set_config({{"width", o->width}, {"out", o->out}, {"max_examples", o->max_examples}});
    if (ctx.dry_run) {
      std::cout << man.to_json()["config"].dump(2) << '\n';
      return;
    }
    const auto cap = static_cast<std::uint64_t>(o->max_examples);
    const auto rows = data::gen_dataset(o->width, cap);
    if (const auto parent = fs::path(o->out).parent_path(); !parent.empty()) fs::create_directories(parent);
    data::write_csv(o->out, rows);
    log("wrote " + std::to_string(rows.size()) + " examples to " + o->out);
    man.add_output(o->out);
    const auto dir = fs::path(o->out).parent_path();
    man.write(dir.empty() ? fs::path(".") : dir);
  });
}

namespace {

struct TrainOpts {
  int width = 3;
  int layers = 2;
  int dmodel = 128;
  int dff = 128;
  int heads = 2;
  double split = 0.3;
  double wd = 0.2;
  double lr = 1.4e-4;
  std::size_t batch = 0;
  int epochs = 1000;
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds;
  bool decoder = false;
  std::size_t prime_k = 0;
  int prime_width = 0;
  int layout_width = 0;
  int ckpt_every = 10;
  bool every_epoch = false;
  bool no_early_stop = false;
  std::size_t eval_subset = 20000;
  double dropout = 0.1;
  std::string placement = "attn_mlp";
  bool no_biases = false;
  std::size_t probe_size = 0;
  int probe_width = 0;
  std::string out = "runs/train";
};

training::TrainConfig resolve(const TrainOpts& o, std::uint64_t seed) {
  training::TrainConfig c;
  c.width = o.width;
  c.model.n_layers = o.layers;
  c.model.d_model = o.dmodel;
  c.model.d_ff = o.dff;
  c.model.n_heads = o.heads;
  c.model.dropout = o.dropout;
  c.model.dropout_placement = model::placement_from_name(o.placement);
  c.model.causal = o.decoder;
  c.model.biases = !o.no_biases;
  c.model.width = o.layout_width > 0 ? o.layout_width : std::max(o.width, o.prime_width);
  c.split = o.split;
  c.optim.lr = o.lr;
  c.optim.weight_decay = o.wd;
  c.batch = o.batch > 0 ? o.batch : (o.width == 4 ? 8192 : 1024);
  c.epochs = o.epochs;
  c.seed = seed;
  c.prime_k = o.prime_k;
  c.prime_width = o.prime_width;
  c.checkpoint_every = o.ckpt_every;
  c.checkpoint_every_epoch = o.every_epoch;
  c.early_stop = !o.no_early_stop;
  c.eval_subset = o.eval_subset;
  c.probe_size = o.probe_size;
  c.probe_width = o.probe_width;
  c.validate();
  return c;
}

}  // namespace

void add_train(CLI::App& app, Context& ctx) {
  auto* cmd = app.add_subcommand("train", "Train a model; writes a run directory");
  auto o = std::make_shared<TrainOpts>();
  cmd->add_option("--width", o->width, "Digits per operand of the training sums")
      ->capture_default_str();
  cmd->add_option("--layers", o->layers)->capture_default_str();
  cmd->add_option("--dmodel", o->dmodel)->capture_default_str();
  cmd->add_option("--dff", o->dff)->capture_default_str();
  cmd->add_option("--heads", o->heads)->capture_default_str();
  cmd->add_option("--split", o->split, "Train fraction")->capture_default_str();
  cmd->add_option("--wd", o->wd, "AdamW weight decay")->capture_default_str();
  cmd->add_option("--lr", o->lr, "Learning rate")->capture_default_str();
  cmd->add_option("--batch", o->batch, "Batch size (0: 1024, or 8192 for width 4)")
      ->capture_default_str();
  cmd->add_option("--epochs", o->epochs)->capture_default_str();
  cmd->add_option("--seed", o->seed)->capture_default_str();
  cmd->add_option("--seeds", o->seeds, "Several seeds; one sub-directory each")->delimiter(',');
  cmd->add_flag("--decoder", o->decoder, "Decoder-only (causal) model");
  cmd->add_option("--prime-k", o->prime_k, "Number of longer priming sums")->capture_default_str();
  cmd->add_option("--prime-width", o->prime_width)->capture_default_str();
  cmd->add_option("--layout-width", o->layout_width, "Pad sequences to this width")
      ->capture_default_str();
  cmd->add_option("--ckpt-every", o->ckpt_every, "Checkpoint cadence in epochs")
      ->capture_default_str();
  cmd->add_flag("--every-epoch", o->every_epoch, "Also write weights after every epoch");
  cmd->add_flag("--no-early-stop", o->no_early_stop, "Train for all epochs");
  cmd->add_option("--eval-subset", o->eval_subset, "Test examples scored per epoch (0: all)")
      ->capture_default_str();
  cmd->add_option("--dropout", o->dropout)->capture_default_str();
  cmd->add_option("--dropout-placement", o->placement, "attn_mlp | residual | both | none")
      ->capture_default_str();
  cmd->add_flag("--no-biases", o->no_biases);
  cmd->add_option("--probe-size", o->probe_size, "Sampled sums scored per epoch at --probe-width")
      ->capture_default_str();
  cmd->add_option("--probe-width", o->probe_width)->capture_default_str();
  cmd->add_option("--out", o->out, "Run directory")->capture_default_str();
  cmd->callback([o, &ctx] {
    std::vector<std::uint64_t> seeds = o->seeds.empty() ? std::vector{o->seed} : o->seeds;
    for (std::size_t i = 0; i < seeds.size(); ++i)
      for (std::size_t j = i + 1; j < seeds.size(); ++j)
        if (seeds[i] == seeds[j]) throw UsageError("seeds must be distinct");
    for (auto seed : seeds) {
      const auto cfg = resolve(*o, seed);
      const fs::path dir =
          o->seeds.empty() ? fs::path(o->out) : fs::path(o->out) / ("seed_" + std::to_string(seed));
      RunManifest man(ctx, "train");
      man.set_config(to_json(cfg));
      man.add_seed(seed);
      if (ctx.dry_run) {
        std::cout << to_json(cfg).dump(2) << '\n';
        continue;
      }
      log("building dataset for seed " + std::to_string(seed));
      const auto split = training::make_split(cfg);
      log("train " + std::to_string(split.train.size()) + ", test " +
          std::to_string(split.test.size()));
      training::TrainHooks hooks;
      hooks.log = [](const std::string& s) { log(s); };
      const auto res = training::train(cfg, split, dir, hooks);
      log("stopped at epoch " + std::to_string(res.stop_epoch) + ", test exact-match " +
          std::to_string(res.final_metrics.exact_match));
      for (const char* f : {"manifest.json", "metrics.csv", "final.json"}) man.add_output(dir / f);
      man.write(dir);
    }
  });
}

void add_finetune(CLI::App& app, Context& ctx) {
  auto* cmd = app.add_subcommand("finetune", "Continue training a checkpoint on a few longer sums");
  struct Opts {
    std::string ckpt;
    std::string extra = "6/500";
    int epochs = 50;
    std::size_t batch = 1024;
    std::uint64_t seed = 0;
    std::size_t eval_size = 10000;
    std::string out = "runs/finetune";
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--ckpt", o->ckpt, "Checkpoint file")->required();
  cmd->add_option("--extra", o->extra, "width/count of sampled finetuning sums")
      ->capture_default_str();
  cmd->add_option("--epochs", o->epochs)->capture_default_str();
  cmd->add_option("--batch", o->batch)->capture_default_str();
  cmd->add_option("--seed", o->seed)->capture_default_str();
  cmd->add_option("--eval-size", o->eval_size, "Sums sampled per width for the report")
      ->capture_default_str();
  cmd->add_option("--out", o->out)->capture_default_str();
  cmd->callback([o, &ctx] {
    const auto slash = o->extra.find('/');
    if (slash == std::string::npos) throw UsageError("--extra expects width/count, e.g. 6/500");
    const int width = std::stoi(o->extra.substr(0, slash));
    const auto count = static_cast<std::size_t>(std::stoull(o->extra.substr(slash + 1)));
    RunManifest man(ctx, "finetune");
    man.set_config({{"ckpt", o->ckpt},
                    {"extra_width", width},
                    {"extra_count", count},
                    {"epochs", o->epochs},
                    {"batch", o->batch},
                    {"seed", o->seed}});
    man.add_seed(o->seed);
    if (ctx.dry_run) {
      std::cout << man.to_json()["config"].dump(2) << '\n';
      return;
    }
    man.add_input(o->ckpt);
    const auto start = training::load_checkpoint(o->ckpt);
    if (width > start.config.width)
      throw UsageError("checkpoint layout width " + std::to_string(start.config.width) +
                       " cannot hold " + std::to_string(width) + "-digit sums");
    const auto extra = data::sample_examples(width, count, o->seed);
    const auto res = training::finetune(start, extra, o->epochs, o->batch, o->seed);
    const fs::path dir(o->out);
    training::save_checkpoint(res.checkpoint, dir / "ckpt" / "final.bin");

    json report = {{"weight_norm_before", res.weight_norm_before},
                   {"weight_norm_after", res.weight_norm_after},
                   {"weight_norm_relative_change",
                    res.weight_norm_before > 0
                        ? (res.weight_norm_after - res.weight_norm_before) / res.weight_norm_before
                        : 0.0},
                   {"epoch_loss", res.epoch_loss}};
    for (int w : {start.data_width, width}) {
      const auto probe = data::sample_examples(w, o->eval_size, o->seed + 1, extra);
      training::EvalOptions eo;
      eo.compute_loss = false;
      const double before = training::evaluate(start.params, start.config, probe, eo).exact_match;
      const double after =
          training::evaluate(res.checkpoint.params, res.checkpoint.config, probe, eo).exact_match;
      report["exact_match_" + std::to_string(w) + "_digit"] = {{"before", before}, {"after", after}};
      log(std::to_string(w) + "-digit exact-match " + std::to_string(before) + " -> " +
          std::to_string(after));
    }
    write_text(dir / "finetune.json", report.dump(2) + "\n");
    man.add_output(dir / "ckpt" / "final.bin");
    man.add_output(dir / "finetune.json");
    man.write(dir);
  });
}

}  // namespace carry::cli
