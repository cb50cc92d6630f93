#include <iostream>

#include "cli.hpp"

namespace carry::cli {

namespace {

struct AblateOpts {
  std::string ckpt;
  std::string target;
  bool corrected = false;
  std::string examples = "test";
  std::size_t limit = 0;
  std::uint64_t seed = 0;
  std::string out;
};

// Digit errors of the ablated model; `unit` counts errors of exactly +-1 mod 10.
struct ErrorSummary {
  std::size_t examples = 0;
  std::size_t wrong_digits = 0;
  std::size_t unit = 0;
  std::string rows;
};

ErrorSummary digit_errors(const training::Checkpoint& ck,
                          std::span<const data::AdditionExample> examples,
                          const model::AblationSpec& spec) {
  const auto pred = training::predict_all(ck.params, ck.config, examples, &spec);
  const auto w = static_cast<std::size_t>(ck.config.width);
  ErrorSummary s;
  s.examples = examples.size();
  s.rows = "a,b,task,position,target,predicted,delta\n";
  for (std::size_t e = 0; e < examples.size(); ++e) {
    const auto& ex = examples[e];
    const auto target = data::digits_of(ex.a + ex.b, ck.config.width);
    for (std::size_t p = 0; p < w; ++p) {
      const int got = pred[e * w + p];
      if (got == target[p]) continue;
      const int delta = (got - target[p] + 10) % 10;
      ++s.wrong_digits;
      if (delta == 1 || delta == 9) ++s.unit;
      s.rows += std::to_string(ex.a) + ',' + std::to_string(ex.b) + ",\"" + ex.task.name() + "\"," +
                std::to_string(p) + ',' + std::to_string(target[p]) + ',' + std::to_string(got) +
                ',' + std::to_string(delta <= 5 ? delta : delta - 10) + '\n';
    }
  }
  return s;
}

}  // namespace

void add_ablate(CLI::App& app, Context& ctx) {
  auto* cmd = app.add_subcommand("ablate", "Accuracy per task and position under an ablation");
  auto o = std::make_shared<AblateOpts>();
  cmd->add_option("--ckpt", o->ckpt, "Checkpoint file")->required();
  cmd->add_option("--target", o->target,
                  "head:L:H | mlp:L | neurons:file.json | skip:L | head:auto, comma separated")
      ->required();
  cmd->add_flag("--corrected", o->corrected, "Also report accuracy after the +-1 correction");
  cmd->add_option("--examples", o->examples, "test | train | all | sample:W:N | file.csv")
      ->capture_default_str();
  cmd->add_option("--limit", o->limit, "Random subset size (0 keeps all)")->capture_default_str();
  cmd->add_option("--seed", o->seed, "Seed for subsets and samples")->capture_default_str();
  cmd->add_option("--out", o->out, "Output CSV (default <run>/ablate/<target>.csv)");
  cmd->callback([o, &ctx] {
    RunManifest man(ctx, "ablate");
    man.set_config({{"ckpt", o->ckpt},
                    {"target", o->target},
                    {"corrected", o->corrected},
                    {"examples", o->examples},
                    {"limit", o->limit}});
    man.add_seed(o->seed);
    if (ctx.dry_run) {
      std::cout << man.to_json()["config"].dump(2) << '\n';
      return;
    }
    const auto ck = training::load_checkpoint(o->ckpt);
    const auto examples = load_examples(o->examples, o->ckpt, ck, o->limit, o->seed);
    man.add_input(o->ckpt);

    std::string target = o->target;
    json extra = json::object();
    if (const auto pos = target.find("head:auto"); pos != std::string::npos) {
      const auto dh = interp::identify_decision_head(ck.params, ck.config, examples);
      const auto resolved = "head:" + std::to_string(dh.layer) + ":" + std::to_string(dh.head);
      target.replace(pos, 9, resolved);
      json cands = json::array();
      for (const auto& c : dh.candidates)
        cands.push_back({{"layer", c.layer}, {"head", c.head}, {"exact_match", c.exact_match},
                         {"degradation", c.degradation}});
      extra["decision_head"] = {{"layer", dh.layer},   {"head", dh.head},
                                {"baseline_exact", dh.baseline_exact},
                                {"candidates", cands}, {"tied", dh.tied}};
      log("decision head resolved to " + resolved);
    }
    const auto spec = parse_targets(target, ck.config);
    const auto table =
        training::corrected_accuracy(ck.params, ck.config, examples, &spec);
    const auto errors = digit_errors(ck, examples, spec);

    const fs::path out = o->out.empty()
                             ? run_dir_of(o->ckpt) / "ablate" /
                                   (sanitize(o->target) + (o->corrected ? "_corrected" : "") + ".csv")
                             : fs::path(o->out);
    const auto stem = out.parent_path() / out.stem();
    write_text(out, table_csv(table, o->corrected));
    write_text(stem.string() + "_errors.csv", errors.rows);
    double exact = 0;
    for (std::size_t g = 0; g < table.groups.size(); ++g)
      exact += table.exact[g] * static_cast<double>(table.counts[g]);
    exact /= static_cast<double>(examples.size());
    json summary = {{"target", target},
                    {"examples", examples.size()},
                    {"exact_match", exact},
                    {"wrong_digits", errors.wrong_digits},
                    {"unit_errors", errors.unit},
                    {"unit_error_fraction",
                     errors.wrong_digits ? static_cast<double>(errors.unit) /
                                               static_cast<double>(errors.wrong_digits)
                                         : 1.0},
                    {"table", to_json(table)}};
    summary.update(extra);
    write_text(stem.string() + ".json", summary.dump(2) + "\n");
    std::cout << "ablation " << target << " on " << examples.size() << " examples, exact match "
              << exact << "\n"
              << format_table(table, o->corrected);
    man.add_output(out);
    man.add_output(stem.string() + "_errors.csv");
    man.add_output(stem.string() + ".json");
    man.write_to(stem.string() + "_manifest.json");
  });
}

}  // namespace carry::cli
