#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "cli.hpp"

namespace carry::cli {

namespace {

struct Shared {
  std::string ckpt;
  std::string examples = "test";
  std::size_t limit = 0;
  std::uint64_t seed = 0;
  std::string out;
  std::string target;
};

void add_shared(CLI::App* cmd, Shared& s, std::size_t default_limit) {
  s.limit = default_limit;
  cmd->add_option("--ckpt", s.ckpt, "Checkpoint file")->required();
  cmd->add_option("--examples", s.examples, "test | train | all | sample:W:N | file.csv")
      ->capture_default_str();
  cmd->add_option("--limit", s.limit, "Random subset size (0 keeps all)")->capture_default_str();
  cmd->add_option("--seed", s.seed, "Seed for subsets and samples")->capture_default_str();
  cmd->add_option("--out", s.out, "Output directory (default <run>/analysis/<name>)");
}

json shared_json(const Shared& s) {
  return {{"ckpt", s.ckpt}, {"examples", s.examples}, {"limit", s.limit}, {"target", s.target}};
}

// Loaded checkpoint, examples and output directory for one analysis.
struct Job {
  training::Checkpoint ck;
  std::vector<data::AdditionExample> examples;
  std::optional<model::AblationSpec> ablation;
  fs::path out;

  const model::AblationSpec* spec() const { return ablation ? &*ablation : nullptr; }
};

Job open_job(const Shared& s, const std::string& name, RunManifest& man) {
  Job j;
  j.ck = training::load_checkpoint(s.ckpt);
  j.examples = load_examples(s.examples, s.ckpt, j.ck, s.limit, s.seed);
  if (!s.target.empty()) j.ablation = parse_targets(s.target, j.ck.config);
  j.out = s.out.empty() ? run_dir_of(s.ckpt) / "analysis" / name : fs::path(s.out);
  fs::create_directories(j.out);
  man.add_input(s.ckpt);
  man.add_seed(s.seed);
  return j;
}

void emit(RunManifest& man, const fs::path& p, const std::string& text) {
  write_text(p, text);
  man.add_output(p);
}

// Runs `body` unless --dry-run, in which case the resolved config is printed.
template <typename Fn>
void guarded(Context& ctx, RunManifest& man, Fn&& body) {
  if (ctx.dry_run) {
    std::cout << man.to_json()["config"].dump(2) << '\n';
    return;
  }
  body();
}

std::string csv_quote(const std::string& s) {
  return s.find_first_of(",\"") == std::string::npos ? s : "\"" + s + "\"";
}

// ---------------------------------------------------------------- attention

void add_attention(CLI::App* parent, Context& ctx) {
  auto* cmd = parent->add_subcommand("attention", "Mean attention maps per task or carry pattern");
  struct Opts {
    Shared s;
    std::string group_by = "task";
  };
  auto o = std::make_shared<Opts>();
  add_shared(cmd, o->s, 0);
  cmd->add_option("--group-by", o->group_by, "task | pattern")
      ->check(CLI::IsMember({"task", "pattern"}))
      ->capture_default_str();
  cmd->add_option("--target", o->s.target, "Optional ablation during the forward pass");
  cmd->callback([o, &ctx] {
    RunManifest man(ctx, "analyze_attention");
    auto cfg = shared_json(o->s);
    cfg["group_by"] = o->group_by;
    man.set_config(cfg);
    guarded(ctx, man, [&] {
      auto job = open_job(o->s, "attention", man);
      const auto& mc = job.ck.config;
      const auto summary = interp::attention_summary(
          job.ck.params, mc, job.examples,
          o->group_by == "task" ? interp::GroupBy::Task : interp::GroupBy::Pattern, job.spec());

      json j = {{"layers", summary.layers}, {"heads", summary.heads}, {"seq", summary.seq},
                {"groups", json::array()}};
      std::vector<interp::HeatmapPanel> panels;
      std::ostringstream csv;
      csv << "group,count,layer,head,row,col,mean,variance\n";
      for (const auto& g : summary.groups) {
        json gj = {{"name", g.name}, {"count", g.count}, {"maps", json::array()}};
        for (int l = 0; l < summary.layers; ++l)
          for (int h = 0; h < summary.heads; ++h) {
            const auto slot = static_cast<std::size_t>(l * summary.heads + h);
            const auto& m = g.mean[slot];
            const auto& v = g.variance[slot];
            json rows = json::array();
            for (std::size_t r = 0; r < m.dim(0); ++r) {
              json row = json::array();
              for (std::size_t c = 0; c < m.dim(1); ++c) {
                row.push_back(m.at(r, c));
                csv << csv_quote(g.name) << ',' << g.count << ',' << l << ',' << h << ',' << r << ','
                    << c << ',' << m.at(r, c) << ',' << v.at(r, c) << '\n';
              }
              rows.push_back(row);
            }
            gj["maps"].push_back({{"layer", l}, {"head", h}, {"mean", rows}});
            panels.push_back({g.name + " L" + std::to_string(l) + "H" + std::to_string(h), m});
          }
        j["groups"].push_back(gj);
      }
      json scores = json::array();
      std::ostringstream sc;
      sc << "layer,head,staircase\n";
      for (const auto& s : interp::staircase_scores(summary)) {
        scores.push_back({{"layer", s.layer}, {"head", s.head}, {"score", s.score}});
        sc << s.layer << ',' << s.head << ',' << s.score << '\n';
      }
      j["staircase"] = scores;
      const auto labels = position_labels(mc);
      emit(man, job.out / "attention.json", j.dump(1) + "\n");
      emit(man, job.out / "attention.csv", csv.str());
      emit(man, job.out / "staircase.csv", sc.str());
      emit(man, job.out / "attention.svg",
           interp::heatmap_svg(panels, summary.layers * summary.heads, 0.0, 1.0, labels));
      std::cout << sc.str();
      man.write(job.out);
    });
  });
}

// ---------------------------------------------------------------------- pca

void add_pca(CLI::App* parent, Context& ctx) {
  auto* cmd = parent->add_subcommand("pca", "PCA of one residual-stream block at one position");
  struct Opts {
    Shared s;
    int layer = 1;
    std::string block = "attn";
    int pos = 7;
    int k = 2;
    std::string labels = "task";
  };
  auto o = std::make_shared<Opts>();
  add_shared(cmd, o->s, 0);
  cmd->add_option("--layer", o->layer, "Layer index")->capture_default_str();
  cmd->add_option("--block", o->block, "resid_pre | attn | resid_mid | mlp | resid_post")
      ->capture_default_str();
  cmd->add_option("--pos", o->pos, "Sequence position")->capture_default_str();
  cmd->add_option("--k", o->k, "Number of components")->capture_default_str();
  cmd->add_option("--labels", o->labels, "Scatter colouring: task | carry | digit | naive")
      ->check(CLI::IsMember({"task", "carry", "digit", "naive"}))
      ->capture_default_str();
  cmd->add_option("--target", o->s.target, "Optional ablation during the forward pass");
  cmd->callback([o, &ctx] {
    RunManifest man(ctx, "analyze_pca");
    auto cfg = shared_json(o->s);
    cfg.update({{"layer", o->layer}, {"block", o->block}, {"pos", o->pos}, {"k", o->k},
                {"labels", o->labels}});
    man.set_config(cfg);
    guarded(ctx, man, [&] {
      interp::Block block;
      try {
        block = interp::block_from_name(o->block);
      } catch (const interp::InterpError& e) {
        throw UsageError(e.what());
      }
      auto job = open_job(o->s, "pca", man);
      const auto r = interp::residual_pca(job.ck.params, job.ck.config, job.examples, o->layer,
                                          block, o->pos, o->k, job.spec());
      const auto tag = "L" + std::to_string(o->layer) + "_" + o->block + "_p" + std::to_string(o->pos);
      std::ostringstream csv;
      csv << "a,b,task,answer_digit,naive_sum_digit,carry_needed";
      for (int c = 0; c < o->k; ++c) csv << ",pc" << c + 1;
      csv << '\n';
      std::vector<std::string> labels;
      std::vector<std::vector<double>> xy;
      std::vector<int> y;
      for (std::size_t i = 0; i < job.examples.size(); ++i) {
        const auto& ex = job.examples[i];
        csv << ex.a << ',' << ex.b << ',' << csv_quote(r.task[i]) << ',' << r.answer_digit[i] << ','
            << r.naive_sum_digit[i] << ',' << (r.carry_needed[i] ? 1 : 0);
        for (double v : r.projected[i]) csv << ',' << v;
        csv << '\n';
        if (o->labels == "task") labels.push_back(r.task[i]);
        else if (o->labels == "carry") labels.push_back(r.carry_needed[i] ? "carry" : "no carry");
        else if (o->labels == "digit") labels.push_back(std::to_string(r.answer_digit[i]));
        else labels.push_back(std::to_string(r.naive_sum_digit[i]));
        xy.push_back({r.projected[i][0], o->k > 1 ? r.projected[i][1] : 0.0});
        y.push_back(r.carry_needed[i] ? 1 : -1);
      }
      json j = {{"layer", r.layer},       {"block", o->block},          {"position", r.position},
                {"explained", r.explained}, {"components", r.components}, {"mean", r.mean},
                {"examples", job.examples.size()}};
      const bool both = std::count(y.begin(), y.end(), 1) > 0 && std::count(y.begin(), y.end(), -1) > 0;
      if (both) {
        const auto clf = interp::fit_linear_svm(xy, y, o->s.seed);
        j["carry_separability"] = {{"accuracy", clf.accuracy(xy, y)}, {"w", clf.w}, {"b", clf.b}};
      }
      emit(man, job.out / (tag + ".csv"), csv.str());
      emit(man, job.out / (tag + ".json"), j.dump(2) + "\n");
      emit(man, job.out / (tag + ".svg"),
           interp::scatter_svg(xy, labels, "layer " + std::to_string(o->layer) + " " + o->block +
                                               ", position " + std::to_string(o->pos)));
      std::cout << "explained variance";
      for (double e : r.explained) std::cout << ' ' << e;
      if (both) std::cout << "\ncarry separability " << j["carry_separability"]["accuracy"];
      std::cout << '\n';
      man.write_to(job.out / (tag + "_manifest.json"));
    });
  });
}

// ------------------------------------------------------------------ dissect

void add_dissect(CLI::App* parent, Context& ctx) {
  auto* cmd = parent->add_subcommand("dissect", "Select carry neurons of the final MLP and ablate them");
  struct Opts {
    Shared s;
    std::string stat = "post";
    std::string positions = "carry";
    double margin = 0;
  };
  auto o = std::make_shared<Opts>();
  add_shared(cmd, o->s, 0);
  cmd->add_option("--stat", o->stat, "post | pre activation statistic")
      ->check(CLI::IsMember({"post", "pre"}))
      ->capture_default_str();
  cmd->add_option("--positions", o->positions, "carry | all output positions for carry tasks")
      ->check(CLI::IsMember({"carry", "all"}))
      ->capture_default_str();
  cmd->add_option("--margin", o->margin, "Required excess over the no-carry mean")
      ->capture_default_str();
  cmd->callback([o, &ctx] {
    RunManifest man(ctx, "analyze_dissect");
    auto cfg = shared_json(o->s);
    cfg.update({{"stat", o->stat}, {"positions", o->positions}, {"margin", o->margin}});
    man.set_config(cfg);
    guarded(ctx, man, [&] {
      auto job = open_job(o->s, "dissect", man);
      interp::NeuronSelectionOptions opt;
      opt.stat = o->stat == "post" ? interp::NeuronStat::Post : interp::NeuronStat::Pre;
      opt.positions = o->positions == "carry" ? interp::NeuronPositions::CarryPositions
                                              : interp::NeuronPositions::AllOutputs;
      opt.margin = o->margin;
      const auto sel = interp::select_carry_neurons(job.ck.params, job.ck.config, job.examples, opt);
      const auto spec = model::AblationSpec::neurons(sel.layer, sel.indices);
      const auto table = training::corrected_accuracy(job.ck.params, job.ck.config, job.examples, &spec);
      json j = {{"layer", sel.layer},
                {"indices", sel.indices},
                {"count", sel.indices.size()},
                {"tasks", sel.tasks},
                {"task_rows", sel.task_rows},
                {"task_means", sel.task_means},
                {"options", cfg},
                {"ablation", to_json(table)}};
      emit(man, job.out / "neurons.json", j.dump(1) + "\n");
      emit(man, job.out / "ablation.csv", table_csv(table, true));
      if (!sel.indices.empty()) {
        Tensor<double> heat({sel.tasks.size(), sel.indices.size()});
        double hi = 0;
        for (std::size_t t = 0; t < sel.tasks.size(); ++t)
          for (std::size_t n = 0; n < sel.indices.size(); ++n) {
            heat.at(t, n) = sel.task_means[t][static_cast<std::size_t>(sel.indices[n])];
            hi = std::max(hi, heat.at(t, n));
          }
        std::vector<interp::HeatmapPanel> panels{{"selected neuron means per task", heat}};
        emit(man, job.out / "neurons.svg", interp::heatmap_svg(panels, 1, 0.0, hi > 0 ? hi : 1.0));
      }
      std::cout << sel.indices.size() << " neurons selected in layer " << sel.layer << "\n"
                << format_table(table, true);
      man.write(job.out);
    });
  });
}

// ---------------------------------------------------------------------- svd

void add_svd(CLI::App* parent, Context& ctx) {
  auto* cmd = parent->add_subcommand("svd", "SVD of final-layer MLP pre-activations");
  struct Opts {
    Shared s;
    int top = 20;
  };
  auto o = std::make_shared<Opts>();
  add_shared(cmd, o->s, 0);
  cmd->add_option("--top", o->top, "Neurons listed by weight on the leading axes")
      ->capture_default_str();
  cmd->callback([o, &ctx] {
    RunManifest man(ctx, "analyze_svd");
    auto cfg = shared_json(o->s);
    cfg["top"] = o->top;
    man.set_config(cfg);
    guarded(ctx, man, [&] {
      auto job = open_job(o->s, "svd", man);
      const auto r = interp::svd_dissection(job.ck.params, job.ck.config, job.examples, o->top);
      std::ostringstream nc;
      nc << "neuron,v1,v2\n";
      std::vector<std::vector<double>> pts;
      std::vector<std::string> labels;
      const std::set<int> top(r.top.begin(), r.top.end());
      for (std::size_t n = 0; n < r.neuron.size(); ++n) {
        nc << n << ',' << r.neuron[n][0] << ',' << r.neuron[n][1] << '\n';
        pts.push_back({r.neuron[n][0], r.neuron[n][1]});
        labels.push_back(top.count(static_cast<int>(n)) ? "top" : "other");
      }
      std::ostringstream ac;
      ac << "task,position,u1,u2\n";
      for (std::size_t t = 0; t < r.tasks.size(); ++t)
        for (std::size_t p = 0; p < r.activity[t].size(); ++p)
          ac << csv_quote(r.tasks[t]) << ',' << p << ',' << r.activity[t][p][0] << ','
             << r.activity[t][p][1] << '\n';
      json j = {{"singular_values", r.singular_values}, {"explained", r.explained}, {"top", r.top},
                {"tasks", r.tasks}};
      emit(man, job.out / "svd.json", j.dump(2) + "\n");
      emit(man, job.out / "svd_neurons.csv", nc.str());
      emit(man, job.out / "svd_activity.csv", ac.str());
      emit(man, job.out / "svd_neurons.svg",
           interp::scatter_svg(pts, labels, "neuron loadings on the two leading right vectors"));
      std::cout << "leading explained variance";
      for (std::size_t i = 0; i < std::min<std::size_t>(4, r.explained.size()); ++i)
        std::cout << ' ' << r.explained[i];
      std::cout << '\n';
      man.write(job.out);
    });
  });
}

// ------------------------------------------------------------------- squash

void add_squash(CLI::App* parent, Context& ctx) {
  auto* cmd = parent->add_subcommand("squash", "Spread of residual overlaps before and after the final MLP");
  struct Opts {
    Shared s;
    std::size_t max_group = 200;
  };
  auto o = std::make_shared<Opts>();
  add_shared(cmd, o->s, 0);
  cmd->add_option("--max-group", o->max_group, "Examples per answer group")->capture_default_str();
  cmd->callback([o, &ctx] {
    RunManifest man(ctx, "analyze_squash");
    auto cfg = shared_json(o->s);
    cfg["max_group"] = o->max_group;
    man.set_config(cfg);
    guarded(ctx, man, [&] {
      auto job = open_job(o->s, "squash", man);
      const auto r = interp::squashing_ratio(job.ck.params, job.ck.config, job.examples, o->max_group);
      std::ostringstream csv;
      csv << "position,ratio,groups\n";
      json ratios = json::array();
      for (std::size_t i = 0; i < r.positions.size(); ++i) {
        csv << r.positions[i] << ',';
        if (r.ratio[i]) csv << *r.ratio[i];
        csv << ',' << r.groups_used[i] << '\n';
        ratios.push_back(r.ratio[i] ? json(*r.ratio[i]) : json(nullptr));
      }
      json j = {{"positions", r.positions},
                {"ratio", ratios},
                {"groups_used", r.groups_used},
                {"group_definition", r.group_definition}};
      emit(man, job.out / "squash.csv", csv.str());
      emit(man, job.out / "squash.json", j.dump(2) + "\n");
      std::cout << csv.str();
      man.write(job.out);
    });
  });
}

// ------------------------------------------------------------- checkerboard

void add_checkerboard(CLI::App* parent, Context& ctx) {
  auto* cmd = parent->add_subcommand("checkerboard", "Cosine similarity of final residuals sorted by carry pattern");
  struct Opts {
    Shared s;
    std::string group;
  };
  auto o = std::make_shared<Opts>();
  add_shared(cmd, o->s, 400);
  cmd->add_option("--group", o->group, "Restrict to one task group (default all)");
  cmd->add_option("--target", o->s.target, "Optional ablation during the forward pass");
  cmd->callback([o, &ctx] {
    RunManifest man(ctx, "analyze_checkerboard");
    auto cfg = shared_json(o->s);
    cfg["group"] = o->group;
    man.set_config(cfg);
    guarded(ctx, man, [&] {
      auto job = open_job(o->s, "checkerboard", man);
      if (!o->group.empty()) {
        std::erase_if(job.examples, [&](const auto& ex) { return ex.task.name() != o->group; });
        if (job.examples.empty()) throw UsageError("no examples in group '" + o->group + "'");
      }
      const auto r = interp::cosine_checkerboard(job.ck.params, job.ck.config, job.examples, job.spec());
      std::ostringstream csv;
      csv << "index,a,b,pattern\n";
      for (std::size_t i = 0; i < r.order.size(); ++i) {
        const auto& ex = job.examples[r.order[i]];
        csv << i << ',' << ex.a << ',' << ex.b << ',' << r.patterns[i] << '\n';
      }
      const auto tag = sanitize(o->s.target.empty() ? std::string("intact") : o->s.target);
      json j = {{"statistic", r.statistic}, {"examples", r.order.size()}, {"target", o->s.target}};
      std::vector<interp::HeatmapPanel> panels{{"cosine similarity, sorted by carry pattern", r.similarity}};
      emit(man, job.out / (tag + "_order.csv"), csv.str());
      emit(man, job.out / (tag + ".json"), j.dump(2) + "\n");
      emit(man, job.out / (tag + ".svg"), interp::heatmap_svg(panels, 1, -1.0, 1.0));
      std::cout << "checkerboard statistic " << r.statistic << '\n';
      man.write_to(job.out / (tag + "_manifest.json"));
    });
  });
}

// ------------------------------------------------------- run-level analyses

struct RunOpts {
  std::string run;
  std::string examples = "test";
  std::size_t limit = 0;
  std::uint64_t seed = 0;
  int stride = 1;
  std::string out;
};

void add_run_shared(CLI::App* cmd, RunOpts& r, std::size_t default_limit) {
  r.limit = default_limit;
  cmd->add_option("--run", r.run, "Run directory with every-epoch checkpoints")->required();
  cmd->add_option("--examples", r.examples, "test | train | all | sample:W:N | file.csv")
      ->capture_default_str();
  cmd->add_option("--limit", r.limit, "Random subset size (0 keeps all)")->capture_default_str();
  cmd->add_option("--seed", r.seed, "Seed for subsets and samples")->capture_default_str();
  cmd->add_option("--stride", r.stride, "Use every n-th checkpoint")->capture_default_str();
  cmd->add_option("--out", r.out, "Output directory (default <run>/analysis/<name>)");
}

json run_json(const RunOpts& r) {
  return {{"run", r.run}, {"examples", r.examples}, {"limit", r.limit}, {"stride", r.stride}};
}

std::vector<data::AdditionExample> run_examples(const RunOpts& r, RunManifest& man) {
  const auto ckpts = training::list_checkpoints(r.run);
  if (ckpts.empty()) throw UsageError("no checkpoints under " + r.run);
  const auto ck = training::load_checkpoint(ckpts.back().second);
  man.add_input(fs::path(r.run) / "manifest.json");
  man.add_seed(r.seed);
  return load_examples(r.examples, ckpts.back().second, ck, r.limit, r.seed);
}

std::optional<double> at_epoch(const MetricsColumns& m, const std::string& col, int epoch) {
  const auto& e = m.column("epoch");
  const auto& v = m.column(col);
  for (std::size_t i = 0; i < e.size(); ++i)
    if (static_cast<int>(e[i]) == epoch) return v[i];
  return std::nullopt;
}

json opt_json(const std::optional<int>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

void add_analyze_pcc(CLI::App& parent, Context& ctx) {
  auto* cmd = parent.add_subcommand("pcc", "Correlation of ablated accuracies with the no-carry pattern over training");
  struct Opts {
    RunOpts r;
    std::string mode = "own";
  };
  auto o = std::make_shared<Opts>();
  add_run_shared(cmd, o->r, 0);
  cmd->add_option("--mode", o->mode, "own (ablate the final MLP) | final (ablate the final-epoch carry neurons)")
      ->check(CLI::IsMember({"own", "final"}))
      ->capture_default_str();
  cmd->callback([o, &ctx] {
    RunManifest man(ctx, "analyze_pcc");
    auto cfg = run_json(o->r);
    cfg["mode"] = o->mode;
    man.set_config(cfg);
    guarded(ctx, man, [&] {
      const auto examples = run_examples(o->r, man);
      const auto series = interp::pcc_evolution(
          o->r.run, examples, o->mode == "own" ? interp::PccMode::OwnMlp : interp::PccMode::FinalNeurons,
          o->r.stride);
      const fs::path out = o->r.out.empty() ? fs::path(o->r.run) / "analysis" / "pcc" : fs::path(o->r.out);
      const auto metrics = read_metrics(o->r.run);
      std::ostringstream csv;
      csv << "epoch,pcc,test_loss\n";
      std::vector<int> epochs, loss_epochs;
      std::vector<double> pcc, loss;
      std::vector<std::vector<double>> pts;
      std::vector<std::string> labels;
      for (const auto& p : series.points) {
        const auto tl = at_epoch(metrics, "test_loss", p.epoch);
        csv << p.epoch << ',';
        if (p.pcc) csv << *p.pcc;
        csv << ',';
        if (tl) csv << *tl;
        csv << '\n';
        if (p.pcc) {
          epochs.push_back(p.epoch);
          pcc.push_back(*p.pcc);
          pts.push_back({static_cast<double>(p.epoch), *p.pcc});
          labels.emplace_back("pcc");
        }
      }
      const auto& me = metrics.column("epoch");
      const auto& ml = metrics.column("test_loss");
      for (std::size_t i = 0; i < me.size(); ++i)
        if (std::isfinite(ml[i])) {
          loss_epochs.push_back(static_cast<int>(me[i]));
          loss.push_back(ml[i]);
        }
      std::ostringstream cells;
      cells << "cell,reference,observed_final\n";
      for (std::size_t c = 0; c < series.cells.size(); ++c)
        cells << csv_quote(series.cells[c]) << ',' << series.reference[c] << ','
              << series.points.back().observed[c] << '\n';
      const auto kink = interp::loss_kink(loss_epochs, loss);
      const auto onset = interp::rise_onset(epochs, pcc);
      json j = {{"mode", o->mode},
                {"final_epoch", series.points.back().epoch},
                {"final_pcc", series.points.back().pcc ? json(*series.points.back().pcc) : json(nullptr)},
                {"loss_kink_epoch", opt_json(kink)},
                {"pcc_onset_epoch", opt_json(onset)},
                {"checkpoints", series.points.size()}};
      emit(man, out / ("pcc_" + o->mode + ".csv"), csv.str());
      emit(man, out / ("pcc_" + o->mode + "_cells.csv"), cells.str());
      emit(man, out / ("pcc_" + o->mode + ".json"), j.dump(2) + "\n");
      if (!pts.empty())
        emit(man, out / ("pcc_" + o->mode + ".svg"), interp::scatter_svg(pts, labels, "PCC per epoch"));
      std::cout << j.dump(2) << '\n';
      man.write_to(out / ("pcc_" + o->mode + "_manifest.json"));
    });
  });
}

void add_analyze_transition(CLI::App& parent, Context& ctx) {
  auto* cmd = parent.add_subcommand("transition", "Staircase score per head across checkpoints");
  struct Opts {
    RunOpts r;
    int window = 20;
    double jump = 0.2;
  };
  auto o = std::make_shared<Opts>();
  add_run_shared(cmd, o->r, 2000);
  cmd->add_option("--window", o->window, "Look-back window in epochs")->capture_default_str();
  cmd->add_option("--jump", o->jump, "Required score increase")->capture_default_str();
  cmd->callback([o, &ctx] {
    RunManifest man(ctx, "analyze_transition");
    auto cfg = run_json(o->r);
    cfg.update({{"window", o->window}, {"jump", o->jump}});
    man.set_config(cfg);
    guarded(ctx, man, [&] {
      const auto examples = run_examples(o->r, man);
      const auto ckpts = training::list_checkpoints(o->r.run);
      const fs::path out =
          o->r.out.empty() ? fs::path(o->r.run) / "analysis" / "transition" : fs::path(o->r.out);
      const auto metrics = read_metrics(o->r.run);
      std::vector<int> epochs;
      std::map<std::pair<int, int>, std::vector<double>> scores;
      std::vector<double> loss;
      const int stride = std::max(1, o->r.stride);
      for (std::size_t i = 0; i < ckpts.size(); ++i) {
        if (ckpts[i].first % stride != 0 && i + 1 != ckpts.size()) continue;
        const auto ck = training::load_checkpoint(ckpts[i].second);
        const auto summary = interp::attention_summary(ck.params, ck.config, examples, interp::GroupBy::Task);
        epochs.push_back(ck.epoch);
        for (const auto& s : interp::staircase_scores(summary)) scores[{s.layer, s.head}].push_back(s.score);
        loss.push_back(at_epoch(metrics, "test_loss", ck.epoch).value_or(std::numeric_limits<double>::quiet_NaN()));
      }
      std::ostringstream csv;
      csv << "epoch,test_loss";
      for (const auto& [k, _] : scores) csv << ",L" << k.first << "H" << k.second;
      csv << '\n';
      for (std::size_t i = 0; i < epochs.size(); ++i) {
        csv << epochs[i] << ',' << loss[i];
        for (const auto& [_, v] : scores) csv << ',' << v[i];
        csv << '\n';
      }
      interp::TransitionParams tp{o->window, o->jump};
      json heads = json::array();
      std::optional<int> first;
      for (const auto& [k, v] : scores) {
        const auto t = interp::detect_transition(epochs, v, tp);
        if (t && (!first || *t < *first)) first = t;
        heads.push_back({{"layer", k.first}, {"head", k.second}, {"transition", opt_json(t)},
                         {"final_score", v.back()}});
      }
      std::vector<int> le;
      std::vector<double> lv;
      const auto& me = metrics.column("epoch");
      const auto& ml = metrics.column("test_loss");
      for (std::size_t i = 0; i < me.size(); ++i)
        if (std::isfinite(ml[i])) {
          le.push_back(static_cast<int>(me[i]));
          lv.push_back(ml[i]);
        }
      json j = {{"heads", heads}, {"first_transition", opt_json(first)},
                {"window", o->window}, {"jump", o->jump}};
      if (first) j["loss_drop_near_transition"] = opt_json(interp::loss_drop(le, lv, 0.3, o->window, *first - 50));
      emit(man, out / "transition.csv", csv.str());
      emit(man, out / "transition.json", j.dump(2) + "\n");
      std::cout << j.dump(2) << '\n';
      man.write(out);
    });
  });
}

void add_analyze(CLI::App& app, Context& ctx) {
  auto* cmd = app.add_subcommand("analyze", "Interpretability analyses of trained checkpoints");
  cmd->require_subcommand(1);
  add_attention(cmd, ctx);
  add_pca(cmd, ctx);
  add_dissect(cmd, ctx);
  add_svd(cmd, ctx);
  add_squash(cmd, ctx);
  add_analyze_pcc(*cmd, ctx);
  add_checkerboard(cmd, ctx);
  add_analyze_transition(*cmd, ctx);
}

}  // namespace carry::cli
