#pragma once

#include <chrono>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "carry/interp.hpp"
#include "carry/serialize.hpp"
#include "carry/training.hpp"

namespace carry::cli {

namespace fs = std::filesystem;

enum ExitCode { kOk = 0, kUsage = 2, kNumerical = 3, kRefused = 4 };

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GuardRefusal : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Context {
  std::vector<std::string> argv;
  bool dry_run = false;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
};

// Provenance record written next to every subcommand's outputs.
class RunManifest {
 public:
  RunManifest(const Context& ctx, std::string command);
  void set_config(json cfg) { config_ = std::move(cfg); }
  void add_seed(std::uint64_t s) { seeds_.push_back(s); }
  void add_input(const fs::path& p);
  void add_output(const fs::path& p) { outputs_.push_back(p.string()); }
  void write(const fs::path& dir) const;
  void write_to(const fs::path& file) const;
  json to_json() const;

 private:
  const Context& ctx_;
  std::string command_;
  json config_ = json::object();
  std::vector<std::uint64_t> seeds_;
  std::vector<std::pair<std::string, std::string>> inputs_;
  std::vector<std::string> outputs_;
};

void write_text(const fs::path& p, const std::string& text);

// Run directory owning a checkpoint at <run>/ckpt/<file>.
fs::path run_dir_of(const fs::path& ckpt);

// Example sets for analyses:
//   test          held-out split rebuilt from the run's manifest (default)
//   train         training split of the run
//   all           full enumeration at the checkpoint's data width
//   sample:W:N    N sampled sums of width W
//   <file>.csv    rows written by `gen`
// A positive limit keeps a seeded random subset of that size.
std::vector<data::AdditionExample> load_examples(const std::string& spec, const fs::path& ckpt,
                                                 const training::Checkpoint& ck, std::size_t limit,
                                                 std::uint64_t seed);

// "head:L:H", "mlp:L", "skip:L", "neurons:<file.json>", comma separated.
model::AblationSpec parse_targets(const std::string& text, const model::ModelConfig& cfg);

std::string table_csv(const training::TaskAccuracyTable& t, bool corrected);
std::string format_table(const training::TaskAccuracyTable& t, bool corrected);
std::string sanitize(std::string s);
std::vector<std::string> position_labels(const model::ModelConfig& cfg);
training::TrainConfig run_config(const fs::path& run_dir);

struct MetricsColumns {
  std::vector<std::string> names;
  std::vector<std::vector<double>> values;
  const std::vector<double>& column(const std::string& name) const;
};
MetricsColumns read_metrics(const fs::path& run_dir);

std::string file_hash(const fs::path& p);
void log(const std::string& s);

void add_gen(CLI::App& app, Context& ctx);
void add_train(CLI::App& app, Context& ctx);
void add_ablate(CLI::App& app, Context& ctx);
void add_analyze(CLI::App& app, Context& ctx);
void add_finetune(CLI::App& app, Context& ctx);
void add_report(CLI::App& app, Context& ctx);
void add_analyze_pcc(CLI::App& parent, Context& ctx);
void add_analyze_transition(CLI::App& parent, Context& ctx);

int run(int argc, char** argv);

}  // namespace carry::cli
