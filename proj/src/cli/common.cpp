#include <fstream>
#include <iostream>
#include <sstream>

#include "cli.hpp"
#include "carry/kernels.hpp"
#include "carry/runtime.hpp"

namespace carry::cli {

namespace {
constexpr const char* kVersion = "carry 1.0.0";
}

RunManifest::RunManifest(const Context& ctx, std::string command)
    : ctx_(ctx), command_(std::move(command)) {}

void RunManifest::add_input(const fs::path& p) {
  inputs_.emplace_back(p.string(), fs::is_regular_file(p) ? file_hash(p) : std::string("dir"));
}

json RunManifest::to_json() const {
  json inputs = json::array();
  for (const auto& [p, h] : inputs_) inputs.push_back({{"path", p}, {"hash", h}});
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - ctx_.start).count();
  return {{"command", command_},
          {"argv", ctx_.argv},
          {"config", config_},
          {"seeds", seeds_},
          {"inputs", inputs},
          {"outputs", outputs_},
          {"wall_clock_seconds", wall},
          {"threads", kernels::thread_count()},
          {"version", kVersion}};
}

void RunManifest::write(const fs::path& dir) const {
  fs::create_directories(dir);
  write_text(dir / ("run_manifest_" + command_ + ".json"), to_json().dump(2) + "\n");
}

void RunManifest::write_to(const fs::path& file) const {
  write_text(file, to_json().dump(2) + "\n");
}

void write_text(const fs::path& p, const std::string& text) {
  if (!p.parent_path().empty()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << text;
}

std::string file_hash(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return content_hash(ss.str());
}

void log(const std::string& s) { std::cerr << s << std::endl; }

int run(int argc, char** argv) {
  tune_allocator();
  Context ctx;
  ctx.argv.assign(argv, argv + argc);
  CLI::App app{"Train and dissect small transformers on digit addition"};
  app.set_version_flag("--version", kVersion);
  app.add_flag("--dry-run", ctx.dry_run, "Print the resolved configuration and exit");
  app.require_subcommand(1);
  add_gen(app, ctx);
  add_train(app, ctx);
  add_ablate(app, ctx);
  add_analyze(app, ctx);
  add_finetune(app, ctx);
  add_report(app, ctx);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const model::ConfigError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const training::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const data::EnumerationRefused& e) {
    std::cerr << "refused: " << e.what() << '\n';
    return kRefused;
  } catch (const GuardRefusal& e) {
    std::cerr << "refused: " << e.what() << '\n';
    return kRefused;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kOk;
}

}  // namespace carry::cli
