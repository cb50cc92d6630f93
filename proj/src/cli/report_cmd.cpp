#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "cli.hpp"

namespace carry::cli {

namespace {

struct RunEntry {
  fs::path dir;
  std::string name;
  json final_metrics;  // empty when the run has no final.json
  std::vector<fs::path> artifacts;  // relative to dir
};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (char c : line) {
    if (c == '"') quoted = !quoted;
    else if (c == ',' && !quoted) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::string run_name(const fs::path& dir) {
  const auto canon = fs::weakly_canonical(dir);
  const auto parent = canon.parent_path().filename().string();
  return sanitize(parent.empty() ? canon.filename().string() : parent + "_" + canon.filename().string());
}

std::vector<fs::path> expand_runs(const std::vector<std::string>& runs) {
  std::vector<fs::path> out;
  for (const auto& r : runs) {
    const fs::path dir(r);
    if (!fs::is_directory(dir)) throw UsageError("run directory " + r + " does not exist");
    if (fs::exists(dir / "manifest.json")) {
      out.push_back(dir);
      continue;
    }
    std::vector<fs::path> subs;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_directory() && fs::exists(e.path() / "manifest.json")) subs.push_back(e.path());
    if (subs.empty()) throw UsageError("run directory " + r + " contains no training runs");
    std::sort(subs.begin(), subs.end());
    out.insert(out.end(), subs.begin(), subs.end());
  }
  return out;
}

RunEntry scan(const fs::path& dir) {
  RunEntry r;
  r.dir = dir;
  r.name = run_name(dir);
  if (std::ifstream is(dir / "final.json"); is) is >> r.final_metrics;
  for (const char* f : {"manifest.json", "metrics.csv", "final.json"})
    if (fs::exists(dir / f)) r.artifacts.emplace_back(f);
  for (const char* sub : {"ablate", "analysis", "finetune"}) {
    if (!fs::is_directory(dir / sub)) continue;
    std::vector<fs::path> found;
    for (const auto& e : fs::recursive_directory_iterator(dir / sub))
      if (e.is_regular_file()) found.push_back(fs::relative(e.path(), dir));
    std::sort(found.begin(), found.end());
    r.artifacts.insert(r.artifacts.end(), found.begin(), found.end());
  }
  return r;
}

bool is_accuracy_table(const fs::path& p) {
  if (p.extension() != ".csv") return false;
  std::ifstream is(p);
  std::string header;
  std::getline(is, header);
  return header.rfind("group,count,exact", 0) == 0;
}

// Mean and population standard deviation of each numeric cell across runs.
std::string combine_tables(const std::vector<fs::path>& files) {
  std::vector<std::string> header;
  std::vector<std::string> groups;
  std::map<std::string, std::vector<std::vector<double>>> cells;  // group -> column -> values
  for (const auto& f : files) {
    std::ifstream is(f);
    std::string line;
    std::getline(is, line);
    const auto h = split_csv_line(line);
    if (header.empty()) header = h;
    else if (h != header) throw UsageError("tables to combine have different columns: " + f.string());
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto row = split_csv_line(line);
      auto [it, fresh] = cells.try_emplace(row[0], std::vector<std::vector<double>>(header.size()));
      if (fresh) groups.push_back(row[0]);
      for (std::size_t c = 1; c < row.size() && c < header.size(); ++c)
        it->second[c].push_back(std::strtod(row[c].c_str(), nullptr));
    }
  }
  std::ostringstream os;
  os << std::setprecision(6) << "group,runs";
  for (std::size_t c = 1; c < header.size(); ++c) os << ',' << header[c] << "_mean," << header[c] << "_std";
  os << '\n';
  for (const auto& g : groups) {
    const auto& cols = cells.at(g);
    os << (g.find(',') == std::string::npos ? g : "\"" + g + "\"") << ',' << cols[1].size();
    for (std::size_t c = 1; c < header.size(); ++c) {
      const auto& v = cols[c];
      double mean = 0, var = 0;
      for (double x : v) mean += x;
      mean /= static_cast<double>(std::max<std::size_t>(1, v.size()));
      for (double x : v) var += (x - mean) * (x - mean);
      var /= static_cast<double>(std::max<std::size_t>(1, v.size()));
      os << ',' << mean << ',' << std::sqrt(var);
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace

void add_report(CLI::App& app, Context& ctx) {
  auto* cmd = app.add_subcommand("report", "Collect tables and figures of runs into a static bundle");
  struct Opts {
    std::vector<std::string> runs;
    std::string out = "report";
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--run", o->runs, "Run directory or a directory of seed runs (repeatable)")
      ->required();
  cmd->add_option("--out", o->out, "Bundle directory")->capture_default_str();
  cmd->callback([o, &ctx] {
    RunManifest man(ctx, "report");
    man.set_config({{"runs", o->runs}, {"out", o->out}});
    if (ctx.dry_run) {
      std::cout << man.to_json()["config"].dump(2) << '\n';
      return;
    }
    const auto dirs = expand_runs(o->runs);
    const fs::path out(o->out);
    fs::create_directories(out);
    std::vector<RunEntry> runs;
    for (const auto& d : dirs) runs.push_back(scan(d));

    json index = {{"runs", json::array()}, {"combined", json::array()}};
    std::ostringstream md;
    md << "# Report\n\n## Runs\n\n| run | stop epoch | converged | test exact match |\n|---|---|---|---|\n";
    std::map<std::string, std::vector<fs::path>> tables;
    std::vector<double> exacts;
    for (const auto& r : runs) {
      man.add_input(r.dir / "manifest.json");
      json rj = {{"name", r.name}, {"dir", r.dir.string()}, {"artifacts", json::array()}};
      for (const auto& a : r.artifacts) {
        const auto dest = out / "runs" / r.name / a;
        fs::create_directories(dest.parent_path());
        fs::copy_file(r.dir / a, dest, fs::copy_options::overwrite_existing);
        rj["artifacts"].push_back(fs::relative(dest, out).string());
        if (is_accuracy_table(r.dir / a)) tables[a.string()].push_back(r.dir / a);
      }
      const auto& f = r.final_metrics;
      if (!f.is_null()) {
        rj["final"] = {{"stop_epoch", f.value("stop_epoch", 0)},
                       {"converged", f.value("converged", false)},
                       {"test_exact_match", f.value("test_exact_match", 0.0)}};
        exacts.push_back(f.value("test_exact_match", 0.0));
        md << "| " << r.name << " | " << f.value("stop_epoch", 0) << " | "
           << (f.value("converged", false) ? "yes" : "no") << " | "
           << f.value("test_exact_match", 0.0) << " |\n";
      } else {
        md << "| " << r.name << " | - | - | - |\n";
      }
      index["runs"].push_back(rj);
    }
    if (!exacts.empty()) {
      double mean = 0, var = 0;
      for (double x : exacts) mean += x;
      mean /= static_cast<double>(exacts.size());
      for (double x : exacts) var += (x - mean) * (x - mean);
      var /= static_cast<double>(exacts.size());
      index["test_exact_match"] = {{"mean", mean}, {"std", std::sqrt(var)}, {"runs", exacts.size()}};
      md << "\nTest exact match over " << exacts.size() << " runs: " << mean << " +- " << std::sqrt(var)
         << "\n";
    }
    md << "\n## Combined accuracy tables (mean and std over runs)\n\n";
    for (const auto& [rel, files] : tables) {
      const auto name = "combined/" + sanitize(rel);
      write_text(out / name, combine_tables(files));
      man.add_output(out / name);
      index["combined"].push_back({{"table", rel}, {"runs", files.size()}, {"file", name}});
      md << "- [" << rel << "](" << name << ") over " << files.size() << " runs\n";
    }
    md << "\n## Artifacts\n\n";
    for (const auto& rj : index["runs"]) {
      md << "### " << rj["name"].get<std::string>() << "\n\n";
      for (const auto& a : rj["artifacts"]) md << "- [" << a.get<std::string>() << "](" << a.get<std::string>() << ")\n";
      md << '\n';
    }
    write_text(out / "index.json", index.dump(2) + "\n");
    write_text(out / "index.md", md.str());
    man.add_output(out / "index.json");
    man.add_output(out / "index.md");
    man.write(out);
    log("report for " + std::to_string(runs.size()) + " runs written to " + out.string());
  });
}

}  // namespace carry::cli
