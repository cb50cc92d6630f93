#include <fstream>
#include <iomanip>
#include <sstream>

#include "cli.hpp"

namespace carry::cli {

fs::path run_dir_of(const fs::path& ckpt) {
  const auto parent = ckpt.parent_path();
  return parent.filename() == "ckpt" ? parent.parent_path() : parent;
}

training::TrainConfig run_config(const fs::path& run_dir) {
  const auto path = run_dir / "manifest.json";
  std::ifstream is(path);
  if (!is) throw UsageError("no training manifest at " + path.string());
  json j;
  is >> j;
  return train_config_from_json(j.at("config"));
}

std::vector<data::AdditionExample> load_examples(const std::string& spec, const fs::path& ckpt,
                                                 const training::Checkpoint& ck, std::size_t limit,
                                                 std::uint64_t seed) {
  std::vector<data::AdditionExample> out;
  if (spec == "test" || spec == "train") {
    auto split = training::make_split(run_config(run_dir_of(ckpt)));
    out = spec == "test" ? std::move(split.test) : std::move(split.train);
  } else if (spec == "all") {
    out = data::gen_dataset(ck.data_width);
  } else if (spec.rfind("sample:", 0) == 0) {
    int w = 0;
    std::size_t n = 0;
    char sep = 0;
    std::istringstream ss(spec.substr(7));
    if (!(ss >> w >> sep >> n) || sep != ':') throw UsageError("expected sample:W:N, got " + spec);
    out = data::sample_examples(w, n, seed);
  } else if (spec.size() > 4 && spec.substr(spec.size() - 4) == ".csv") {
    out = data::read_csv(spec);
  } else {
    throw UsageError("unknown example set '" + spec + "' (test, train, all, sample:W:N or a CSV)");
  }
  for (const auto& ex : out)
    if (ex.width > ck.config.width)
      throw UsageError("example width " + std::to_string(ex.width) + " exceeds model width " +
                       std::to_string(ck.config.width));
  if (limit > 0 && out.size() > limit) {
    RngStream rng(seed, "examples");
    rng.shuffle(out.begin(), out.end());
    out.resize(limit);
  }
  if (out.empty()) throw UsageError("example set '" + spec + "' is empty");
  return out;
}

namespace {

int parse_int(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw UsageError("bad " + what + " '" + s + "'");
  }
}

std::vector<std::string> split_on(const std::string& s, char c) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(s);
  while (std::getline(ss, cur, c)) out.push_back(cur);
  return out;
}

}  // namespace

model::AblationSpec parse_targets(const std::string& text, const model::ModelConfig& cfg) {
  model::AblationSpec spec;
  for (const auto& item : split_on(text, ',')) {
    if (item.empty()) continue;
    const auto parts = split_on(item, ':');
    const auto& kind = parts[0];
    if (kind == "head" && parts.size() == 3) {
      spec.with(model::AblationSpec::head(parse_int(parts[1], "layer"), parse_int(parts[2], "head")));
    } else if (kind == "mlp" && parts.size() == 2) {
      spec.with(model::AblationSpec::mlp(parse_int(parts[1], "layer")));
    } else if (kind == "skip" && parts.size() == 2) {
      spec.with(model::AblationSpec::skip_attention(parse_int(parts[1], "layer")));
    } else if (kind == "neurons" && parts.size() >= 2) {
      const auto path = item.substr(8);
      std::ifstream is(path);
      if (!is) throw UsageError("cannot read neuron file " + path);
      json j;
      try {
        is >> j;
        spec.with(model::AblationSpec::neurons(j.at("layer").get<int>(),
                                               j.at("indices").get<std::vector<int>>()));
      } catch (const json::exception& e) {
        throw UsageError("neuron file " + path + ": " + e.what());
      }
    } else {
      throw UsageError("unknown ablation target '" + item +
                       "' (head:L:H, mlp:L, skip:L or neurons:file)");
    }
  }
  try {
    spec.validate(cfg);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  return spec;
}

std::string table_csv(const training::TaskAccuracyTable& t, bool corrected) {
  std::ostringstream os;
  os << std::setprecision(6) << "group,count,exact";
  for (int p = 0; p < t.positions; ++p) os << ",acc_" << p;
  if (corrected)
    for (int p = 0; p < t.positions; ++p) os << ",corr_" << p;
  os << '\n';
  for (std::size_t g = 0; g < t.groups.size(); ++g) {
    os << t.groups[g] << ',' << t.counts[g] << ',' << t.exact[g];
    for (double v : t.accuracy[g]) os << ',' << v;
    if (corrected)
      for (double v : t.corrected[g]) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

std::string format_table(const training::TaskAccuracyTable& t, bool corrected) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << std::left << std::setw(12) << "group" << std::right
     << std::setw(8) << "count";
  for (int p = 0; p < t.positions; ++p) os << std::setw(8) << ("p" + std::to_string(p));
  if (corrected)
    for (int p = 0; p < t.positions; ++p) os << std::setw(8) << ("c" + std::to_string(p));
  os << '\n';
  for (std::size_t g = 0; g < t.groups.size(); ++g) {
    os << std::left << std::setw(12) << t.groups[g] << std::right << std::setw(8) << t.counts[g];
    for (double v : t.accuracy[g]) os << std::setw(8) << v;
    if (corrected)
      for (double v : t.corrected[g]) os << std::setw(8) << v;
    os << '\n';
  }
  return os.str();
}

std::string sanitize(std::string s) {
  for (auto& c : s)
    if (c == ':' || c == ',' || c == '/' || c == ' ') c = '_';
  return s;
}

std::vector<std::string> position_labels(const model::ModelConfig& cfg) {
  std::vector<std::string> out;
  const int w = cfg.width;
  for (int i = 0; i < w; ++i) out.push_back("a" + std::to_string(i));
  out.emplace_back("+");
  for (int i = 0; i < w; ++i) out.push_back("b" + std::to_string(i));
  if (cfg.causal) {
    out.emplace_back("=");
    for (int i = 0; i < w; ++i) out.push_back("s" + std::to_string(i));
  } else {
    for (int i = 0; i < w; ++i) out.push_back("=" + std::to_string(i));
  }
  out.resize(static_cast<std::size_t>(cfg.seq_len()), "?");
  return out;
}

MetricsColumns read_metrics(const fs::path& run_dir) {
  const auto path = run_dir / "metrics.csv";
  std::ifstream is(path);
  if (!is) throw UsageError("no metrics.csv under " + run_dir.string());
  MetricsColumns out;
  std::string line;
  std::getline(is, line);
  out.names = split_on(line, ',');
  out.values.resize(out.names.size());
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = split_on(line, ',');
    for (std::size_t c = 0; c < out.names.size(); ++c)
      out.values[c].push_back(c < cells.size() ? std::strtod(cells[c].c_str(), nullptr)
                                               : std::numeric_limits<double>::quiet_NaN());
  }
  return out;
}

const std::vector<double>& MetricsColumns::column(const std::string& name) const {
  for (std::size_t c = 0; c < names.size(); ++c)
    if (names[c] == name) return values[c];
  throw UsageError("metrics.csv has no column " + name);
}

}  // namespace carry::cli
