#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct Result {
  int code = -1;
  std::string out;
};

Result carry(const std::string& args, const fs::path& cwd) {
  const std::string cmd = "cd '" + cwd.string() + "' && '" CARRY_BIN "' " + args + " 2>&1";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf;
  while (const auto n = fread(buf.data(), 1, buf.size(), p)) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::size_t line_count(const fs::path& p) {
  std::ifstream is(p);
  std::size_t n = 0;
  for (std::string line; std::getline(is, line);) n += !line.empty();
  return n;
}

json read_json(const fs::path& p) {
  std::ifstream is(p);
  return json::parse(is);
}

class Cli : public ::testing::Test {
 protected:
  static inline fs::path dir;
  static inline fs::path run;

  // One tiny run shared by the subcommand tests.
  static void SetUpTestSuite() {
    dir = fs::temp_directory_path() / "carry_cli_test";
    fs::remove_all(dir);
    fs::create_directories(dir);
    run = dir / "runs" / "tiny";
    const auto r = carry("train --width 2 --layout-width 3 --dmodel 16 --dff 16 --epochs 3 --lr 3e-3 "
                         "--eval-subset 0 --ckpt-every 1 --seed 1 --out runs/tiny",
                         dir);
    ASSERT_EQ(r.code, 0) << r.out;
  }

  static std::string ckpt() { return (run / "ckpt" / "epoch_3.bin").string(); }
};

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(carry("", dir).code, 2);
  EXPECT_EQ(carry("frobnicate", dir).code, 2);
  EXPECT_EQ(carry("gen --no-such-flag", dir).code, 2);
  EXPECT_EQ(carry("train --split 0 --out x", dir).code, 2);
  EXPECT_EQ(carry("ablate --target head:1:0", dir).code, 2);
  EXPECT_EQ(carry("ablate --ckpt " + ckpt() + " --target head:7:0", dir).code, 2);
  EXPECT_EQ(carry("ablate --ckpt " + ckpt() + " --target wibble", dir).code, 2);
  EXPECT_EQ(carry("--help", dir).code, 0);
}

TEST_F(Cli, RefusedEnumerationExitsFour) {
  const auto r = carry("gen --width 9 --max-examples 1e6 --out big.csv", dir);
  EXPECT_EQ(r.code, 4) << r.out;
  EXPECT_FALSE(fs::exists(dir / "big.csv"));
}

TEST_F(Cli, GenWritesAllSums) {
  const auto r = carry("gen --width 1 --out data/one.csv", dir);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(line_count(dir / "data" / "one.csv"), 56u);  // header and 55 sums
  EXPECT_TRUE(fs::exists(dir / "data" / "run_manifest_gen.json"));
}

TEST_F(Cli, DryRunHasNoSideEffects) {
  const auto r = carry("--dry-run gen --width 2 --out dry/two.csv", dir);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("\"width\": 2"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "dry"));
  EXPECT_EQ(carry("--dry-run train --epochs 1 --out dry/run", dir).code, 0);
  EXPECT_FALSE(fs::exists(dir / "dry"));
}

TEST_F(Cli, TrainWritesRunDirectory) {
  EXPECT_TRUE(fs::exists(run / "manifest.json"));
  EXPECT_EQ(line_count(run / "metrics.csv"), 5u);  // header, epochs 0..3
  const auto f = read_json(run / "final.json");
  EXPECT_EQ(f["stop_epoch"].get<int>(), 3);
  EXPECT_TRUE(f.contains("test_exact_match"));
  const auto m = read_json(run / "manifest.json");
  EXPECT_EQ(m["config"]["model"]["width"].get<int>(), 3);
}

TEST_F(Cli, AblateWritesTables) {
  const auto r = carry("ablate --ckpt " + ckpt() + " --target head:1:0 --corrected --limit 300", dir);
  ASSERT_EQ(r.code, 0) << r.out;
  const auto csv = run / "ablate" / "head_1_0_corrected.csv";
  ASSERT_TRUE(fs::exists(csv));
  std::ifstream is(csv);
  std::string header;
  std::getline(is, header);
  EXPECT_EQ(header.rfind("group,count,exact,acc_0", 0), 0u);
  EXPECT_NE(header.find("corr_0"), std::string::npos);
  const auto j = read_json(run / "ablate" / "head_1_0_corrected.json");
  EXPECT_TRUE(j.contains("exact_match"));
}

TEST_F(Cli, AnalysesRun) {
  const std::string c = " --ckpt " + ckpt() + " --limit 200";
  for (const std::string sub : {"attention", "pca", "dissect", "svd", "squash", "checkerboard"}) {
    const auto r = carry("analyze " + sub + c, dir);
    EXPECT_EQ(r.code, 0) << sub << ": " << r.out;
  }
  EXPECT_TRUE(fs::exists(run / "analysis" / "attention" / "attention.json"));
  EXPECT_TRUE(fs::exists(run / "analysis" / "dissect" / "neurons.json"));
  const auto t = carry("analyze transition --run " + run.string() + " --limit 100 --window 1", dir);
  EXPECT_EQ(t.code, 0) << t.out;
  EXPECT_TRUE(fs::exists(run / "analysis" / "transition" / "transition.csv"));
  const auto p = carry("analyze pcc --run " + run.string() + " --limit 100", dir);
  EXPECT_EQ(p.code, 0) << p.out;
  EXPECT_EQ(carry("analyze pca" + c + " --block nowhere", dir).code, 2);
}

TEST_F(Cli, FinetuneAndReport) {
  const auto f = carry("finetune --ckpt " + ckpt() + " --extra 3/20 --epochs 2 --batch 8 --eval-size 50 "
                       "--out " + (run / "finetune").string(), dir);
  ASSERT_EQ(f.code, 0) << f.out;
  const auto j = read_json(run / "finetune" / "finetune.json");
  EXPECT_EQ(j["epoch_loss"].size(), 2u);
  EXPECT_TRUE(j.contains("exact_match_3_digit"));

  const auto r = carry("report --run runs --out bundle", dir);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(dir / "bundle" / "index.md"));
  const auto idx = read_json(dir / "bundle" / "index.json");
  EXPECT_EQ(idx["runs"].size(), 1u);

  fs::create_directories(dir / "empty");
  EXPECT_EQ(carry("report --run empty --out bundle2", dir).code, 2);
  EXPECT_EQ(carry("report --run missing --out bundle3", dir).code, 2);
}

}  // namespace
