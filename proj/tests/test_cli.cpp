#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "grf/cli.hpp"

namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("grf_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

int run(const std::string& args, const fs::path& dir) {
  const std::string cmd = "cd '" + dir.string() + "' && '" + GRF_CLI_PATH + "' " + args + " > stdout.txt 2> stderr.txt";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

const std::string data = std::string(GRF_DATA_DIR) + "/toy6.smi";

void write_config(const fs::path& p) {
  std::ofstream(p) << R"({"model": {"n_max": 6, "mlp_blocks": 2}, "train": {"epochs": 2, "batch_size": 25}})";
}

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  TempDir t;
  EXPECT_EQ(run("", t.path), 1);
  EXPECT_EQ(run("frobnicate", t.path), 1);
  EXPECT_EQ(run("train", t.path), 1);
  EXPECT_EQ(run("sample --ckpt x.json --count 0", t.path), 1);
  EXPECT_EQ(run("selfcheck --threads 0", t.path), 1);
  EXPECT_EQ(run("--help", t.path), 0);
}

TEST(Cli, DataErrorsExitTwo) {
  TempDir t;
  EXPECT_EQ(run("sample --ckpt missing.json", t.path), 2);
  std::ofstream(t.path / "bad.smi") << "CC\nC(C\n";
  EXPECT_EQ(run("train --dataset bad.smi --out o", t.path), 2);
  EXPECT_NE(slurp(t.path / "stderr.txt").find("bad.smi:2:"), std::string::npos);
  std::ofstream(t.path / "bad.json") << "{";
  EXPECT_EQ(run("eval --ckpt bad.json --dataset " + data, t.path), 2);
}

TEST(Cli, SelfcheckInjectionExitsThree) {
  TempDir t;
  EXPECT_EQ(run("selfcheck --instances 50", t.path), 0);
  EXPECT_NE(slurp(t.path / "stdout.txt").find("block_lipschitz"), std::string::npos);
  EXPECT_EQ(run("selfcheck --instances 50 --inject-over-budget 1.5", t.path), 3);
  EXPECT_NE(slurp(t.path / "stdout.txt").find("FAIL"), std::string::npos);
}

TEST(Cli, TrainThenEveryCommandDeterministic) {
  TempDir t;
  write_config(t.path / "cfg.json");
  ASSERT_EQ(run("train --config cfg.json --dataset " + data + " --out run --seed 3", t.path), 0)
      << slurp(t.path / "stderr.txt");
  const std::string csv = slurp(t.path / "run/loss.csv");
  EXPECT_EQ(csv.rfind("epoch,step,nll,logdet_mean,prior_mean\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 2 * 2);
  ASSERT_EQ(run("train --config cfg.json --dataset " + data + " --out run2 --seed 3 --threads 2", t.path), 0);
  EXPECT_EQ(slurp(t.path / "run/checkpoint.json"), slurp(t.path / "run2/checkpoint.json"));

  const std::vector<std::string> cmds = {
      "sample --ckpt run/checkpoint.json --count 20 --seed 5 --out s{}.smi --dataset " + data,
      "reconstruct --ckpt run/checkpoint.json --dataset " + data + " --count 10 --iterations 20 --out r{}.csv",
      "eval --ckpt run/checkpoint.json --dataset " + data + " --out e{}.jsonl",
      "latent-grid --ckpt run/checkpoint.json --dataset " + data + " --grid-size 1 --iterations 30 --out g{}.jsonl",
      "selfcheck --instances 30 --ckpt run/checkpoint.json --out c{}.txt"};
  for (const std::string& c : cmds) {
    std::string outs[2];
    for (int k = 0; k < 2; ++k) {
      std::string cmd = c;
      cmd.replace(cmd.find("{}"), 2, std::to_string(k));
      ASSERT_EQ(run(cmd, t.path), 0) << cmd << "\n" << slurp(t.path / "stderr.txt");
      const std::string file = cmd.substr(cmd.find("--out ") + 6);
      outs[k] = slurp(t.path / file.substr(0, file.find(' ')));
      EXPECT_FALSE(outs[k].empty()) << cmd;
    }
    EXPECT_EQ(outs[0], outs[1]) << c;
  }
  EXPECT_EQ(slurp(t.path / "s0.smi.metrics.json"), slurp(t.path / "s1.smi.metrics.json"));
  const auto j = nlohmann::json::parse(slurp(t.path / "s0.smi.metrics.json"));
  EXPECT_TRUE(j.contains("validity"));
  EXPECT_EQ(slurp(t.path / "r0.csv").rfind("iterations,mean_normalized_l2,max_normalized_l2,exact_rate\n", 0), 0u);
  std::istringstream grid(slurp(t.path / "g0.jsonl"));
  std::string line;
  int rows = 0;
  while (std::getline(grid, line)) {
    const auto g = nlohmann::json::parse(line);
    EXPECT_TRUE(g.contains("smiles") && g.contains("valid") && g.contains("x"));
    ++rows;
  }
  EXPECT_EQ(rows, 9);

  // Resume one more epoch from the saved checkpoint.
  ASSERT_EQ(run("train --dataset " + data + " --ckpt run/checkpoint.json --epochs 3 --out run3 --seed 3", t.path), 0)
      << slurp(t.path / "stderr.txt");
  const std::string csv3 = slurp(t.path / "run3/loss.csv");
  EXPECT_EQ(csv3.rfind(csv, 0), 0u);
  EXPECT_GT(csv3.size(), csv.size());
}

TEST(Cli, InProcessEntryPoint) {
  std::ostringstream out, err;
  const char* argv[] = {"grf", "selfcheck", "--instances", "20"};
  EXPECT_EQ(grf::run_cli(4, argv, out, err), 0);
  EXPECT_NE(out.str().find("frobenius_spectral_bound"), std::string::npos);
}
