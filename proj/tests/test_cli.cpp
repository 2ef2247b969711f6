// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.


#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <sys/wait.h>

#include "monalign/cli.hpp"

namespace {

namespace cli = monalign::cli;
namespace fs = std::filesystem;
using monalign::io::read_text_file;
using monalign::io::write_text_file;

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::main_entry(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "monalign_cli_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<std::string> small_data_flags(const fs::path& out, int seed) {
  return {"gen-data", "--out", out.string(), "--seed", std::to_string(seed),
          "--n-train", "16", "--n-val", "6", "--n-test", "6",
          "--min-length", "3", "--max-length", "6"};
}

TEST(CommandConfig, ShippedDefaults) {
  const cli::CommandConfig c;
  EXPECT_EQ(c.delta, 0.01);
  EXPECT_EQ(c.lambda, 1e-5);
  EXPECT_EQ(c.learning_rate, 1e-3);
  EXPECT_EQ(c.anneal_factor, 0.3);
  EXPECT_EQ(c.epochs, 300);
  EXPECT_EQ(c.lambdas, (std::vector<double>{0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2}));
  const auto parsed = cli::parse_args({"train", "--data", "d.json", "--out", "o"});
  EXPECT_EQ(parsed.lambda, 1e-5);
  EXPECT_EQ(parsed.delta, 0.01);
  EXPECT_EQ(parsed.learning_rate, 1e-3);
}

TEST(Parse, UnknownFlagsAndMissingCommand) {
  EXPECT_EQ(run({"train", "--data", "d", "--out", "o", "--bogus", "1"}).code, cli::kUsage);
  EXPECT_EQ(run({}).code, cli::kUsage);
  EXPECT_EQ(run({"frobnicate"}).code, cli::kUsage);
  EXPECT_EQ(run({"gen-data"}).code, cli::kUsage);
  EXPECT_EQ(run({"train", "--data", "d", "--out", "o", "--epochs", "x"}).code, cli::kUsage);
  EXPECT_EQ(run({"--help"}).code, cli::kOk);
}

TEST(Parse, Lists) {
  const auto c = cli::parse_args({"sweep", "--data", "d", "--out", "o", "--lambdas",
                                  "0,1e-3", "--seeds", "1,2,3"});
  EXPECT_EQ(c.lambdas, (std::vector<double>{0.0, 1e-3}));
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{1, 2, 3}));
}

TEST(GenData, DeterministicAndDefaultSizes) {
  const auto dir = scratch("gen");
  ASSERT_EQ(run({"gen-data", "--out", (dir / "a.json").string(), "--seed", "7"}).code, 0);
  ASSERT_EQ(run({"gen-data", "--out", (dir / "b.json").string(), "--seed", "7"}).code, 0);
  EXPECT_EQ(read_text_file(dir / "a.json"), read_text_file(dir / "b.json"));
  const auto j = monalign::io::read_json_file(dir / "a.json");
  EXPECT_EQ(j["splits"]["train"].size(), 2000u);
  EXPECT_EQ(j["splits"]["val"].size(), 200u);
  EXPECT_EQ(j["splits"]["test"].size(), 200u);
}

TEST(GenData, MissingParentNamed) {
  const auto dir = scratch("gen_missing");
  const auto target = dir / "nope" / "d.json";
  const auto r = run({"gen-data", "--out", target.string()});
  EXPECT_EQ(r.code, cli::kIo);
  EXPECT_NE(r.err.find((dir / "nope").string()), std::string::npos);
}

TEST(GenData, InvalidConfigIsUsageError) {
  const auto dir = scratch("gen_bad");
  EXPECT_EQ(run({"gen-data", "--out", (dir / "d.json").string(), "--vocab", "1"}).code,
            cli::kUsage);
}

TEST(Train, OneEpochLogAndCheckpoint) {
  const auto dir = scratch("train");
  ASSERT_EQ(run(small_data_flags(dir / "d.json", 1)).code, 0);
  const auto r = run({"train", "--data", (dir / "d.json").string(), "--out",
                      (dir / "run").string(), "--epochs", "1", "--lambda", "0"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto csv = read_text_file(dir / "run" / "train_log.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), monalign::train::kTrainLogHeader);
  EXPECT_NO_THROW(monalign::model::load_checkpoint(dir / "run" / "checkpoint.json"));
}

TEST(Train, MissingDataIsIoError) {
  const auto dir = scratch("train_missing");
  const auto r = run({"train", "--data", (dir / "none.json").string(), "--out",
                      (dir / "run").string()});
  EXPECT_EQ(r.code, cli::kIo);
  EXPECT_NE(r.err.find("none.json"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "run"));
}

TEST(Train, DivergenceExitCodeNamesEpoch) {
  const auto dir = scratch("train_div");
  ASSERT_EQ(run(small_data_flags(dir / "d.json", 2)).code, 0);
  auto j = monalign::io::read_json_file(dir / "d.json");
  j["splits"]["train"][0]["frames"][0][0] = 1e300;
  write_text_file(dir / "d.json", monalign::io::dump_json(j));
  const auto r = run({"train", "--data", (dir / "d.json").string(), "--out",
                      (dir / "run").string(), "--epochs", "2"});
  EXPECT_EQ(r.code, cli::kNumerical);
  EXPECT_NE(r.err.find("epoch 1"), std::string::npos);
}

TEST(Train, BadHyperparameterIsUsageError) {
  const auto dir = scratch("train_bad");
  ASSERT_EQ(run(small_data_flags(dir / "d.json", 2)).code, 0);
  EXPECT_EQ(run({"train", "--data", (dir / "d.json").string(), "--out",
                 (dir / "run").string(), "--lambda", "-1"}).code,
            cli::kUsage);
  EXPECT_EQ(run({"train", "--data", (dir / "d.json").string(), "--out",
                 (dir / "run").string(), "--epochs", "0"}).code,
            cli::kUsage);
}

TEST(Sweep, OneRowAndSchema) {
  const auto dir = scratch("sweep");
  ASSERT_EQ(run(small_data_flags(dir / "d.json", 3)).code, 0);
  const auto r = run({"sweep", "--data", (dir / "d.json").string(), "--out",
                      (dir / "s").string(), "--lambdas", "0", "--epochs", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto csv = read_text_file(dir / "s" / "sweep.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
  EXPECT_NE(csv.find("first_monotonic_epoch"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "s" / "sweep_runs.csv"));
}

TEST(Analyze, DiagonalAntiDiagonalAndMalformed) {
  const auto dir = scratch("analyze");
  write_text_file(dir / "diag.csv", "3,3\n1,0,0\n0,1,0\n0,0,1\n");
  write_text_file(dir / "anti.csv", "3,3\n0,0,1\n0,1,0\n1,0,0\n");
  write_text_file(dir / "bad.csv", "2,1\n0.4\n0.4\n");
  auto r = run({"analyze", "--alignment", (dir / "diag.csv").string(), "--delta", "0.01"});
  ASSERT_EQ(r.code, 0);
  auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["loss"].get<double>(), 0.0);
  EXPECT_EQ(j["violation_count"].get<int>(), 0);

  r = run({"analyze", "--alignment", (dir / "anti.csv").string()});
  ASSERT_EQ(r.code, 0);
  j = nlohmann::json::parse(r.out);
  EXPECT_NEAR(j["loss"].get<double>(), 0.6733333, 1e-6);
  EXPECT_EQ(j["violation_count"].get<int>(), 2);

  r = run({"analyze", "--alignment", (dir / "bad.csv").string()});
  EXPECT_EQ(r.code, cli::kUsage);
  EXPECT_NE(r.err.find("tolerance"), std::string::npos);

  r = run({"analyze", "--alignment", (dir / "missing.csv").string()});
  EXPECT_EQ(r.code, cli::kIo);
}

TEST(Gradcheck, PassesAndCatchesCorruption) {
  auto r = run({"gradcheck", "--seed", "3"});
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
  r = run({"gradcheck", "--seed", "3", "--corrupt-op", "conv1d"});
  EXPECT_EQ(r.code, cli::kNumerical);
  EXPECT_NE(r.err.find("conv1d"), std::string::npos);
  EXPECT_EQ(run({"gradcheck", "--corrupt-op", "nonsense"}).code, cli::kUsage);
}

TEST(Binary, ExitCodesThroughTheProcess) {
  const auto dir = scratch("binary");
  auto status = [](const std::string& cmd) {
    const int s = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
  };
  const std::string exe = MONALIGN_CLI_PATH;
  EXPECT_EQ(status(exe + " --help"), 0);
  EXPECT_EQ(status(exe + " train --nope"), 1);
  EXPECT_EQ(status(exe + " gen-data --out " + (dir / "x" / "d.json").string()), 3);
  write_text_file(dir / "bad.csv", "1,2\n1,0.5\n");
  EXPECT_EQ(status(exe + " analyze --alignment " + (dir / "bad.csv").string()), 1);
}

}  // namespace
