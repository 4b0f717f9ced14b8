// Copyright 2026 The thermaldet Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include "thermaldet/cli.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace thermaldet {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code = 0;
  std::string out, err;
};

Result run(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"thermaldet"};
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Result r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("thermaldet_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

TEST_F(CliTest, UsageErrorsExitWithTwo) {
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"no-such-command"}).code, 2);
  EXPECT_EQ(run({"gen-data", "--seed", "1"}).code, 2);  // --n and --out missing
  EXPECT_EQ(run({"gen-data", "--n", "3", "--paired", "1.5", "--out", path("x.jsonl")}).code, 2);
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST_F(CliTest, GenDataIsByteIdenticalForASeed) {
  ASSERT_EQ(run({"gen-data", "--n", "8", "--seed", "3", "--paired", "0.5", "--out", path("a.jsonl")}).code, 0);
  ASSERT_EQ(run({"gen-data", "--n", "8", "--seed", "3", "--paired", "0.5", "--out", path("b.jsonl")}).code, 0);
  ASSERT_EQ(run({"gen-data", "--n", "8", "--seed", "4", "--paired", "0.5", "--out", path("c.jsonl")}).code, 0);
  EXPECT_EQ(slurp(path("a.jsonl")), slurp(path("b.jsonl")));
  EXPECT_NE(slurp(path("a.jsonl")), slurp(path("c.jsonl")));
  EXPECT_EQ(read_records(path("a.jsonl")).size(), 8u);
}

TEST_F(CliTest, AdaptCaptionsStripsStoplistedWords) {
  ASSERT_EQ(run({"gen-data", "--n", "6", "--seed", "1", "--paired", "1", "--out", path("in.jsonl")}).code, 0);
  const std::string stop = path("stop.txt");
  std::ofstream(stop) << "the\n";
  ASSERT_EQ(run({"adapt-captions", "--in", path("in.jsonl"), "--out", path("out.jsonl"), "--stoplist", stop}).code, 0);
  const auto before = read_records(path("in.jsonl"));
  const auto after = read_records(path("out.jsonl"));
  ASSERT_EQ(before.size(), after.size());
  for (std::size_t i = 0; i < after.size(); ++i) {
    EXPECT_EQ((" " + after[i].caption + " ").find(" the "), std::string::npos) << after[i].caption;
    EXPECT_EQ(after[i].boxes, before[i].boxes);
  }
}

TEST_F(CliTest, UnknownConfigKeyIsAnError) {
  const Result r = run({"train", "--set", "no_such_key=1", "--out", path("run")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("error:"), std::string::npos);
}

TEST_F(CliTest, TrainEvalReportAndManifestRerun) {
  ASSERT_EQ(run({"gen-data", "--n", "16", "--seed", "5", "--paired", "0.5", "--out", path("train.jsonl")}).code, 0);
  ASSERT_EQ(run({"gen-data", "--n", "6", "--seed", "6", "--out", path("eval.jsonl")}).code, 0);
  const std::vector<std::string> common{"--steps", "6", "--set", "warmup_steps=2", "--set", "batch_size=4"};
  std::vector<std::string> args{"train", "--train-data", path("train.jsonl"), "--eval-data", path("eval.jsonl"),
                                "--out", path("run1")};
  args.insert(args.end(), common.begin(), common.end());
  const Result t1 = run(args);
  ASSERT_EQ(t1.code, 0) << t1.err;
  for (const char* f : {"manifest.json", "checkpoint.json", "metrics.jsonl", "eval.json"}) {
    EXPECT_TRUE(fs::exists(dir_ / "run1" / f)) << f;
  }

  // Rerunning from the manifest alone reproduces the logs bit for bit.
  const Result t2 = run({"train", "--manifest", path("run1/manifest.json"), "--out", path("run2")});
  ASSERT_EQ(t2.code, 0) << t2.err;
  EXPECT_EQ(slurp(dir_ / "run1" / "metrics.jsonl"), slurp(dir_ / "run2" / "metrics.jsonl"));
  EXPECT_EQ(slurp(dir_ / "run1" / "checkpoint.json"), slurp(dir_ / "run2" / "checkpoint.json"));

  const Result ev = run({"eval", "--run", path("run1"), "--format", "csv"});
  ASSERT_EQ(ev.code, 0) << ev.err;
  EXPECT_TRUE(fs::exists(dir_ / "run1" / "report.csv"));

  const Result rep = run({"report", "--run", path("run1"), "--run", path("run2")});
  ASSERT_EQ(rep.code, 0) << rep.err;
  EXPECT_EQ(rep.out.rfind("run,AP,AP50,AP75\n", 0), 0u);
  EXPECT_NE(rep.out.find("run1,"), std::string::npos);
  EXPECT_NE(rep.out.find("run2,"), std::string::npos);
}

TEST_F(CliTest, ManifestRerunRejectsAlteredData) {
  ASSERT_EQ(run({"gen-data", "--n", "8", "--seed", "5", "--paired", "0.5", "--out", path("train.jsonl")}).code, 0);
  ASSERT_EQ(run({"gen-data", "--n", "4", "--seed", "6", "--out", path("eval.jsonl")}).code, 0);
  ASSERT_EQ(run({"train", "--steps", "2", "--set", "warmup_steps=1", "--train-data", path("train.jsonl"),
                 "--eval-data", path("eval.jsonl"), "--out", path("run1")})
                .code,
            0);
  ASSERT_EQ(run({"gen-data", "--n", "8", "--seed", "9", "--paired", "0.5", "--out", path("train.jsonl")}).code, 0);
  const Result r = run({"train", "--manifest", path("run1/manifest.json"), "--out", path("run2")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("does not match the manifest"), std::string::npos) << r.err;
}

}  // namespace
}  // namespace thermaldet
