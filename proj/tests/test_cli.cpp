#include "causerank/cli.hpp"

#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <sys/wait.h>

using namespace causerank;
namespace fs = std::filesystem;

namespace {

const fs::path kData = CAUSERANK_DATA_DIR;

struct Outcome {
  int code = 0;
  std::string out;
  std::string err;
};

Outcome cli_run(std::vector<std::string> args) {
  args.insert(args.begin(), "causerank");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  Outcome o;
  o.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  o.out = out.str();
  o.err = err.str();
  return o;
}

// Runs the installed binary; returns (exit status, stdout).
std::pair<int, std::string> spawn(const std::string& args) {
  const std::string cmd = std::string(CAUSERANK_CLI) + " " + args + " 2>/dev/null";
  FILE* p = popen(cmd.c_str(), "r");
  std::string out;
  std::array<char, 4096> buf{};
  while (std::size_t n = fread(buf.data(), 1, buf.size(), p)) out.append(buf.data(), n);
  const int status = pclose(p);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("causerank-cli-" + std::to_string(::getpid()) + "-" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string table() {
    const auto path = (dir_ / "s.cft").string();
    auto o = cli_run({"query", (kData / "fixtures" / "pipeline.jsonl").string(), (kData / "queries" / "session.dsl").string(),
                      "--out", path});
    EXPECT_EQ(o.code, 0) << o.err;
    return path;
  }

  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, UsageErrorsExitOne) {
  EXPECT_EQ(cli_run({}).code, 1);
  EXPECT_EQ(cli_run({"bogus"}).code, 1);
  EXPECT_EQ(cli_run({"rank"}).code, 1);
  EXPECT_EQ(cli_run({"--help"}).code, 0);
}

TEST_F(CliTest, IngestAndQuery) {
  const auto ds = (dir_ / "ds.jsonl").string();
  auto o = cli_run({"ingest", (kData / "fixtures" / "pipeline.jsonl").string(), "--out", ds});
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_NE(o.err.find("ingested 3892 records"), std::string::npos) << o.err;
  const auto rows = (dir_ / "rows.jsonl").string();
  o = cli_run({"query", ds, (kData / "queries" / "disk_by_host.dsl").string(), "--out", (dir_ / "t.cft").string(), "--rows", rows});
  ASSERT_EQ(o.code, 0) << o.err;
  const auto t = load_family_table((dir_ / "t.cft").string());
  EXPECT_TRUE(t.contains("*{host=NULL}"));
  EXPECT_TRUE(fs::file_size(rows) > 0);
}

TEST_F(CliTest, QuerySyntaxErrorExitsOne) {
  const auto bad = dir_ / "bad.dsl";
  cli::write_file(bad, "FAMILY BY name SELECT");
  auto o = cli_run({"query", (kData / "fixtures" / "pipeline.jsonl").string(), bad.string(), "--out", (dir_ / "x.cft").string()});
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.err.find("line 1"), std::string::npos) << o.err;
}

TEST_F(CliTest, RankEmitsJsonlAndJson) {
  const auto t = table();
  auto o = cli_run({"rank", t, "--target", "runtime{pipeline_name=etl}", "--method", "l2", "--top-k", "3"});
  ASSERT_EQ(o.code, 0) << o.err;
  std::istringstream in(o.out);
  std::vector<nlohmann::json> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(nlohmann::json::parse(l));
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[0]["rank"], 1);
  EXPECT_EQ(lines[0]["family"], "input{pipeline_name=etl}");

  o = cli_run({"rank", t, "--target", "runtime{pipeline_name=etl}", "--method", "corrmax", "--format", "json"});
  ASSERT_EQ(o.code, 0) << o.err;
  const auto j = nlohmann::json::parse(o.out);
  EXPECT_EQ(j["method"], "corrmax");
  EXPECT_EQ(j["target"], "runtime{pipeline_name=etl}");
  EXPECT_FALSE(j["entries"][0].contains("timing_ms"));
}

TEST_F(CliTest, RankUserErrors) {
  const auto t = table();
  auto o = cli_run({"rank", t, "--target", "runtime{pipeline_name=etl}", "--method", "lasso"});
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.err.find("valid methods"), std::string::npos);
  EXPECT_EQ(cli_run({"rank", t, "--target", "nope"}).code, 1);
  EXPECT_EQ(cli_run({"rank", t, "--target", "runtime{pipeline_name=etl}", "--condition", "runtime{pipeline_name=etl}"}).code, 1);
  EXPECT_EQ(cli_run({"rank", t, "--target", "runtime{pipeline_name=etl}", "--range", "5"}).code, 1);
  EXPECT_EQ(cli_run({"rank", t, "--target", "runtime{pipeline_name=etl}", "--pseudocause", "seasonal:1"}).code, 1);
  EXPECT_EQ(cli_run({"rank", t, "--target", "runtime{pipeline_name=etl}", "--pseudocause", "seasonal:x"}).code, 1);
}

TEST_F(CliTest, RankWithPseudocauseAndRange) {
  const auto t = table();
  auto o = cli_run({"rank", t, "--target", "runtime{pipeline_name=etl}", "--pseudocause", "trend:10", "--range",
                    "28000000..28000099", "--format", "json"});
  ASSERT_EQ(o.code, 0) << o.err;
  const auto j = nlohmann::json::parse(o.out);
  EXPECT_EQ(j["condition"][0], "pseudocause/trend(runtime{pipeline_name=etl},10)");
  EXPECT_EQ(j["range"], nlohmann::json({28000000, 28000099}));
}

TEST_F(CliTest, SynthThenEval) {
  auto o = cli_run({"synth", "chain", "--seed", "3", "--out", (dir_ / "chain").string(), "--families", "10", "--t", "300", "--table"});
  ASSERT_EQ(o.code, 0) << o.err;
  for (const char* f : {"records.jsonl", "labels.json", "scenario.json", "families.dsl", "table.cft"})
    EXPECT_TRUE(fs::exists(dir_ / "chain" / f)) << f;
  o = cli_run({"eval", (dir_ / "chain").string(), "--methods", "l2,corrmax"});
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_NE(o.out.find("harmonic"), std::string::npos) << o.out;
  EXPECT_EQ(cli_run({"synth", "weird", "--out", (dir_ / "w").string()}).code, 1);
}

TEST_F(CliTest, EvalSuite) {
  auto o = cli_run({"eval", (kData / "scenarios").string(), "--methods", "corrmax,l2,l2-p50"});
  ASSERT_EQ(o.code, 0) << o.err;
  for (const char* row : {"01-univariate", "05-univariate-effects", "harmonic", "average", "stdev", "success@1", "success@20"})
    EXPECT_NE(o.out.find(row), std::string::npos) << row << "\n" << o.out;
}

TEST(CliBinary, ExitCodesAndDeterministicOutput) {
  EXPECT_EQ(spawn("").first, 1);
  EXPECT_EQ(spawn("--version").first, 0);
  const auto dir = fs::temp_directory_path() / ("causerank-bin-" + std::to_string(::getpid()));
  fs::create_directories(dir);
  const auto t = (dir / "t.cft").string();
  ASSERT_EQ(spawn("query " + (kData / "fixtures" / "pipeline.jsonl").string() + " " + (kData / "queries" / "session.dsl").string() +
                  " --out " + t).first,
            0);
  const auto a = spawn("rank " + t + " --target 'runtime{pipeline_name=report}' --method l2-p50 --workers 1");
  const auto b = spawn("rank " + t + " --target 'runtime{pipeline_name=report}' --method l2-p50 --workers 3");
  EXPECT_EQ(a.first, 0);
  EXPECT_EQ(a.second, b.second);
  EXPECT_FALSE(a.second.empty());
  EXPECT_EQ(spawn("rank " + t + " --target missing").first, 1);
  fs::remove_all(dir);
}
