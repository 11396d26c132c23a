#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>

#include "istn.hpp"

using namespace istn;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args, const fs::path& cwd) {
  const std::string cmd = "cd '" + cwd.string() + "' && '" + ISTN_CLI_PATH + "' " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  while (std::fgets(buf, sizeof buf, p)) r.out += buf;
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("istn_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

bool single_error_line(const std::string& out, const std::string& prefix) {
  std::size_t lines = 0, pos = 0, hits = 0;
  while (pos < out.size()) {
    const auto end = out.find('\n', pos);
    const std::string line = out.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
    if (line.rfind("ERR_", 0) == 0) {
      ++lines;
      hits += line.rfind(prefix + ": ", 0) == 0;
    }
    if (end == std::string::npos) break;
    pos = end + 1;
  }
  return lines == 1 && hits == 1;
}

int count_sample_dirs(const fs::path& d) {
  int n = 0;
  for (const auto& e : fs::directory_iterator(d)) n += e.is_directory();
  return n;
}

}  // namespace

TEST_F(Cli, GenerateDefaultSplit) {
  const auto r = run("generate --out d", dir_);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(count_sample_dirs(dir_ / "d" / "train"), 100);
  EXPECT_EQ(count_sample_dirs(dir_ / "d" / "val"), 10);
  EXPECT_EQ(count_sample_dirs(dir_ / "d" / "test"), 100);
}

TEST_F(Cli, GenerateSameSeedSameHash) {
  ASSERT_EQ(run("generate --pairs 4 --val 2 --seed 77 --out a", dir_).code, 0);
  ASSERT_EQ(run("generate --pairs 4 --val 2 --seed 77 --out b", dir_).code, 0);
  ASSERT_EQ(run("generate --pairs 4 --val 2 --seed 78 --out c", dir_).code, 0);
  const auto h = [&](const char* d) { return read_json(dir_ / d / "manifest.json").at("content_hash"); };
  EXPECT_EQ(h("a"), h("b"));
  EXPECT_NE(h("a"), h("c"));
}

TEST_F(Cli, GenerateUsageErrors) {
  auto r = run("generate --pairs 0 --out d", dir_);
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(single_error_line(r.out, "ERR_USAGE")) << r.out;
  EXPECT_FALSE(fs::exists(dir_ / "d"));

  ASSERT_EQ(run("generate --pairs 2 --val 1 --out d", dir_).code, 0);
  r = run("generate --pairs 2 --val 1 --out d", dir_);
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(single_error_line(r.out, "ERR_USAGE")) << r.out;
  EXPECT_EQ(run("generate --pairs 2 --val 1 --out d --force", dir_).code, 0);

  r = run("generate --kind sideways --out e", dir_);
  EXPECT_EQ(r.code, 2);
  r = run("bogus", dir_);
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(single_error_line(r.out, "ERR_USAGE")) << r.out;
  r = run("generate --pairs", dir_);
  EXPECT_EQ(r.code, 2);
}

TEST_F(Cli, DryRunWritesNothing) {
  ASSERT_EQ(run("generate --pairs 3 --val 1 --out data", dir_).code, 0);
  const auto before = std::distance(fs::directory_iterator(dir_), fs::directory_iterator{});
  auto r = run("experiment --dry-run --conflict-data data --out res", dir_);
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("train ISTN-e"), std::string::npos) << r.out;
  r = run("generate --dry-run --out other", dir_);
  EXPECT_EQ(r.code, 0);
  r = run("train --dry-run --data data --variant STN-u --out ck", dir_);
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(std::distance(fs::directory_iterator(dir_), fs::directory_iterator{}), before);
}

TEST_F(Cli, TrainRegisterEvaluate) {
  ASSERT_EQ(run("generate --pairs 6 --val 2 --out data", dir_).code, 0);
  auto r = run("train --data data --variant ISTN-i --epochs 2 --out ck", dir_);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(dir_ / "ck" / "ISTN-i.ckpt"));
  EXPECT_TRUE(fs::exists(dir_ / "ck" / "ISTN-i_record.json"));
  EXPECT_TRUE(fs::exists(dir_ / "ck" / "ISTN-i_loss.svg"));

  const auto seeds = read_json(dir_ / "data" / "test" / "manifest.json").at("seeds");
  const std::string pair = "data/test/" + std::to_string(seeds[0].get<std::uint64_t>());
  r = run("register --model ck/ISTN-i.ckpt --moving " + pair + "/M.pgm --fixed " + pair +
              "/F.pgm --refine --iters 15 --out reg",
          dir_);
  ASSERT_EQ(r.code, 0) << r.out;
  for (const char* f : {"params.txt", "warped.pgm", "trace.json", "convergence.svg"}) {
    EXPECT_TRUE(fs::exists(dir_ / "reg" / f)) << f;
  }
  const Json trace = read_json(dir_ / "reg" / "trace.json");
  EXPECT_EQ(trace.at("losses").size(), trace.at("iterations_run").get<std::size_t>());
  const auto params = read_params(dir_ / "reg" / "params.txt");
  EXPECT_TRUE(AffineBounds{}.contains(params));

  r = run("register --model ck/ISTN-i.ckpt --moving " + pair + "/M.pgm --fixed " + pair +
              "/F.pgm --refine --external --iters 20 --out reg2",
          dir_);
  ASSERT_EQ(r.code, 0) << r.out;

  r = run("evaluate --models ck/ISTN-i.ckpt --data data --max-pairs 2 --out ev --config ev.json", dir_);
  EXPECT_EQ(r.code, 3) << r.out;  // missing config file
  write_text(dir_ / "ev.json", R"({"refine": {"max_iters": 5}, "external": {"iters": 10, "random_restarts": 1}})");
  r = run("evaluate --models ck/ISTN-i.ckpt --data data --max-pairs 2 --out ev --config ev.json", dir_);
  ASSERT_EQ(r.code, 0) << r.out;
  for (const char* f : {"table.json", "table.csv", "table.txt", "table_dice.svg", "table_asd.svg"}) {
    EXPECT_TRUE(fs::exists(dir_ / "ev" / f)) << f;
  }
}

TEST_F(Cli, ErrorCodes) {
  auto r = run("register --model nothing.ckpt --moving a.pgm --fixed b.pgm --out x", dir_);
  EXPECT_EQ(r.code, 3);
  EXPECT_TRUE(single_error_line(r.out, "ERR_DATA")) << r.out;

  // a checkpoint whose head produces NaN
  BundleSpec spec;
  spec.variant = Variant::stn_u;
  ModelBundle b = make_bundle(spec, 1);
  b.stn.params().tensor("stn.fc2.bias")[0] = std::nan("");
  save_checkpoint(dir_ / "nan.ckpt", b);
  const auto s = generate_conflict_pair(1, SynthConfig{});
  write_raster(dir_ / "m.pgm", s.moving, {0, 1});
  write_raster(dir_ / "f.pgm", s.fixed, {0, 1});
  r = run("register --model nan.ckpt --moving m.pgm --fixed f.pgm --out x", dir_);
  EXPECT_EQ(r.code, 4);
  EXPECT_TRUE(single_error_line(r.out, "ERR_NUMERIC")) << r.out;

  r = run("register --model nan.ckpt --moving m.pgm", dir_);
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(single_error_line(r.out, "ERR_USAGE")) << r.out;
}

TEST_F(Cli, ExperimentAndRerun) {
  ASSERT_EQ(run("generate --pairs 4 --val 2 --seed 3 --out conflict", dir_).code, 0);
  ASSERT_EQ(run("generate --kind plain --pairs 4 --val 2 --seed 9 --out plain", dir_).code, 0);
  write_text(dir_ / "x.json", R"({"conflict_data": "conflict", "plain_data": "plain",
    "train": {"epochs": 2, "batch_size": 4},
    "refine": {"max_iters": 10},
    "external": {"iters": 20, "random_restarts": 1}})");
  auto r = run("experiment --config x.json --out res", dir_);
  ASSERT_EQ(r.code, 0) << r.out;
  std::set<std::string> top;
  for (const auto& e : fs::directory_iterator(dir_ / "res")) top.insert(e.path().filename().string());
  EXPECT_EQ(top, (std::set<std::string>{"checkpoints", "manifest.json", "plots", "tables"}));
  std::set<std::string> ckpts;
  for (const auto& e : fs::directory_iterator(dir_ / "res" / "checkpoints")) ckpts.insert(e.path().filename().string());
  EXPECT_EQ(ckpts, (std::set<std::string>{"ISTN-e.ckpt", "ISTN-i.ckpt", "STN-s.ckpt", "STN-u.ckpt"}));
  EXPECT_TRUE(fs::exists(dir_ / "res" / "tables" / "conflict.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "res" / "plots" / "conflict_dice.svg"));
  EXPECT_TRUE(fs::exists(dir_ / "res" / "plots" / "ISTN-e_itn_montage.png"));

  const Json m = read_json(dir_ / "res" / "manifest.json");
  EXPECT_EQ(m.at("tool_version"), ISTN_VERSION);
  EXPECT_EQ(m.at("checkpoints").at("STN-u").at("sha256"), sha256_file(dir_ / "res" / "checkpoints" / "STN-u.ckpt"));
  EXPECT_FALSE(m.at("commands").empty());

  r = run("experiment --from-manifest res/manifest.json --out res2", dir_);
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("within 0.01"), std::string::npos) << r.out;

  // changed data is refused
  write_raster(dir_ / "conflict" / "train" / read_json(dir_ / "conflict" / "train" / "manifest.json")
                                                 .at("seeds")[0]
                                                 .dump() /
                   "M.pgm",
               Image(32, 32), {0, 1});
  r = run("experiment --from-manifest res/manifest.json --out res3", dir_);
  EXPECT_EQ(r.code, 3) << r.out;
  EXPECT_TRUE(single_error_line(r.out, "ERR_DATA")) << r.out;
}
