#include "icl/cli.hpp"

#include <gtest/gtest.h>

#include "json.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

Result run(const std::string& args, const std::string& env = "") {
  const fs::path err = fs::temp_directory_path() / "icl_cli_stderr.txt";
  const std::string cmd = env + " " + ICL_LAB_BIN + " " + args + " 2>" + err.string();
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  for (std::size_t n; (n = fread(buf, 1, sizeof buf, p)) > 0;) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(err);
  std::stringstream ss;
  ss << in.rdbuf();
  r.err = ss.str();
  return r;
}

}  // namespace

TEST(Cli, HelpExitsZero) {
  const Result r = run("--help");
  EXPECT_EQ(r.code, icl::kExitOk);
  EXPECT_NE(r.out.find("gen-data"), std::string::npos);
  EXPECT_NE(r.out.find("oracle"), std::string::npos);
}

TEST(Cli, UnknownSubcommandIsConfigError) {
  const Result r = run("frobnicate");
  EXPECT_EQ(r.code, icl::kExitConfig);
  const auto pos = r.err.rfind("{\"error\"");
  ASSERT_NE(pos, std::string::npos) << r.err;
  const json e = json::parse(r.err.substr(pos));
  EXPECT_NE(e["error"].get<std::string>().find("frobnicate"), std::string::npos);
}

TEST(Cli, InvalidTaskParameterIsConfigError) {
  const Result r = run("gen-data --task recall --n 8 --t 16 --alpha 1.5 --count 2");
  EXPECT_EQ(r.code, icl::kExitConfig);
  EXPECT_NE(r.err.find("alpha"), std::string::npos) << r.err;
}

TEST(Cli, MissingConfigFileIsConfigError) {
  const Result r = run("run /nonexistent/config.json");
  EXPECT_EQ(r.code, icl::kExitConfig);
}

TEST(Cli, DivergenceIsNumericError) {
  const fs::path dir = fs::temp_directory_path() / "icl_cli_diverge";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const json cfg = {{"name", "diverge"},
                    {"task", {{"N", 8}, {"T", 12}}},
                    {"model", {{"d", 16}, {"ff", {"mlp", "mlp"}}, {"init_sigma", 3.0}}},
                    {"train", {{"lr", 1e12}, {"batch_size", 8}, {"phases", {{{"steps", 20}, {"alpha", 0.3}}}},
                               {"eval_every", 0}}},
                    {"eval", {{"m_test", 8}}}};
  std::ofstream(dir / "cfg.json") << cfg.dump();
  const Result r = run("--out " + (dir / "out").string() + " train --config " + (dir / "cfg.json").string());
  EXPECT_EQ(r.code, icl::kExitNumeric) << r.err;
  EXPECT_TRUE(fs::exists(dir / "out" / "failed" / "error.json"));
  fs::remove_all(dir);
}

TEST(Cli, GenDataIsSeedDeterministic) {
  const Result a = run("--seed 7 gen-data --task recall --n 8 --t 16 --alpha 0.3 --count 5");
  const Result b = run("--seed 7 gen-data --task recall --n 8 --t 16 --alpha 0.3 --count 5");
  const Result c = run("--seed 8 gen-data --task recall --n 8 --t 16 --alpha 0.3 --count 5");
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.out, b.out);
  EXPECT_NE(a.out, c.out);
  std::istringstream in(a.out);
  int n = 0;
  for (std::string line; std::getline(in, line); ++n) {
    const json j = json::parse(line);
    EXPECT_EQ(j["z"].size(), 16u);
  }
  EXPECT_EQ(n, 5);
}

TEST(Cli, GenDataIoiAndAssoc) {
  const Result ioi = run("gen-data --task ioi --n 8 --t 16 --alpha 0.0 --count 3");
  ASSERT_EQ(ioi.code, 0) << ioi.err;
  const json first = json::parse(ioi.out.substr(0, ioi.out.find('\n')));
  EXPECT_EQ(first["y"], first["ybar"]);
  const Result assoc = run("gen-data --task assoc --n 3 --alpha 1.0 --count 4");
  ASSERT_EQ(assoc.code, 0) << assoc.err;
  EXPECT_NE(assoc.out.find("\"y\":3"), std::string::npos) << assoc.out;
}

TEST(Cli, ThreadsEnvironmentDoesNotChangeResults) {
  const std::string args = "oracle one-step --n 8 --t 16 --alpha 0.3 --m 3000";
  const Result a = run(args, "ICL_LAB_THREADS=1");
  const Result b = run(args, "ICL_LAB_THREADS=3");
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.out, b.out);
}

TEST(Cli, ResolveThreadsPrecedence) {
  EXPECT_EQ(icl::resolve_threads(4, true), 1);
  setenv("ICL_LAB_THREADS", "3", 1);
  EXPECT_EQ(icl::resolve_threads(4, false), 3);
  unsetenv("ICL_LAB_THREADS");
  EXPECT_EQ(icl::resolve_threads(4, false), 4);
  EXPECT_GE(icl::resolve_threads(0, false), 1);
}

TEST(Cli, OracleReportIsJsonWithPassField) {
  const Result r = run("oracle moments --n 8 --t 32 --alpha 0.3 --m 2000");
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(r.out);
  EXPECT_EQ(j["oracle"], "moments");
  EXPECT_EQ(j["cases"].size(), 7u);
  EXPECT_TRUE(j.contains("pass"));
}

TEST(Cli, AssocmemWritesTrajectories) {
  const fs::path dir = fs::temp_directory_path() / "icl_cli_assoc";
  fs::remove_all(dir);
  const Result r = run("--out " + dir.string() +
                       " assocmem --n 2 --d 4 --alpha 0.3 --lr 0.05 --steps 100 --mode ortho --seeds 2 --record-every 50");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "seed_0" / "trajectory.csv"));
  EXPECT_TRUE(fs::exists(dir / "seed_1" / "trajectory.csv"));
  EXPECT_TRUE(fs::exists(dir / "manifest.json"));
  fs::remove_all(dir);
}

TEST(Cli, TrainThenLaserAndEval) {
  const fs::path dir = fs::temp_directory_path() / "icl_cli_train";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const json cfg = {{"name", "tiny"},
                    {"task", {{"N", 8}, {"T", 12}}},
                    {"model", {{"d", 24}, {"ff", {"mlp", "mlp"}}}},
                    {"train", {{"lr", 0.05}, {"batch_size", 8}, {"phases", {{{"steps", 2}, {"alpha", 0.3}}}},
                               {"eval_every", 1}}},
                    {"eval", {{"m_test", 16}}}};
  std::ofstream(dir / "cfg.json") << cfg.dump();
  const fs::path out = dir / "run";
  ASSERT_EQ(run("--out " + out.string() + " train --config " + (dir / "cfg.json").string()).code, 0);
  const std::string ckpt = (out / "checkpoint").string();
  const Result ev = run("eval --ckpt " + ckpt + " --m-test 16");
  ASSERT_EQ(ev.code, 0) << ev.err;
  EXPECT_TRUE(json::parse(ev.out).contains("p_noise"));
  const fs::path sweep = dir / "sweep";
  const Result ls = run("--out " + sweep.string() + " laser --ckpt " + ckpt +
                        " --matrix ff2.u_in --rho 1.0 --rho 0.0 --m-test 16");
  ASSERT_EQ(ls.code, 0) << ls.err;
  EXPECT_TRUE(fs::exists(sweep / "sweep.csv"));
  const Result bad = run("laser --ckpt " + ckpt + " --matrix nope --rho 0.5");
  EXPECT_EQ(bad.code, icl::kExitConfig);
  fs::remove_all(dir);
}
