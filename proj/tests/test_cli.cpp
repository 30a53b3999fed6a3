#include <gtest/gtest.h>
#include <sys/wait.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "mbo/data.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string output;
};

Result run_cli(const std::string& args) {
  const fs::path log = fs::temp_directory_path() / "mbo-cli-test.log";
  const std::string cmd = std::string(MBO_VALBENCH_BIN) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream is(log);
  std::stringstream ss;
  ss << is.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mbo-cli-" + name);
  fs::remove_all(p);
  return p;
}

const std::string kTiny =
    " --net.width 16 --net.depth 2 --net.time_embed_dim 8 --net.label_embed_dim 4"
    " --diffusion.T 20 --diffusion.epochs 4 --diffusion.n_eval 2 --diffusion.lr 0.001"
    " --oracle.width 16 --oracle.depth 2 --oracle.epochs 10"
    " --guidance.width 16 --guidance.depth 2 --guidance.epochs 3"
    " --metrics.valid_cap 32 --metrics.K 8 --metrics.n_candidates 16 --metrics.cdsm_draws 1";

}  // namespace

TEST(Cli, HelpExitsZero) {
  const Result r = run_cli("run --help");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.output.find("--diffusion.tau"), std::string::npos);
}

TEST(Cli, MissingTaskNameIsConfigError) {
  const fs::path out = fresh_dir("notask");
  const Result r = run_cli("make-data --out " + out.string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("task.name"), std::string::npos) << r.output;
}

TEST(Cli, UnknownKeyIsConfigError) {
  const Result r = run_cli("make-data --task.name sphere2 --set diffusion.temperature=2");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("diffusion.temperature"), std::string::npos) << r.output;
  EXPECT_EQ(run_cli("make-data --task.name sphere2 --no-such-flag").code, 2);
}

TEST(Cli, MissingPrerequisitesExitThree) {
  const fs::path out = fresh_dir("prereq");
  Result r = run_cli("run --task.name sphere2 --out " + out.string());
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.output.find("manifest.json"), std::string::npos) << r.output;
  r = run_cli("report --task.name sphere2 --out " + out.string());
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.output.find("correlation.json"), std::string::npos) << r.output;
  ASSERT_EQ(run_cli("make-data --task.name sphere2 --data.n 100 --out " + out.string()).code, 0);
  r = run_cli("run --task.name sphere2 --data.n 100 --out " + out.string());
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.output.find("validation-"), std::string::npos) << r.output;
  // data made from another configuration counts as missing
  r = run_cli("train-oracle --task.name sphere2 --data.n 200 --out " + out.string());
  EXPECT_EQ(r.code, 3);
}

TEST(Cli, MakeDataManifestAndIdempotence) {
  const fs::path out = fresh_dir("data");
  const std::string args = "make-data --task.name sphere2 --data.n 1000 --data.quantile 0.4 --out " + out.string();
  ASSERT_EQ(run_cli(args).code, 0);
  const auto manifest = nlohmann::json::parse(slurp(out / "data" / "manifest.json"));
  EXPECT_EQ(manifest.at("train_count"), 400);
  EXPECT_EQ(manifest.at("valid_count"), 600);

  // recount from the emitted dataset: rows at or below the 400th smallest reward
  const mbo::LabeledSet full = mbo::load_csv((out / "data" / "dataset.csv").string());
  ASSERT_EQ(full.size(), 1000u);
  std::vector<double> sorted = full.y;
  std::sort(sorted.begin(), sorted.end());
  const double gamma = sorted[399];
  const auto below = std::count_if(full.y.begin(), full.y.end(), [&](double y) { return y <= gamma; });
  EXPECT_EQ(below, 400);
  EXPECT_EQ(mbo::load_csv((out / "data" / "train.csv").string()).size(), 400u);

  const std::string before = slurp(out / "data" / "dataset.csv") + slurp(out / "data" / "manifest.json");
  const Result again = run_cli(args);
  ASSERT_EQ(again.code, 0);
  EXPECT_NE(again.output.find("up to date"), std::string::npos);
  EXPECT_EQ(slurp(out / "data" / "dataset.csv") + slurp(out / "data" / "manifest.json"), before);
}

TEST(Cli, SmokePipelineWithTwoCells) {
  const fs::path out = fresh_dir("smoke");
  const std::string args = "--task.name mixture2 --data.n 300 --set grid.seed=0 "
                           "--set grid.guidance=classifier_free,classifier_based --workers 2" +
                           kTiny + " --out " + out.string();
  Result r = run_cli("study " + args);
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("insufficient data"), std::string::npos) << r.output;

  const auto rep = nlohmann::json::parse(slurp(out / "reports" / "correlation.json"));
  EXPECT_EQ(rep.at("insufficient_data"), true);
  ASSERT_EQ(rep.at("rows").size(), 5u);
  EXPECT_EQ(rep.at("rows")[0].at("metric"), "CDSM");
  EXPECT_EQ(rep.at("rows")[0].at("absent_cells"), nlohmann::json::array({"cell-001"}));
  for (const auto& row : rep.at("rows")) EXPECT_EQ(row.at("status"), "insufficient");
  EXPECT_EQ(rep.at("U").size(), 5u);
  EXPECT_TRUE(rep.at("U")[0][1].is_null());
  for (const char* f : {"scatter.csv", "CDSM.svg", "NEG_REWARD.svg", "AGREEMENT.svg", "FD.svg", "NEG_DC.svg"})
    EXPECT_TRUE(fs::exists(out / "reports" / f)) << f;
  EXPECT_TRUE(fs::exists(out / "runs" / "cell-000" / "record.json"));
  EXPECT_TRUE(fs::exists(out / "runs" / "cell-001" / "eval.json"));
  EXPECT_TRUE(fs::exists(out / "timings.log"));

  // each stage is idempotent
  const std::string record = slurp(out / "runs" / "cell-000" / "record.json");
  const std::string csv = slurp(out / "reports" / "scatter.csv");
  const std::string corr = slurp(out / "reports" / "correlation.json");
  ASSERT_EQ(run_cli("report " + args).code, 0);
  EXPECT_EQ(slurp(out / "reports" / "scatter.csv"), csv);
  ASSERT_EQ(run_cli("run --force " + args).code, 0);
  ASSERT_EQ(run_cli("eval --force " + args).code, 0);
  ASSERT_EQ(run_cli("correlate " + args).code, 0);
  EXPECT_EQ(slurp(out / "runs" / "cell-000" / "record.json"), record);
  EXPECT_EQ(slurp(out / "reports" / "correlation.json"), corr);

  // a changed configuration makes the records stale for eval
  r = run_cli("eval " + args + " --diffusion.tau 0.5");
  EXPECT_EQ(r.code, 3) << r.output;
}

TEST(Cli, WorkerCountFromEnvironment) {
  const fs::path out = fresh_dir("env");
  ASSERT_EQ(run_cli("make-data --task.name sphere2 --data.n 100 --out " + out.string()).code, 0);
  const std::string cmd = "MBO_VALBENCH_WORKERS=zero " + std::string(MBO_VALBENCH_BIN) +
                          " make-data --task.name sphere2 --data.n 100 --out " + out.string() + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  EXPECT_EQ(WEXITSTATUS(status), 2);
}

TEST(Cli, ReferenceMatchesDocs) {
  const fs::path out = fresh_dir("ref");
  fs::create_directories(out);
  ASSERT_EQ(run_cli("reference --output " + (out / "ref.ini").string()).code, 0);
  EXPECT_EQ(slurp(out / "ref.ini"), slurp(fs::path(MBO_SOURCE_DIR) / "docs" / "config-reference.ini"));
}
