#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "ozlab/experiment.hpp"

using namespace ozlab;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("ozlab_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ExperimentConfig parse(const std::string& yaml) { return config_from_yaml(YAML::Load(yaml)); }

ExperimentConfig tiny(const fs::path& out) {
  auto c = parse(
      "run_id: tiny\nseed: 3\nstages: [two_point, halfspace]\n"
      "two_point: {directions: [0, 45], n_max: 8, samples: 20000}\n"
      "halfspace: {L: 2, n_max: 12, samples: 200000}\n");
  c.out = out.string();
  return c;
}

std::string slurp(const fs::path& p) { return read_file(p); }

int run_cli(const std::string& args) {
  const int rc = std::system((std::string(OZLAB_CLI) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST(Experiment, Sha256KnownAnswer) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(Experiment, ConfigDefaultsAndOverrides) {
  const auto c = parse("run_id: a\nmodel: {p: 0.3, q: 2}\nstages: [halfspace]\n");
  EXPECT_EQ(c.run_id, "a");
  EXPECT_DOUBLE_EQ(c.model.p, 0.3);
  EXPECT_DOUBLE_EQ(c.model.q, 2.0);
  EXPECT_EQ(c.stages, std::vector<std::string>{"halfspace"});
  EXPECT_EQ(c.seed, ExperimentConfig{}.seed);
  const auto back = config_from_yaml(YAML::Load(to_json(c).dump()));
  EXPECT_EQ(to_json(back), to_json(c));
}

TEST(Experiment, ConfigRejectsBadInput) {
  EXPECT_THROW(parse("bogus: 1\n"), ConfigError);
  EXPECT_THROW(parse("model: {p: 1.5}\n"), ConfigError);
  EXPECT_THROW(parse("model: {colour: red}\n"), ConfigError);
  EXPECT_THROW(parse("stages: [unknown]\n"), ConfigError);
  EXPECT_THROW(parse("run_id: 'a,b'\n"), ConfigError);
  EXPECT_THROW(parse("model: 3\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/ozlab.yaml"), ConfigError);
}

TEST(Experiment, Directions) {
  EXPECT_EQ(direction_from_degrees(0).w().x, 1.0);
  EXPECT_EQ(direction_from_degrees(90).w().y, 1.0);
  EXPECT_EQ(direction_from_degrees(90).w().x, 0.0);
  EXPECT_NEAR(direction_from_degrees(45).angle(), std::numbers::pi / 4, 1e-15);
  EXPECT_NE(stage_seed(1, "two_point"), stage_seed(1, "halfspace"));
  EXPECT_NE(stage_seed(1, "two_point"), stage_seed(2, "two_point"));
  EXPECT_EQ(stage_seed(5, "wulff"), stage_seed(5, "wulff"));
}

TEST(Experiment, RunIsDeterministicAndManifestReplays) {
  const auto a = scratch("run_a"), b = scratch("run_b");
  const auto m = run_experiment(tiny(a));
  ASSERT_TRUE(m.ok) << m.error;
  for (const char* f : {"two_point.csv", "fits.csv", "halfspace.csv", "ratios.csv", "lengths.csv", "manifest.json"})
    EXPECT_TRUE(fs::exists(a / f)) << f;
  EXPECT_EQ(m.json["status"], "ok");
  EXPECT_EQ(m.json["outputs"]["fits.csv"], file_sha256(a / "fits.csv"));

  auto replay = load_config((a / "manifest.json").string());
  replay.out = b.string();
  ASSERT_TRUE(run_experiment(replay).ok);
  for (const char* f : {"two_point.csv", "fits.csv", "halfspace.csv", "ratios.csv", "lengths.csv"})
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  EXPECT_EQ(slurp(a / "lengths.csv").substr(0, 70),
            std::string("run_id,stage,direction,method,value,stderr,window_lo,window_hi,censored").substr(0, 70));
}

TEST(Experiment, CacheReuse) {
  const auto out = scratch("cache_out"), cache = scratch("cache_dir");
  auto c = tiny(out);
  c.stages = {"halfspace"};
  const auto first = run_experiment(c, {}, cache.string());
  ASSERT_TRUE(first.ok);
  EXPECT_FALSE(first.json["stages"][0]["cached"].get<bool>());
  const auto ratios = slurp(out / "ratios.csv");
  fs::remove(out / "ratios.csv");
  const auto second = run_experiment(c, {}, cache.string());
  ASSERT_TRUE(second.ok);
  EXPECT_TRUE(second.json["stages"][0]["cached"].get<bool>());
  EXPECT_EQ(slurp(out / "ratios.csv"), ratios);
  c.seed = 4;  // a new key
  EXPECT_FALSE(run_experiment(c, {}, cache.string()).json["stages"][0]["cached"].get<bool>());
}

TEST(Experiment, KmrpStageWithGeometricLaw) {
  const auto out = scratch("kmrp");
  std::ofstream(out / "law.json") << R"({"kappa": 0.5, "initial": [[1, 0, 1.0]], "interior": [[1, -1, 0.25], [1, 1, 0.25]]})";
  auto c = parse("run_id: k\nstages: [kmrp]\nkmrp: {clt_n: 50, clt_trials: 2000, bridge_trials: 2000}\n");
  c.kmrp.law = (out / "law.json").string();
  c.out = out.string();
  const auto m = run_experiment(c);
  ASSERT_TRUE(m.ok) << m.error;
  EXPECT_NEAR(m.json["stages"][0]["summary"]["R_p"].get<double>(), 2.0, 1e-12);
  for (const char* f : {"rates.csv", "clt.csv", "bridge.csv"}) EXPECT_TRUE(fs::exists(out / f)) << f;
}

TEST(Experiment, StageErrorsAreReported) {
  auto c = parse("run_id: e\nstages: [halfspace]\nmodel: {q: 2}\n");
  c.out = scratch("err").string();
  const auto m = run_experiment(c);
  EXPECT_FALSE(m.ok);
  EXPECT_EQ(m.json["status"], "failed");
  auto k = parse("run_id: e\nstages: [kmrp]\nkmrp: {law: /nonexistent.json}\n");
  k.out = c.out;
  const auto mk = run_experiment(k);
  EXPECT_FALSE(mk.ok);
  EXPECT_TRUE(mk.usage_error);
}

TEST(Experiment, ReportIndex) {
  const auto out = scratch("report");
  auto c = tiny(out);
  ASSERT_TRUE(run_experiment(c).ok);
  const auto idx = report_index(out);
  std::set<std::string> kinds;
  for (const auto& p : idx["plots"]) kinds.insert(p["kind"].get<std::string>());
  EXPECT_TRUE(kinds.count("oz_fit"));
  EXPECT_TRUE(kinds.count("survival_ratios"));
  EXPECT_FALSE(kinds.count("wulff"));
}

TEST(Cli, ExitCodes) {
  const auto dir = scratch("cli");
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("frobnicate"), 2);
  EXPECT_EQ(run_cli("run --bogus"), 2);
  EXPECT_EQ(run_cli("run /nonexistent/config.yaml"), 2);
  std::ofstream(dir / "bad.yaml") << "model: {p: 7}\n";
  EXPECT_EQ(run_cli("run " + (dir / "bad.yaml").string()), 2);
  std::ofstream(dir / "law.json") << R"({"kappa": 0.5, "initial": [[1, 0, 1.0]], "interior": [[1, 0, 0.5]]})";
  EXPECT_EQ(run_cli("kmrp solve " + (dir / "law.json").string() + " --out " + dir.string()), 0);
  EXPECT_TRUE(fs::exists(dir / "rates.csv"));
  EXPECT_EQ(run_cli("kmrp check " + (dir / "law.json").string()), 0);
  EXPECT_EQ(run_cli("kmrp solve /nonexistent/law.json"), 2);
  std::ofstream(dir / "ok.yaml") << "run_id: c\nstages: [halfspace]\nhalfspace: {L: 2, n_max: 8, samples: 20000}\n";
  EXPECT_EQ(run_cli("--out " + (dir / "o").string() + " run " + (dir / "ok.yaml").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "o" / "ratios.csv"));
  EXPECT_EQ(run_cli("report " + (dir / "o").string()), 0);
  EXPECT_EQ(run_cli("report /nonexistent/dir"), 2);
}
