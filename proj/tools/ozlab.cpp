// ozlab command line driver.
// Exit codes: 0 ok, 1 failure, 2 usage or configuration error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ozlab/experiment.hpp"
#include "ozlab/oracle.hpp"

namespace {

constexpr int kOk = 0, kFailure = 1, kUsage = 2;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  std::string out;
};

ozlab::ExperimentConfig resolve(const Globals& g, const std::string& positional) {
  const std::string path = !positional.empty() ? positional : g.config;
  if (path.empty()) throw ozlab::ConfigError("no config given (use --config FILE)");
  auto cfg = ozlab::load_config(path);
  if (g.seed) cfg.seed = *g.seed;
  if (g.threads) cfg.threads = *g.threads;
  if (!g.out.empty()) cfg.out = g.out;
  return cfg;
}

std::string cache_dir() {
  const char* c = std::getenv("OZLAB_CACHE");
  return c ? c : "";
}

int run_stages(const Globals& g, const std::string& positional, const std::vector<std::string>& stages) {
  const auto cfg = resolve(g, positional);
  const auto m = ozlab::run_experiment(cfg, stages, cache_dir(), &std::clog);
  std::cout << (std::filesystem::path(cfg.out) / "manifest.json").string() << '\n';
  if (!m.ok) {
    std::cerr << "ozlab: " << m.error << '\n';
    return m.usage_error ? kUsage : kFailure;
  }
  return kOk;
}

ozlab::StepLaw read_law(const std::string& path) {
  if (!std::filesystem::exists(path)) throw ozlab::ConfigError("step law file '" + path + "' not found");
  try {
    return ozlab::step_law_from_json(nlohmann::json::parse(ozlab::read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw ozlab::ConfigError("cannot parse step law '" + path + "': " + e.what());
  }
}

int kmrp_solve(const Globals& g, const std::string& law_path) {
  const auto law = read_law(law_path);
  const auto r = ozlab::solve_rate(law);
  const std::filesystem::path dir(g.out.empty() ? "." : g.out);
  std::filesystem::create_directories(dir);
  std::ofstream os(dir / "rates.csv", std::ios::binary);
  ozlab::write_rates_csv_header(os);
  ozlab::write_rates_csv_row(os, std::filesystem::path(law_path).stem().string(), law, r);
  std::cout << "R_p " << ozlab::csv_number(r.R_p) << "\nzeta " << ozlab::csv_number(r.zeta) << "\namplitude "
            << ozlab::csv_number(r.amplitude) << '\n';
  return kOk;
}

int kmrp_check(const std::string& law_path, std::size_t n_max, double tol) {
  const auto rep = ozlab::asymptotic_check(read_law(law_path), n_max);
  const double dev = rep.deviation.back();
  std::cout << "R_p " << ozlab::csv_number(rep.rate.R_p) << "\ndeviation_at_n_max " << ozlab::csv_number(dev)
            << "\nc_decays_faster " << rep.c_decays_faster << '\n';
  return dev <= tol && rep.c_decays_faster ? kOk : kFailure;
}

int verify_oracle(const Globals& g, std::size_t samples, double alpha) {
  const auto seed = g.seed.value_or(1);
  const auto rs = ozlab::oracle_suite(samples, seed, g.threads.value_or(1));
  const double level = alpha / static_cast<double>(rs.size());
  std::size_t failed = 0;
  for (const auto& r : rs) {
    const bool ok = r.chi2.p_value > level;
    failed += !ok;
    std::cout << (ok ? "ok   " : "FAIL ") << r.c.graph << " q=" << r.c.model.q << " p=" << r.c.model.p << ' '
              << (r.c.bc == ozlab::BcKind::free ? "free" : "wired") << ' ' << ozlab::to_string(r.c.algorithm)
              << " p_value=" << r.chi2.p_value << '\n';
  }
  if (!g.out.empty()) {
    std::filesystem::create_directories(g.out);
    std::ofstream os(std::filesystem::path(g.out) / "oracle.csv", std::ios::binary);
    ozlab::write_oracle_csv(os, rs, "oracle");
  }
  std::cout << rs.size() - failed << "/" << rs.size() << " chains pass at family-wise level " << alpha << '\n';
  return failed == 0 ? kOk : kFailure;
}

int report(const Globals& g, const std::string& positional) {
  std::string dir = positional;
  if (dir.empty()) dir = g.out;
  if (dir.empty() && !g.config.empty()) dir = ozlab::load_config(g.config).out;
  if (dir.empty()) throw ozlab::ConfigError("report needs an output directory");
  if (!std::filesystem::is_directory(dir)) throw ozlab::ConfigError("'" + dir + "' is not a directory");
  const auto idx = ozlab::report_index(dir);
  std::ofstream(std::filesystem::path(dir) / "report.json") << idx.dump(2) << '\n';
  std::cout << idx.dump(2) << '\n';
  return idx["plots"].empty() ? kFailure : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ozlab: Ornstein-Zernike toolkit for the planar random-cluster model"};
  app.set_version_flag("--version", ozlab::kVersion);
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "Experiment config (YAML) or a run manifest");
  app.add_option("--seed", g.seed, "Override the run seed");
  app.add_option("--threads", g.threads, "Worker threads (1 gives the reproducibility contract)")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "Output directory");
  app.fallthrough();

  std::string positional;
  auto* run = app.add_subcommand("run", "Run the stages listed in the config");
  run->add_option("config", positional, "Config file (same as --config)");
  auto* explore = app.add_subcommand("explore", "Run only the explore stage of the config");
  auto* wulff = app.add_subcommand("wulff", "Run only the wulff stage of the config");

  auto* kmrp = app.add_subcommand("kmrp", "Renewal-process tools");
  kmrp->require_subcommand(1);
  std::string law;
  std::size_t n_max = 300;
  double tol = 0.02;
  auto* solve = kmrp->add_subcommand("solve", "Solve A(R_p) = 1 and write rates.csv");
  solve->add_option("law", law, "Step law JSON")->required();
  auto* check = kmrp->add_subcommand("check", "Compare p_n with the renewal asymptotics");
  check->add_option("law", law, "Step law JSON")->required();
  check->add_option("--n-max", n_max, "Largest n")->check(CLI::PositiveNumber);
  check->add_option("--tol", tol, "Allowed |p_n R_p^n R_p A'(R_p) - 1| at n_max");

  auto* verify = app.add_subcommand("verify", "Verification suites");
  verify->require_subcommand(1);
  std::size_t samples = 1000000;
  double alpha = 0.01;
  auto* oracle = verify->add_subcommand("oracle", "Samplers against exact enumeration");
  oracle->add_option("--samples", samples, "Thinned samples per chain")->check(CLI::PositiveNumber);
  oracle->add_option("--alpha", alpha, "Family-wise significance level");

  auto* rep = app.add_subcommand("report", "Stage outputs for the plotting component");
  rep->add_option("dir", positional, "Output directory of a run");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  try {
    if (*run) return run_stages(g, positional, {});
    if (*explore) return run_stages(g, "", {"explore"});
    if (*wulff) return run_stages(g, "", {"wulff"});
    if (*solve) return kmrp_solve(g, law);
    if (*check) return kmrp_check(law, n_max, tol);
    if (*oracle) return verify_oracle(g, samples, alpha);
    if (*rep) return report(g, positional);
  } catch (const ozlab::ConfigError& e) {
    std::cerr << "ozlab: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "ozlab: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}
