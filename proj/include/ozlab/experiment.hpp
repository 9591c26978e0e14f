#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <type_traits>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>
#include <yaml-cpp/yaml.h>

#include "ozlab/csv.hpp"
#include "ozlab/error.hpp"
#include "ozlab/explorer.hpp"
#include "ozlab/kmrp.hpp"
#include "ozlab/observables.hpp"
#include "ozlab/rng.hpp"
#include "ozlab/wulff.hpp"

#ifndef OZLAB_VERSION
#define OZLAB_VERSION "0.0.0"
#endif

namespace ozlab {

// Invalid or missing configuration; the CLI maps it to the usage exit code.
struct ConfigError : Error {
  using Error::Error;
};

inline constexpr const char* kVersion = OZLAB_VERSION;

// ---------------------------------------------------------------- config

struct ExperimentConfig {
  std::string run_id = "run";
  std::uint64_t seed = 1;
  unsigned threads = 1;
  std::string out = "out";
  std::vector<std::string> stages{"two_point"};

  struct Model {
    double p = 0.35, q = 1.0;
    int box = 64;  // half width of the sampling box for chains (q != 1)
    std::string bc = "free";
  } model;
  struct Sampler {
    std::string algorithm = "auto";
    std::size_t burn_in = 1000, thinning = 1;
  } sampler;
  struct TwoPoint {
    std::vector<double> directions{0.0};  // degrees
    int n_max = 30;
    std::size_t samples = 1000000;
    int origin_radius = 16;
  } two_point;
  struct Halfspace {
    double direction = 0.0;
    int L = 4, n_max = 40;
    std::size_t samples = 10000000;
  } halfspace;
  struct Explore {
    double direction = 0.0;
    int L = 1, n_slices = 20;  // n_slices = 0 gives the unconditioned ensemble
    std::size_t count = 10000, budget = 400000000;
    int gap_r0 = 4, gap_margin = 4;
    double cone_alpha = 4.0;
    std::vector<int> cone_k{1, 2, 3, 4, 5};
  } explore;
  struct Kmrp {
    std::string law = "from-exploration";
    std::size_t n_max = 300, clt_n = 2000, clt_trials = 100000, bridge_trials = 100000;
  } kmrp;
  struct Wulff {
    int directions = 16, n_max = 40, field_radius = 40;
    std::size_t samples = 100000000, drift_samples = 20000000, batches = 16;
  } wulff;
};

inline const std::vector<std::string>& known_stages() {
  static const std::vector<std::string> s{"two_point", "halfspace", "explore", "kmrp", "wulff"};
  return s;
}

namespace detail {

// One schema entry: reads a YAML value into the config and dumps it back.
struct Field {
  std::string key;
  std::function<void(const YAML::Node&, const std::string&)> read;
  std::function<nlohmann::json()> dump;
};

inline double yaml_number(const YAML::Node& n, const std::string& path) {
  if (!n.IsScalar()) throw ConfigError(path + ": expected a number");
  try {
    return n.as<double>();
  } catch (const YAML::Exception&) {
    throw ConfigError(path + ": expected a number, got '" + n.Scalar() + "'");
  }
}

inline Field real(const std::string& key, double& dst, double lo, double hi) {
  return {key,
          [&dst, lo, hi](const YAML::Node& n, const std::string& path) {
            const double x = yaml_number(n, path);
            if (!(x >= lo && x <= hi)) throw ConfigError(path + " must lie in [" + csv_number(lo) + ", " + csv_number(hi) + "]");
            dst = x;
          },
          [&dst] { return nlohmann::json(dst); }};
}

template <class Int>
Field integer(const std::string& key, Int& dst, double lo, double hi) {
  return {key,
          [&dst, lo, hi](const YAML::Node& n, const std::string& path) {
            const double x = yaml_number(n, path);
            if (x != std::floor(x) || !(x >= lo && x <= hi))
              throw ConfigError(path + " must be an integer in [" + csv_number(lo) + ", " + csv_number(hi) + "]");
            dst = static_cast<Int>(x);
          },
          [&dst] { return nlohmann::json(dst); }};
}

inline Field seed_field(const std::string& key, std::uint64_t& dst) {
  return {key,
          [&dst](const YAML::Node& n, const std::string& path) {
            try {
              dst = n.as<std::uint64_t>();
            } catch (const YAML::Exception&) {
              throw ConfigError(path + " must be a non-negative integer");
            }
          },
          [&dst] { return nlohmann::json(dst); }};
}

inline Field text(const std::string& key, std::string& dst, std::vector<std::string> allowed = {}) {
  return {key,
          [&dst, allowed](const YAML::Node& n, const std::string& path) {
            if (!n.IsScalar()) throw ConfigError(path + ": expected a string");
            const auto s = n.Scalar();
            if (!allowed.empty() && std::find(allowed.begin(), allowed.end(), s) == allowed.end()) {
              std::string opts;
              for (const auto& a : allowed) opts += (opts.empty() ? "" : ", ") + a;
              throw ConfigError(path + " must be one of: " + opts);
            }
            dst = s;
          },
          [&dst] { return nlohmann::json(dst); }};
}

template <class T>
Field list(const std::string& key, std::vector<T>& dst, double lo, double hi) {
  return {key,
          [&dst, lo, hi](const YAML::Node& n, const std::string& path) {
            if (!n.IsSequence() || n.size() == 0) throw ConfigError(path + ": expected a non-empty list");
            std::vector<T> v;
            for (std::size_t i = 0; i < n.size(); ++i) {
              const auto p = path + "[" + std::to_string(i) + "]";
              const double x = yaml_number(n[i], p);
              if (!(x >= lo && x <= hi) || (std::is_integral_v<T> && x != std::floor(x)))
                throw ConfigError(p + " is out of range");
              v.push_back(static_cast<T>(x));
            }
            dst = std::move(v);
          },
          [&dst] { return nlohmann::json(dst); }};
}

inline Field stage_list(const std::string& key, std::vector<std::string>& dst) {
  return {key,
          [&dst](const YAML::Node& n, const std::string& path) {
            if (!n.IsSequence()) throw ConfigError(path + ": expected a list of stage names");
            std::vector<std::string> v;
            for (const auto& s : n) {
              const auto name = s.as<std::string>();
              const auto& ks = known_stages();
              if (std::find(ks.begin(), ks.end(), name) == ks.end()) throw ConfigError(path + ": unknown stage '" + name + "'");
              v.push_back(name);
            }
            dst = std::move(v);
          },
          [&dst] { return nlohmann::json(dst); }};
}

struct Section {
  std::string name;  // empty for the top level
  std::vector<Field> fields;
};

constexpr double kMaxCount = 9007199254740992.0;  // 2^53

inline std::vector<Section> schema(ExperimentConfig& c) {
  return {
      {"",
       {text("run_id", c.run_id), seed_field("seed", c.seed), integer("threads", c.threads, 1, 1024),
        text("out", c.out), stage_list("stages", c.stages)}},
      {"model",
       {real("p", c.model.p, 0.0, 1.0), real("q", c.model.q, 1.0, 1e6), integer("box", c.model.box, 2, 4096),
        text("bc", c.model.bc, {"free", "wired"})}},
      {"sampler",
       {text("algorithm", c.sampler.algorithm, {"auto", "heat_bath", "cluster_move"}),
        integer("burn_in", c.sampler.burn_in, 0, kMaxCount), integer("thinning", c.sampler.thinning, 1, kMaxCount)}},
      {"two_point",
       {list("directions", c.two_point.directions, -360.0, 360.0), integer("n_max", c.two_point.n_max, 2, 4096),
        integer("samples", c.two_point.samples, 1, kMaxCount), integer("origin_radius", c.two_point.origin_radius, 0, 4096)}},
      {"halfspace",
       {real("direction", c.halfspace.direction, -360.0, 360.0), integer("L", c.halfspace.L, 1, 1024),
        integer("n_max", c.halfspace.n_max, 1, 4096), integer("samples", c.halfspace.samples, 1, kMaxCount)}},
      {"explore",
       {real("direction", c.explore.direction, -360.0, 360.0), integer("L", c.explore.L, 1, 1024),
        integer("n_slices", c.explore.n_slices, 0, 4096), integer("count", c.explore.count, 1, kMaxCount),
        integer("budget", c.explore.budget, 1, kMaxCount), integer("gap_r0", c.explore.gap_r0, 1, 4096),
        integer("gap_margin", c.explore.gap_margin, 0, 4096), real("cone_alpha", c.explore.cone_alpha, 1e-6, 1e6),
        list("cone_k", c.explore.cone_k, 0, 4096)}},
      {"kmrp",
       {text("law", c.kmrp.law), integer("n_max", c.kmrp.n_max, 1, 1e7), integer("clt_n", c.kmrp.clt_n, 1, 1e9),
        integer("clt_trials", c.kmrp.clt_trials, 1, kMaxCount), integer("bridge_trials", c.kmrp.bridge_trials, 1, kMaxCount)}},
      {"wulff",
       {integer("directions", c.wulff.directions, 2, 256), integer("n_max", c.wulff.n_max, 8, 4096),
        integer("field_radius", c.wulff.field_radius, 4, 4096), integer("samples", c.wulff.samples, 1, kMaxCount),
        integer("drift_samples", c.wulff.drift_samples, 1, kMaxCount), integer("batches", c.wulff.batches, 2, 1024)}},
  };
}

}  // namespace detail

// Reads a config document. A run manifest is accepted too: its "config"
// member holds the resolved config of the earlier run.
inline ExperimentConfig config_from_yaml(const YAML::Node& doc_in) {
  YAML::Node doc = doc_in;
  if (doc.IsMap() && doc["config"] && doc["outputs"]) doc = doc["config"];
  if (!doc.IsMap()) throw ConfigError("config must be a mapping");
  ExperimentConfig c;
  auto sections = detail::schema(c);
  auto read_map = [](const YAML::Node& m, detail::Section& s) {
    for (const auto& kv : m) {
      const auto key = kv.first.as<std::string>();
      const auto path = s.name.empty() ? key : s.name + "." + key;
      auto it = std::find_if(s.fields.begin(), s.fields.end(), [&](const auto& f) { return f.key == key; });
      if (it == s.fields.end()) throw ConfigError("unknown config key '" + path + "'");
      it->read(kv.second, path);
    }
  };
  detail::Section& top = sections.front();
  YAML::Node top_only(YAML::NodeType::Map);
  for (const auto& kv : doc) {
    const auto key = kv.first.as<std::string>();
    auto sec = std::find_if(sections.begin() + 1, sections.end(), [&](const auto& s) { return s.name == key; });
    if (sec == sections.end()) {
      top_only[key] = kv.second;
      continue;
    }
    if (!kv.second.IsMap()) throw ConfigError("config section '" + key + "' must be a mapping");
    read_map(kv.second, *sec);
  }
  read_map(top_only, top);
  if (c.run_id.empty() || c.run_id.find_first_of(",\n\r\"") != std::string::npos)
    throw ConfigError("run_id must be non-empty and free of commas, quotes and newlines");
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file '" + path + "' not found");
  try {
    return config_from_yaml(YAML::LoadFile(path));
  } catch (const YAML::Exception& e) {
    throw ConfigError("cannot parse '" + path + "': " + e.what());
  }
}

// Resolved config with every default frozen in.
inline nlohmann::json to_json(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  nlohmann::json j;
  for (const auto& s : detail::schema(c)) {
    nlohmann::json& dst = s.name.empty() ? j : j[s.name];
    for (const auto& f : s.fields) dst[f.key] = f.dump();
  }
  return j;
}

// ---------------------------------------------------------------- digests

inline std::string sha256_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1) throw Error("SHA-256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) out += hex[md[i] >> 4], out += hex[md[i] & 15];
  return out;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot read '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string file_sha256(const std::filesystem::path& p) { return sha256_hex(read_file(p)); }

// ---------------------------------------------------------------- stages

inline Direction direction_from_degrees(double deg) {
  const double r = std::remainder(deg, 360.0);
  if (r == 0.0) return Direction(1, 0);
  if (r == 90.0) return Direction(0, 1);
  if (r == 180.0 || r == -180.0) return Direction(-1, 0);
  if (r == -90.0) return Direction(0, -1);
  return Direction::from_angle(r * std::numbers::pi / 180.0);
}

// Seed of a stage: one Philox block keyed by the run seed.
inline std::uint64_t stage_seed(std::uint64_t seed, const std::string& stage) {
  const auto& ks = known_stages();
  const auto idx = static_cast<std::uint32_t>(std::find(ks.begin(), ks.end(), stage) - ks.begin());
  const auto b = Philox4x32::block({idx, 0x6f7a6c61u, 0, 0},
                                   {static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)});
  return (std::uint64_t{b[0]} << 32) | b[1];
}

struct LengthRow {
  std::string stage;
  double direction = 0.0;  // radians
  LengthEstimate estimate;
};

inline nlohmann::json to_json(const LengthRow& r) {
  const auto& e = r.estimate;
  return {{"stage", r.stage}, {"direction", r.direction}, {"method", e.method}, {"value", e.value},
          {"stderr", e.stderr}, {"window_lo", e.window_lo}, {"window_hi", e.window_hi}, {"censored", e.censored}};
}

inline LengthRow length_row_from_json(const nlohmann::json& j) {
  LengthRow r;
  r.stage = j.at("stage").get<std::string>();
  r.direction = j.at("direction").get<double>();
  auto& e = r.estimate;
  e.method = j.at("method").get<std::string>();
  e.value = j.at("value").get<double>();
  e.stderr = j.at("stderr").get<double>();
  e.window_lo = j.at("window_lo").get<double>();
  e.window_hi = j.at("window_hi").get<double>();
  e.censored = j.at("censored").get<bool>();
  return r;
}

struct StageOutput {
  std::vector<std::string> files;  // relative to the output directory
  std::vector<LengthRow> lengths;
  nlohmann::json summary = nlohmann::json::object();
};

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& dir, const std::string& name, StageOutput& so) {
  std::ofstream os(dir / name, std::ios::binary);
  if (!os) throw Error("cannot write '" + (dir / name).string() + "'");
  so.files.push_back(name);
  return os;
}

inline void require_q1(const ExperimentConfig& c, const std::string& stage) {
  if (c.model.q != 1.0) throw ConfigError("stage '" + stage + "' grows single clusters and needs model.q = 1");
}

inline StageOutput stage_two_point(const ExperimentConfig& c, std::uint64_t seed, const std::filesystem::path& dir) {
  StageOutput so;
  std::vector<int> ns;
  for (int n = 1; n <= c.two_point.n_max; ++n) ns.push_back(n);
  std::vector<TwoPointCurve> curves;
  if (c.model.q == 1.0) {
    std::vector<std::pair<Vec2, std::vector<int>>> req;
    for (double d : c.two_point.directions) req.emplace_back(direction_from_degrees(d).w(), ns);
    curves = two_point_curves(c.model.p, req, c.two_point.samples, seed, c.threads);
  } else {
    SampleSpec s;
    s.samples = c.two_point.samples;
    s.seed = seed;
    s.bc = bc_kind_from_string(c.model.bc);
    s.chain.algorithm = algorithm_from_string(c.sampler.algorithm);
    s.chain.burn_in = c.sampler.burn_in;
    s.chain.thinning = c.sampler.thinning;
    for (std::size_t i = 0; i < c.two_point.directions.size(); ++i) {
      s.stream = i;
      curves.push_back(two_point_curve_chain(direction_from_degrees(c.two_point.directions[i]).w(), ns,
                                             {c.model.p, c.model.q}, c.model.box, c.two_point.origin_radius, s));
    }
  }
  {
    auto os = open_out(dir, "two_point.csv", so);
    write_two_point_csv(os, curves, c.run_id);
  }
  auto os = open_out(dir, "fits.csv", so);
  CsvWriter w(os, c.run_id);
  w.header({"direction", "correction", "xi", "xi_err", "intercept", "window_lo", "window_hi", "spread", "chi2", "dof",
            "points"});
  nlohmann::json fits = nlohmann::json::array();
  for (const auto& cv : curves) {
    const double dir_angle = std::atan2(cv.v.y, cv.v.x);
    for (auto corr : {Correction::none, Correction::oz}) {
      const auto f = estimate_xi(cv, corr);
      const char* name = corr == Correction::oz ? "oz" : "none";
      w.row(dir_angle, name, f.xi.value, f.xi.stderr, f.intercept, f.xi.window_lo, f.xi.window_hi, f.spread, f.chi2, f.dof,
            f.x.size());
      so.lengths.push_back({"two_point", dir_angle, f.xi});
      fits.push_back({{"direction", dir_angle}, {"correction", name}, {"xi", f.xi.value}, {"spread", f.spread}});
    }
  }
  so.summary["fits"] = fits;
  return so;
}

inline StageOutput stage_halfspace(const ExperimentConfig& c, std::uint64_t seed, const std::filesystem::path& dir) {
  require_q1(c, "halfspace");
  StageOutput so;
  const auto w = direction_from_degrees(c.halfspace.direction);
  const auto prof = halfspace_profile(w, c.halfspace.n_max, c.model.p, c.halfspace.samples, seed, c.threads);
  {
    auto os = open_out(dir, "halfspace.csv", so);
    write_halfspace_csv(os, {prof}, c.run_id);
  }
  {
    auto os = open_out(dir, "ratios.csv", so);
    write_ratios_csv(os, prof, c.halfspace.L, c.run_id);
  }
  const auto rs = slab_ratios(prof, c.halfspace.L);
  const auto [lo, hi] = resolvable_window(rs);
  so.summary["window"] = {lo, hi};
  if (lo > 0) {
    const auto z = estimate_zeta(prof, c.halfspace.L, lo, hi);
    so.lengths.push_back({"halfspace", w.angle(), z});
    so.summary["zeta"] = {{"value", z.value}, {"stderr", z.stderr}};
    so.summary["ratio_variation"] = ratio_variation(rs, lo, hi);
    if (hi > lo) {
      const auto s = split_window_zeta(prof, c.halfspace.L, lo, hi);
      so.summary["split"] = {{"first", {s.first.value, s.first.stderr, s.first.window_lo, s.first.window_hi}},
                             {"second", {s.second.value, s.second.stderr, s.second.window_lo, s.second.window_hi}},
                             {"z", s.z}};
    }
  }
  return so;
}

inline StageOutput stage_explore(const ExperimentConfig& c, std::uint64_t seed, const std::filesystem::path& dir) {
  require_q1(c, "explore");
  StageOutput so;
  EnsembleSpec es;
  es.p = c.model.p;
  es.L = c.explore.L;
  es.n_slices = c.explore.n_slices;
  es.count = c.explore.count;
  es.budget = c.explore.budget;
  es.t_max = c.explore.n_slices > 0 ? c.explore.n_slices : -1;
  es.keep_cluster = true;
  es.seed = seed;
  es.threads = c.threads;
  const auto ens = conditioned_ensemble(direction_from_degrees(c.explore.direction), es);
  {
    auto os = open_out(dir, "traces.jsonl", so);
    write_traces_jsonl(os, ens.traces, c.run_id);
  }
  const auto gaps = gap_tail_test(ens.traces, c.explore.gap_r0, c.explore.gap_margin);
  {
    auto os = open_out(dir, "gaps.csv", so);
    write_gaps_csv(os, gaps, c.run_id);
  }
  const auto cone = cone_stats(ens.traces, c.explore.cone_alpha, c.explore.cone_k);
  {
    auto os = open_out(dir, "cone.csv", so);
    write_cone_csv(os, cone, c.explore.cone_alpha, c.run_id);
  }
  const auto law = empirical_step_law(ens.traces);
  {
    auto os = open_out(dir, "step_law.json", so);
    os << to_json(law).dump() << '\n';
  }
  so.summary = {{"accepted", ens.traces.size()},
                {"attempts", ens.attempts},
                {"acceptance", ens.acceptance.value},
                {"gap_rate", gaps.rate},
                {"gap_rate_err", gaps.rate_err},
                {"gap_p_value", gaps.homogeneity.p_value},
                {"kappa", law.kappa}};
  nlohmann::json cj = nlohmann::json::array();
  for (const auto& s : cone) cj.push_back({s.k, s.exit_probability, s.stderr});
  so.summary["cone"] = cj;
  if (cone.size() >= 2) {
    const auto d = cone_decay(cone);
    so.summary["cone_monotone"] = d.monotone;
    so.summary["cone_decays"] = d.decays;
  }
  return so;
}

inline StageOutput stage_kmrp(const ExperimentConfig& c, std::uint64_t seed, const std::filesystem::path& dir) {
  StageOutput so;
  const auto law_path = c.kmrp.law == "from-exploration" ? dir / "step_law.json" : std::filesystem::path(c.kmrp.law);
  if (!std::filesystem::exists(law_path))
    throw ConfigError(c.kmrp.law == "from-exploration" ? "kmrp law 'from-exploration' needs the explore stage output step_law.json"
                                                       : "step law file '" + law_path.string() + "' not found");
  const auto law = step_law_from_json(nlohmann::json::parse(read_file(law_path)));
  so.summary["law_sha256"] = file_sha256(law_path);
  if (law.kappa > 0.0) {
    const auto rep = asymptotic_check(law, c.kmrp.n_max);
    auto os = open_out(dir, "rates.csv", so);
    write_rates_csv_header(os);
    write_rates_csv_row(os, c.run_id, law, rep.rate);
    so.summary["R_p"] = rep.rate.R_p;
    so.summary["deviation_at_n_max"] = rep.deviation.back();
    so.lengths.push_back({"kmrp", 0.0, {rep.rate.zeta, 0.0, 0.0, 0.0, "renewal_rate", false}});
  } else {
    so.summary["rates"] = "law has kappa = 0 (conditioned on survival); no decay rate to solve";
  }
  const auto clt = local_clt_check(law, c.kmrp.clt_n, c.kmrp.clt_trials, seed);
  {
    auto os = open_out(dir, "clt.csv", so);
    write_clt_csv(os, clt, c.kmrp.clt_n, c.run_id);
  }
  const auto br = bridge_statistics(law, c.kmrp.clt_n, c.kmrp.bridge_trials, seed ^ 0xb51d6eull);
  {
    auto os = open_out(dir, "bridge.csv", so);
    write_bridge_csv(os, br, c.kmrp.clt_n, c.run_id);
  }
  so.summary["ks_distance"] = clt.ks_distance;
  so.summary["bridge_max_rel_dev"] = br.max_rel_dev_pinned;
  for (std::size_t j = 0; j < br.t.size(); ++j)
    if (std::abs(br.t[j] - 0.5) < 1e-12)
      so.summary["bridge_rel_dev_half"] = br.pinned_variance[j] / br.bridge_theory[j] - 1.0;
  return so;
}

inline StageOutput stage_wulff(const ExperimentConfig& c, std::uint64_t seed, const std::filesystem::path& dir) {
  require_q1(c, "wulff");
  StageOutput so;
  WulffSpec ws;
  ws.p = c.model.p;
  ws.directions = c.wulff.directions;
  ws.samples = c.wulff.samples;
  ws.drift_samples = c.wulff.drift_samples;
  ws.n_max = c.wulff.n_max;
  ws.field_radius = c.wulff.field_radius;
  ws.batches = c.wulff.batches;
  ws.seed = seed;
  ws.threads = c.threads;
  const auto r = run_wulff(ws);
  {
    auto os = open_out(dir, "wulff.csv", so);
    write_wulff_csv(os, r.quadrant, c.run_id);
  }
  {
    auto os = open_out(dir, "shapes.json", so);
    os << shapes_json(r.shapes, c.run_id).dump() << '\n';
  }
  for (const auto& p : r.quadrant) so.lengths.push_back({"wulff", p.w.angle(), p.xi_star});
  so.summary = {{"duality_pairs", r.duality.pairs},
                {"duality_violations", r.duality.violations},
                {"duality_max_z", r.duality.max_violation_sigma},
                {"equality_gap_deg", r.duality.max_angle_gap * 180.0 / std::numbers::pi},
                {"mu_e1", r.axis_drift.mu},
                {"mu_e1_err", r.axis_drift.mu_err},
                {"angle_map_monotone", r.angle_map.monotone},
                {"facets", r.convexity.facets.size()}};
  return so;
}

inline StageOutput run_stage(const std::string& name, const ExperimentConfig& c, std::uint64_t seed,
                             const std::filesystem::path& dir) {
  if (name == "two_point") return stage_two_point(c, seed, dir);
  if (name == "halfspace") return stage_halfspace(c, seed, dir);
  if (name == "explore") return stage_explore(c, seed, dir);
  if (name == "kmrp") return stage_kmrp(c, seed, dir);
  if (name == "wulff") return stage_wulff(c, seed, dir);
  throw ConfigError("unknown stage '" + name + "'");
}

// Everything a stage reads, so equal keys mean equal outputs.
inline std::string stage_cache_key(const std::string& name, const ExperimentConfig& c, std::uint64_t seed,
                                   const std::filesystem::path& dir) {
  const auto j = to_json(c);
  nlohmann::json k = {{"stage", name}, {"version", kVersion}, {"seed", seed},      {"threads", c.threads},
                      {"model", j["model"]}, {"sampler", j["sampler"]}, {"section", j[name]}, {"run_id", c.run_id}};
  if (name == "kmrp") {
    const auto law = c.kmrp.law == "from-exploration" ? dir / "step_law.json" : std::filesystem::path(c.kmrp.law);
    if (std::filesystem::exists(law)) k["law_sha256"] = file_sha256(law);
  }
  return sha256_hex(k.dump());
}

}  // namespace detail

struct RunManifest {
  nlohmann::json json;
  bool ok = true;
  std::string error;
  bool usage_error = false;
};

// Runs the given stages (all configured stages when empty) and writes their
// outputs, lengths.csv and manifest.json to cfg.out. With a cache directory,
// stage outputs are stored under a key of their inputs and reused.
inline RunManifest run_experiment(const ExperimentConfig& cfg, std::vector<std::string> stages = {},
                                  const std::string& cache_dir = "", std::ostream* log = nullptr) {
  namespace fs = std::filesystem;
  if (stages.empty()) stages = cfg.stages;
  const fs::path dir(cfg.out);
  fs::create_directories(dir);
  RunManifest m;
  auto& j = m.json;
  j["run_id"] = cfg.run_id;
  j["version"] = kVersion;
  j["config"] = to_json(cfg);
  j["threads"] = cfg.threads;
  {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    j["started"] = buf;
  }
  j["stages"] = nlohmann::json::array();
  j["seeds"] = {{"run", cfg.seed}};
  std::vector<LengthRow> lengths;
  std::vector<std::string> files;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    for (const auto& name : stages) {
      const auto seed = stage_seed(cfg.seed, name);
      j["seeds"][name] = seed;
      const auto ts = std::chrono::steady_clock::now();
      if (log) *log << "[ozlab] stage " << name << " ..." << std::endl;
      StageOutput so;
      bool cached = false;
      fs::path cdir;
      if (!cache_dir.empty()) {
        cdir = fs::path(cache_dir) / detail::stage_cache_key(name, cfg, seed, dir);
        if (fs::exists(cdir / "stage.json")) {
          const auto meta = nlohmann::json::parse(read_file(cdir / "stage.json"));
          for (const auto& f : meta.at("files")) {
            const auto n = f.get<std::string>();
            fs::copy_file(cdir / n, dir / n, fs::copy_options::overwrite_existing);
            so.files.push_back(n);
          }
          for (const auto& l : meta.at("lengths")) so.lengths.push_back(length_row_from_json(l));
          so.summary = meta.at("summary");
          cached = true;
        }
      }
      if (!cached) {
        so = detail::run_stage(name, cfg, seed, dir);
        if (!cdir.empty()) {
          fs::create_directories(cdir);
          nlohmann::json meta = {{"files", so.files}, {"summary", so.summary}, {"lengths", nlohmann::json::array()}};
          for (const auto& l : so.lengths) meta["lengths"].push_back(to_json(l));
          for (const auto& f : so.files) fs::copy_file(dir / f, cdir / f, fs::copy_options::overwrite_existing);
          std::ofstream(cdir / "stage.json") << meta.dump() << '\n';
        }
      }
      files.insert(files.end(), so.files.begin(), so.files.end());
      lengths.insert(lengths.end(), so.lengths.begin(), so.lengths.end());
      const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - ts).count();
      j["stages"].push_back({{"name", name}, {"wall_clock_s", dt}, {"cached", cached}, {"summary", so.summary}});
      if (log) *log << "[ozlab] stage " << name << (cached ? " restored from cache" : " done") << " in " << dt << " s" << std::endl;
    }
    if (!lengths.empty()) {
      std::ofstream os(dir / "lengths.csv", std::ios::binary);
      CsvWriter w(os, cfg.run_id);
      w.header({"stage", "direction", "method", "value", "stderr", "window_lo", "window_hi", "censored"});
      for (const auto& l : lengths)
        w.row(l.stage, l.direction, l.estimate.method, l.estimate.value, l.estimate.stderr, l.estimate.window_lo,
              l.estimate.window_hi, l.estimate.censored);
      files.push_back("lengths.csv");
    }
    j["status"] = "ok";
  } catch (const ConfigError& e) {
    m.ok = false;
    m.usage_error = true;
    m.error = e.what();
  } catch (const std::exception& e) {
    m.ok = false;
    m.error = e.what();
  }
  if (!m.ok) {
    j["status"] = "failed";
    j["error"] = m.error;
  }
  j["wall_clock_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  j["outputs"] = nlohmann::json::object();
  for (const auto& f : files)
    if (fs::exists(dir / f)) j["outputs"][f] = file_sha256(dir / f);
  std::ofstream(dir / "manifest.json") << j.dump(2) << '\n';
  return m;
}

// Report staging: which plot kinds the outputs in `dir` support, with their inputs.
inline nlohmann::json report_index(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const std::vector<std::pair<std::string, std::vector<std::string>>> kinds{
      {"oz_fit", {"two_point.csv", "fits.csv"}},
      {"survival_ratios", {"ratios.csv"}},
      {"gap_histogram", {"gaps.csv"}},
      {"local_clt", {"clt.csv"}},
      {"wulff", {"wulff.csv", "shapes.json"}},
  };
  nlohmann::json j = {{"directory", dir.string()}, {"plots", nlohmann::json::array()}};
  for (const auto& [kind, inputs] : kinds) {
    bool ok = true;
    for (const auto& f : inputs) ok = ok && fs::exists(dir / f);
    if (ok) j["plots"].push_back({{"kind", kind}, {"inputs", inputs}});
  }
  return j;
}

}  // namespace ozlab
