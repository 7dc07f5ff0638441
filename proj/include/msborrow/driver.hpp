#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "msborrow/data.hpp"
#include "msborrow/mem.hpp"
#include "msborrow/model.hpp"
#include "msborrow/numeric.hpp"
#include "msborrow/pate.hpp"
#include "msborrow/sim.hpp"

#ifndef MSBORROW_VERSION
#define MSBORROW_VERSION "0.1.0"
#endif

namespace msborrow::driver {

// ---------------------------------------------------------------------------
// Flat key-value configuration: one `key = value` per line, `#` comments,
// dotted keys for sections. Values keep internal whitespace; lists are
// comma-separated.

using KeyValues = std::map<std::string, std::string>;

inline KeyValues parse_key_values(std::istream& in) {
  KeyValues kv;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const std::string stripped = detail::strip(line);
    if (stripped.empty()) continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: line " + std::to_string(line_no) +
                                  " is not of the form key = value");
    const std::string key = detail::strip(stripped.substr(0, eq));
    const std::string value = detail::strip(stripped.substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument("config: line " + std::to_string(line_no) + " has an empty key");
    kv[key] = value;
  }
  return kv;
}

inline KeyValues load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open " + path);
  return parse_key_values(in);
}

namespace detail_cfg {

inline std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream ss(value);
  while (std::getline(ss, item, ',')) {
    const std::string stripped = msborrow::detail::strip(item);
    if (!stripped.empty()) out.push_back(stripped);
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw std::invalid_argument("config: key '" + key + "' expects a boolean, got '" + value + "'");
}

inline std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

}  // namespace detail_cfg

// Fully resolved run options for both commands.
struct RunConfig {
  std::string command;  // "fit" or "simulate"

  // data bindings (fit)
  std::string data_path;
  CsvSchema schema;

  // model
  ModelKind model = ModelKind::Blm;
  Formula formula;
  BlmHyperparamSource blm_hyperparams = BlmHyperparamSource::Block;
  bool bart_use_compliance = false;
  BartOptions bart;

  // exchangeability prior
  mem::ModelPriorKind prior_kind = mem::ModelPriorKind::FlatHalf;
  std::optional<int> prior_r;
  bool no_borrow = false;

  // estimand
  pate::ComplianceHandling compliance = pate::ComplianceHandling::None;

  // run controls
  int posterior_draws = 100;
  std::optional<std::uint64_t> seed;
  int threads = 1;
  std::string out_dir = ".";
  double interval_mass = 0.95;

  // simulation (simulate)
  sim::ScenarioConfig scenario;
  std::vector<double> deltas{0.0};
  int reps = 100;
  std::vector<sim::EstimatorSpec> estimators{{ModelKind::Blm, mem::ModelPriorKind::FlatHalf, true}};
};

inline mem::ModelPriorKind parse_prior_kind(const std::string& value) {
  if (value == "half") return mem::ModelPriorKind::FlatHalf;
  if (value == "power-r") return mem::ModelPriorKind::PowerR;
  if (value == "inverse-r") return mem::ModelPriorKind::InverseR;
  if (value == "power-half-r") return mem::ModelPriorKind::PowerHalfR;
  throw std::invalid_argument("config: unknown prior '" + value +
                              "' (expected half, power-r, inverse-r or power-half-r)");
}

inline ModelKind parse_model_kind(const std::string& value) {
  if (value == "blm") return ModelKind::Blm;
  if (value == "bart") return ModelKind::Bart;
  throw std::invalid_argument("config: unknown model '" + value + "' (expected blm or bart)");
}

// "blm:half", "bart:power-r" or "blm:nb" / "bart:nb" for no borrowing.
inline sim::EstimatorSpec parse_estimator(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos)
    throw std::invalid_argument("config: estimator '" + text + "' must look like model:prior");
  sim::EstimatorSpec est;
  est.model = parse_model_kind(detail::strip(text.substr(0, colon)));
  const std::string tail = detail::strip(text.substr(colon + 1));
  if (tail == "nb") {
    est.borrow = false;
  } else {
    est.prior = parse_prior_kind(tail);
  }
  return est;
}

// Builds a RunConfig from key-value pairs, complaining about unknown keys.
inline RunConfig resolve_config(const std::string& command, const KeyValues& kv) {
  static const std::vector<std::string> known = {
      "data.path",         "data.outcome",       "data.treatment",
      "data.source",       "data.primary",       "data.compliance",
      "data.covariates",   "data.delimiter",     "data.lenient",
      "data.supplemental", "model",              "formula.intercept",
      "formula.compliance", "formula.covariates", "formula.treatment_interactions",
      "formula.compliance_interactions",          "blm.hyperparams",
      "bart.m",
      "bart.n_burn",       "bart.prior_draws",   "bart.node_prior",
      "bart.alpha",        "bart.beta_depth",    "bart.cutpoint_grid",
      "bart.change_moves", "bart.use_compliance", "prior",
      "prior.r",           "no_borrow",          "estimand.compliance",
      "draws",             "seed",               "threads",
      "out",               "interval",           "sim.scenario",
      "sim.n_primary",     "sim.n_supplemental", "sim.reps",
      "sim.part",          "sim.deltas",         "sim.estimators",
  };
  for (const auto& [key, value] : kv)
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw std::invalid_argument("config: unknown key '" + key + "'");

  auto get = [&](const std::string& key) -> std::optional<std::string> {
    auto it = kv.find(key);
    if (it == kv.end()) return {};
    return it->second;
  };
  auto get_int = [&](const std::string& key, int fallback) {
    auto v = get(key);
    if (!v) return fallback;
    try {
      return std::stoi(*v);
    } catch (...) {
      throw std::invalid_argument("config: key '" + key + "' expects an integer, got '" + *v + "'");
    }
  };
  auto get_double = [&](const std::string& key, double fallback) {
    auto v = get(key);
    if (!v) return fallback;
    double out;
    if (!detail::parse_double(*v, out))
      throw std::invalid_argument("config: key '" + key + "' expects a number, got '" + *v + "'");
    return out;
  };
  auto get_bool = [&](const std::string& key, bool fallback) {
    auto v = get(key);
    return v ? detail_cfg::parse_bool(key, *v) : fallback;
  };

  RunConfig cfg;
  cfg.command = command;

  if (auto v = get("data.path")) cfg.data_path = *v;
  cfg.schema.outcome = get("data.outcome").value_or("y");
  cfg.schema.treatment = get("data.treatment").value_or("a");
  cfg.schema.source = get("data.source").value_or("source");
  cfg.schema.primary_label = get("data.primary").value_or("P");
  if (auto v = get("data.compliance"); v && !v->empty()) cfg.schema.compliance = *v;
  if (auto v = get("data.covariates")) cfg.schema.covariates = detail_cfg::split_list(*v);
  if (auto v = get("data.supplemental")) cfg.schema.supplemental_labels = detail_cfg::split_list(*v);
  if (auto v = get("data.delimiter")) {
    if (v->size() != 1)
      throw std::invalid_argument("config: data.delimiter must be a single character");
    cfg.schema.delimiter = (*v)[0];
  }
  cfg.schema.lenient = get_bool("data.lenient", false);

  if (auto v = get("model")) cfg.model = parse_model_kind(*v);
  cfg.formula.intercept = get_bool("formula.intercept", true);
  cfg.formula.compliance = get_bool("formula.compliance", false);
  if (auto v = get("formula.covariates")) cfg.formula.covariates = detail_cfg::split_list(*v);
  if (auto v = get("formula.treatment_interactions"))
    cfg.formula.treatment_interactions = detail_cfg::split_list(*v);
  if (auto v = get("formula.compliance_interactions"))
    cfg.formula.compliance_interactions = detail_cfg::split_list(*v);

  if (auto v = get("blm.hyperparams")) {
    if (*v == "block")
      cfg.blm_hyperparams = BlmHyperparamSource::Block;
    else if (*v == "primary")
      cfg.blm_hyperparams = BlmHyperparamSource::Primary;
    else
      throw std::invalid_argument("config: blm.hyperparams must be 'block' or 'primary'");
  }

  cfg.bart.m = get_int("bart.m", 200);
  cfg.bart.n_burn = get_int("bart.n_burn", 100);
  cfg.bart.prior_draws = get_int("bart.prior_draws", 100);
  cfg.bart.alpha = get_double("bart.alpha", 0.95);
  cfg.bart.beta_depth = get_double("bart.beta_depth", 2.0);
  cfg.bart.cutpoint_grid = get_int("bart.cutpoint_grid", 100);
  cfg.bart.enable_change_moves = get_bool("bart.change_moves", false);
  cfg.bart_use_compliance = get_bool("bart.use_compliance", false);
  if (auto v = get("bart.node_prior")) {
    if (*v == "modified")
      cfg.bart.node_prior = bart::NodePriorKind::Modified;
    else if (*v == "default")
      cfg.bart.node_prior = bart::NodePriorKind::Default;
    else
      throw std::invalid_argument("config: bart.node_prior must be 'modified' or 'default'");
  }

  if (auto v = get("prior")) cfg.prior_kind = parse_prior_kind(*v);
  if (auto v = get("prior.r")) cfg.prior_r = get_int("prior.r", 1);
  cfg.no_borrow = get_bool("no_borrow", false);

  if (auto v = get("estimand.compliance")) {
    if (*v == "none")
      cfg.compliance = pate::ComplianceHandling::None;
    else if (*v == "fix-compliant")
      cfg.compliance = pate::ComplianceHandling::FixCompliant;
    else
      throw std::invalid_argument(
          "config: estimand.compliance must be 'none' or 'fix-compliant'");
  }

  cfg.posterior_draws = get_int("draws", 100);
  if (cfg.posterior_draws < 1) throw std::invalid_argument("config: draws must be >= 1");
  if (auto v = get("seed")) {
    try {
      cfg.seed = std::stoull(*v);
    } catch (...) {
      throw std::invalid_argument("config: seed expects an unsigned integer, got '" + *v + "'");
    }
  }
  cfg.threads = get_int("threads", 1);
  if (cfg.threads < 1) throw std::invalid_argument("config: threads must be >= 1");
  cfg.out_dir = get("out").value_or(".");
  cfg.interval_mass = get_double("interval", 0.95);

  cfg.scenario.scenario = get_int("sim.scenario", 1);
  cfg.scenario.n_primary = get_int("sim.n_primary", 100);
  cfg.scenario.n_supplemental = get_int("sim.n_supplemental", 100);
  cfg.reps = get_int("sim.reps", 100);
  if (auto v = get("sim.deltas")) {
    cfg.deltas.clear();
    for (const auto& item : detail_cfg::split_list(*v)) {
      double d;
      if (!detail::parse_double(item, d))
        throw std::invalid_argument("config: sim.deltas has a non-numeric entry '" + item + "'");
      cfg.deltas.push_back(d);
    }
    if (cfg.deltas.empty()) throw std::invalid_argument("config: sim.deltas is empty");
  } else if (auto p = get("sim.part")) {
    cfg.deltas = sim::delta_grid(get_int("sim.part", 1));
  }
  if (auto v = get("sim.estimators")) {
    cfg.estimators.clear();
    for (const auto& item : detail_cfg::split_list(*v))
      cfg.estimators.push_back(parse_estimator(item));
    if (cfg.estimators.empty()) throw std::invalid_argument("config: sim.estimators is empty");
  }
  return cfg;
}

// Canonical serialization of every effective option; the manifest embeds this
// so a run can be reproduced from its outputs alone.
inline std::string canonical_config(const RunConfig& cfg) {
  std::ostringstream out;
  auto join = [](const std::vector<std::string>& items) {
    std::string s;
    for (const auto& i : items) {
      if (!s.empty()) s += ",";
      s += i;
    }
    return s;
  };
  out << "command = " << cfg.command << "\n";
  if (cfg.command == "fit") {
    out << "data.path = " << cfg.data_path << "\n";
    out << "data.outcome = " << cfg.schema.outcome << "\n";
    out << "data.treatment = " << cfg.schema.treatment << "\n";
    out << "data.source = " << cfg.schema.source << "\n";
    out << "data.primary = " << cfg.schema.primary_label << "\n";
    out << "data.compliance = " << (cfg.schema.compliance ? *cfg.schema.compliance : "") << "\n";
    out << "data.covariates = " << join(cfg.schema.covariates) << "\n";
    out << "data.supplemental = " << join(cfg.schema.supplemental_labels) << "\n";
    out << "data.delimiter = " << cfg.schema.delimiter << "\n";
    out << "data.lenient = " << (cfg.schema.lenient ? "true" : "false") << "\n";
    out << "formula.intercept = " << (cfg.formula.intercept ? "true" : "false") << "\n";
    out << "formula.compliance = " << (cfg.formula.compliance ? "true" : "false") << "\n";
    out << "formula.covariates = " << join(cfg.formula.covariates) << "\n";
    out << "formula.treatment_interactions = " << join(cfg.formula.treatment_interactions) << "\n";
    out << "formula.compliance_interactions = " << join(cfg.formula.compliance_interactions)
        << "\n";
    out << "estimand.compliance = "
        << (cfg.compliance == pate::ComplianceHandling::FixCompliant ? "fix-compliant" : "none")
        << "\n";
    out << "interval = " << format_g17(cfg.interval_mass) << "\n";
  }
  out << "model = " << to_string(cfg.model) << "\n";
  out << "blm.hyperparams = "
      << (cfg.blm_hyperparams == BlmHyperparamSource::Primary ? "primary" : "block") << "\n";
  out << "bart.m = " << cfg.bart.m << "\n";
  out << "bart.n_burn = " << cfg.bart.n_burn << "\n";
  out << "bart.prior_draws = " << cfg.bart.prior_draws << "\n";
  out << "bart.node_prior = "
      << (cfg.bart.node_prior == bart::NodePriorKind::Modified ? "modified" : "default") << "\n";
  out << "bart.alpha = " << format_g17(cfg.bart.alpha) << "\n";
  out << "bart.beta_depth = " << format_g17(cfg.bart.beta_depth) << "\n";
  out << "bart.cutpoint_grid = " << cfg.bart.cutpoint_grid << "\n";
  out << "bart.change_moves = " << (cfg.bart.enable_change_moves ? "true" : "false") << "\n";
  out << "bart.use_compliance = " << (cfg.bart_use_compliance ? "true" : "false") << "\n";
  out << "prior = " << mem::to_string(cfg.prior_kind) << "\n";
  if (cfg.prior_r) out << "prior.r = " << *cfg.prior_r << "\n";
  out << "no_borrow = " << (cfg.no_borrow ? "true" : "false") << "\n";
  out << "draws = " << cfg.posterior_draws << "\n";
  out << "threads = " << cfg.threads << "\n";
  out << "out = " << cfg.out_dir << "\n";
  if (cfg.command == "simulate") {
    out << "sim.scenario = " << cfg.scenario.scenario << "\n";
    out << "sim.n_primary = " << cfg.scenario.n_primary << "\n";
    out << "sim.n_supplemental = " << cfg.scenario.n_supplemental << "\n";
    out << "sim.reps = " << cfg.reps << "\n";
    std::string deltas;
    for (double d : cfg.deltas) {
      if (!deltas.empty()) deltas += ",";
      deltas += format_g17(d);
    }
    out << "sim.deltas = " << deltas << "\n";
    std::string ests;
    for (const auto& e : cfg.estimators) {
      if (!ests.empty()) ests += ",";
      ests += to_string(e.model) + ":" + (e.borrow ? mem::to_string(e.prior) : std::string("nb"));
    }
    out << "sim.estimators = " << ests << "\n";
  }
  return out.str();
}

namespace detail_cfg {

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cli: cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw std::runtime_error("cli: failed writing " + path.string());
}

inline void write_manifest(const std::filesystem::path& path, const RunConfig& cfg,
                           std::uint64_t seed, const std::vector<std::string>& outputs) {
  const std::string resolved = canonical_config(cfg);
  std::ostringstream out;
  out << "manifest.version = 1\n";
  out << "manifest.tool = msborrow " << MSBORROW_VERSION << "\n";
  out << "manifest.seed = " << seed << "\n";
  out << "manifest.config_hash = " << fnv1a(resolved) << "\n";
  std::string files;
  for (const auto& f : outputs) {
    if (!files.empty()) files += ",";
    files += f;
  }
  out << "manifest.outputs = " << files << "\n";
  out << resolved;
  write_file(path, out.str());
}

inline std::uint64_t effective_seed(const RunConfig& cfg) {
  if (cfg.seed) return *cfg.seed;
  std::random_device rd;
  return (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
}

}  // namespace detail_cfg

inline ModelSpec model_spec_from(const RunConfig& cfg, const Dataset& ds) {
  ModelSpec spec;
  spec.kind = cfg.model;
  spec.blm_hyperparams = cfg.blm_hyperparams;
  spec.bart = cfg.bart;
  spec.use_compliance = cfg.bart_use_compliance;
  if (cfg.formula.covariates.empty() && cfg.formula.treatment_interactions.empty() &&
      cfg.formula.compliance_interactions.empty() && !cfg.formula.compliance) {
    spec.formula.covariates = ds.covariate_names;  // default: every covariate, main effects
    spec.formula.intercept = cfg.formula.intercept;
  } else {
    spec.formula = cfg.formula;
  }
  return spec;
}

// Estimates the treatment effect with borrowing from a CSV dataset and writes
// mem_weights.csv, pate_summary.csv, pate_draws.csv and manifest.txt.
inline void run_fit(const RunConfig& cfg) {
  if (cfg.data_path.empty()) throw std::invalid_argument("cli: fit requires data.path");
  if (cfg.schema.covariates.empty())
    throw std::invalid_argument("cli: fit requires data.covariates");

  const Dataset ds = load_dataset(cfg.data_path, cfg.schema);
  const ModelSpec model = model_spec_from(cfg, ds);
  const std::uint64_t seed = detail_cfg::effective_seed(cfg);

  mem::MemSpace space;
  if (cfg.no_borrow) {
    space = mem::no_borrow_space(ds);
  } else {
    mem::ModelPrior prior{cfg.prior_kind,
                          cfg.prior_r ? *cfg.prior_r : model.prior_predictor_count(ds)};
    space = mem::compute_mem_space(ds, model, prior, mix64(seed ^ 0x11d), cfg.threads);
  }

  pate::EstimandSpec estimand;
  estimand.compliance = cfg.compliance;
  const auto post =
      pate::pate_posterior(ds, model, space, estimand, cfg.posterior_draws,
                           mix64(seed ^ 0x77e), cfg.threads);
  const auto summary = pate::summarize(post, cfg.interval_mass);

  const std::filesystem::path out_dir(cfg.out_dir);
  std::filesystem::create_directories(out_dir);

  {
    std::ostringstream weights;
    weights << "mem";
    for (const auto& label : ds.supplemental_labels) weights << ',' << label;
    weights << ",omega\n";
    for (std::size_t q = 0; q < space.patterns.size(); ++q) {
      weights << (q + 1);
      for (std::size_t h = 0; h < space.patterns[q].h(); ++h)
        weights << ',' << (space.patterns[q].z[h] ? "Yes" : "No");
      weights << ',' << format_g17(space.weights[static_cast<Eigen::Index>(q)]) << "\n";
    }
    detail_cfg::write_file(out_dir / "mem_weights.csv", weights.str());
  }
  {
    std::ostringstream s;
    s << "mean,sd,lower,upper\n"
      << format_g17(summary.mean) << ',' << format_g17(summary.sd) << ','
      << format_g17(summary.lower) << ',' << format_g17(summary.upper) << "\n";
    detail_cfg::write_file(out_dir / "pate_summary.csv", s.str());
  }
  {
    std::ostringstream s;
    s << "draw\n";
    for (double d : post.draws) s << format_g17(d) << "\n";
    detail_cfg::write_file(out_dir / "pate_draws.csv", s.str());
  }
  detail_cfg::write_manifest(out_dir / "manifest.txt", cfg, seed,
                             {"mem_weights.csv", "pate_summary.csv", "pate_draws.csv"});
}

// Runs the Monte Carlo study and writes mc_results.csv plus manifest.txt.
inline void run_simulate(const RunConfig& cfg) {
  const std::uint64_t seed = detail_cfg::effective_seed(cfg);
  sim::McOptions opts;
  opts.posterior_draws = cfg.posterior_draws;
  opts.threads = cfg.threads;
  opts.bart = cfg.bart;

  const sim::McResult result =
      sim::run_monte_carlo(cfg.scenario, cfg.deltas, cfg.estimators, cfg.reps, opts, seed);

  const std::filesystem::path out_dir(cfg.out_dir);
  std::filesystem::create_directories(out_dir);
  std::ostringstream csv;
  sim::write_mc_csv(result, csv);
  detail_cfg::write_file(out_dir / "mc_results.csv", csv.str());
  detail_cfg::write_manifest(out_dir / "manifest.txt", cfg, seed, {"mc_results.csv"});
}

}  // namespace msborrow::driver
