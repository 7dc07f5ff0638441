#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "msborrow/data.hpp"
#include "msborrow/mem.hpp"
#include "msborrow/model.hpp"
#include "msborrow/numeric.hpp"
#include "msborrow/parallel.hpp"
#include "msborrow/pate.hpp"
#include "msborrow/rng.hpp"

namespace msborrow::sim {

// Benchmark scenarios: one primary and one supplemental source, true average
// effect fixed at 1 in the primary source. The supplemental treatment effect
// is 1 + delta.
//   1: X ~ N(0,1), A|X logistic in x, f(x) = x             (both sources)
//   2: as 1, except the supplemental source draws X ~ N(3,1)
//   3: A ~ Ber(1/2), X|A=0 ~ N(0,4/3), X|A=1 ~ N(0,2/3), f(x) = exp(x)
struct ScenarioConfig {
  int scenario = 1;
  int n_primary = 100;
  int n_supplemental = 100;
  double delta = 0.0;

  void validate() const {
    if (scenario < 1 || scenario > 3)
      throw std::invalid_argument("sim: scenario must be 1, 2 or 3");
    if (n_primary < 2 || n_supplemental < 2)
      throw std::invalid_argument("sim: source sizes must be at least 2");
  }
};

inline Dataset gen_scenario(const ScenarioConfig& cfg, Rng& rng) {
  cfg.validate();
  Dataset ds;
  ds.primary_label = "P";
  ds.supplemental_labels = {"S1"};
  ds.covariate_names = {"x1"};

  auto draw_row = [&](bool supplemental) {
    Row r;
    double x = 0.0;
    int a = 0;
    switch (cfg.scenario) {
      case 1:
        x = rng.normal();
        a = (rng.uniform() < 1.0 / (1.0 + std::exp(-x))) ? 1 : 0;
        break;
      case 2:
        x = supplemental ? rng.normal(3.0, 1.0) : rng.normal();
        a = (rng.uniform() < 1.0 / (1.0 + std::exp(-x))) ? 1 : 0;
        break;
      case 3:
        a = (rng.uniform() < 0.5) ? 1 : 0;
        x = rng.normal(0.0, a ? std::sqrt(2.0 / 3.0) : std::sqrt(4.0 / 3.0));
        break;
    }
    const double fx = (cfg.scenario == 3) ? std::exp(x) : x;
    const double effect = supplemental ? (1.0 + cfg.delta) : 1.0;
    r.a = a;
    r.x = {x};
    r.y = effect * a + fx + rng.normal();
    r.source = supplemental ? "S1" : "P";
    return r;
  };

  for (int i = 0; i < cfg.n_primary; ++i) ds.rows.push_back(draw_row(false));
  for (int i = 0; i < cfg.n_supplemental; ++i) ds.rows.push_back(draw_row(true));
  validate_dataset(ds);
  return ds;
}

// Offset grids for the two study parts: -2.5..2.5 by 1/2, and -1.5..1.5 by 3/4.
inline std::vector<double> delta_grid(int part) {
  std::vector<double> grid;
  if (part == 1) {
    for (int k = -5; k <= 5; ++k) grid.push_back(0.5 * k);
  } else if (part == 2) {
    for (int k = -2; k <= 2; ++k) grid.push_back(0.75 * k);
  } else {
    throw std::invalid_argument("sim: delta grid part must be 1 or 2");
  }
  return grid;
}

// Adds delta * sd(Y) to the treated outcomes of one source, where sd(Y) is
// the sample standard deviation of that source's outcomes before this
// modification (or a caller-supplied value, for chained applications under a
// fixed-sd convention).
inline Dataset shift_treatment_effect(const Dataset& ds, const std::string& source, double delta,
                                      std::optional<double> sd_override = {}) {
  const auto rows = ds.rows_for_source(source);
  if (rows.empty()) throw std::invalid_argument("sim: unknown source '" + source + "'");
  double sd;
  if (sd_override) {
    sd = *sd_override;
  } else {
    std::vector<double> y;
    y.reserve(rows.size());
    for (auto i : rows) y.push_back(ds.rows[i].y);
    sd = sample_sd(y);
  }
  Dataset out = ds;
  for (auto i : rows)
    if (out.rows[i].a == 1) out.rows[i].y += delta * sd;
  return out;
}

// ---------------------------------------------------------------------------
// Monte Carlo study harness

struct EstimatorSpec {
  ModelKind model = ModelKind::Blm;
  mem::ModelPriorKind prior = mem::ModelPriorKind::FlatHalf;
  bool borrow = true;

  std::string name() const {
    return to_string(model) + (borrow ? "" : "-nb");
  }
  std::string prior_name() const { return borrow ? mem::to_string(prior) : "none"; }
};

struct McOptions {
  int posterior_draws = 100;  // B per fit
  int threads = 1;
  BartOptions bart;                 // shared tree-model knobs
  Formula blm_formula;              // defaults to intercept + A + every covariate
  double max_failure_rate = 0.05;
};

struct McCell {
  int scenario = 0;
  double delta = 0.0;
  std::string estimator;
  std::string prior_kind;
  int reps = 0;
  double bias = 0.0;
  double root_mse = 0.0;
  double mean_borrow_weight = 0.0;
  int failures = 0;
};

struct McResult {
  std::vector<McCell> cells;
  std::uint64_t master_seed = 0;
};

namespace detail {

struct RepEstimate {
  bool ok = false;
  double delta_hat = 0.0;
  double borrow_weight = 0.0;
};

inline McCell aggregate(int scenario, double delta, const EstimatorSpec& est, double truth,
                        const std::vector<RepEstimate>& reps, double max_failure_rate) {
  McCell cell;
  cell.scenario = scenario;
  cell.delta = delta;
  cell.estimator = est.name();
  cell.prior_kind = est.prior_name();
  double sum_err = 0.0, sum_sq = 0.0, sum_bw = 0.0;
  int ok = 0;
  for (const auto& r : reps) {
    if (!r.ok) {
      ++cell.failures;
      continue;
    }
    ++ok;
    sum_err += r.delta_hat - truth;
    sum_sq += (r.delta_hat - truth) * (r.delta_hat - truth);
    sum_bw += r.borrow_weight;
  }
  if (cell.failures > max_failure_rate * static_cast<double>(reps.size()))
    throw std::runtime_error("sim: estimator " + cell.estimator + " failed " +
                             std::to_string(cell.failures) + " of " +
                             std::to_string(reps.size()) + " reps at delta " +
                             std::to_string(delta));
  if (ok == 0) throw std::runtime_error("sim: no successful reps for " + cell.estimator);
  cell.reps = ok;
  cell.bias = sum_err / ok;
  cell.root_mse = std::sqrt(sum_sq / ok);
  cell.mean_borrow_weight = sum_bw / ok;
  return cell;
}

}  // namespace detail

inline ModelSpec model_spec_for(const EstimatorSpec& est, const Dataset& ds,
                                const McOptions& opts) {
  ModelSpec spec;
  spec.kind = est.model;
  spec.bart = opts.bart;
  if (opts.blm_formula.covariates.empty() && opts.blm_formula.treatment_interactions.empty()) {
    spec.formula.covariates = ds.covariate_names;
  } else {
    spec.formula = opts.blm_formula;
  }
  return spec;
}

// One full study: for every delta and replicate, generate data, run each
// estimator, and aggregate bias, root MSE and the mean posterior borrowing
// weight against the true effect of 1. Replicates run in parallel with seeds
// derived from (master seed, delta index, rep index); a fixed master seed
// reproduces the result exactly at any thread count. Estimator failures are
// excluded and counted, but more than max_failure_rate of them aborts.
inline McResult run_monte_carlo(const ScenarioConfig& base, const std::vector<double>& deltas,
                                const std::vector<EstimatorSpec>& estimators, int reps,
                                const McOptions& opts, std::uint64_t master_seed) {
  if (reps < 1) throw std::invalid_argument("sim: need at least one replicate");
  if (estimators.empty()) throw std::invalid_argument("sim: no estimators requested");
  base.validate();

  const Rng root(master_seed);
  McResult result;
  result.master_seed = master_seed;

  for (std::size_t d_idx = 0; d_idx < deltas.size(); ++d_idx) {
    ScenarioConfig cfg = base;
    cfg.delta = deltas[d_idx];

    std::vector<std::vector<detail::RepEstimate>> estimates(
        estimators.size(), std::vector<detail::RepEstimate>(static_cast<std::size_t>(reps)));

    parallel_for(static_cast<std::size_t>(reps), opts.threads, [&](std::size_t rep) {
      const std::uint64_t rep_stream = (static_cast<std::uint64_t>(d_idx) << 32) | rep;
      Rng rep_rng = root.derive(rep_stream);
      const Dataset ds = gen_scenario(cfg, rep_rng);
      for (std::size_t e = 0; e < estimators.size(); ++e) {
        const EstimatorSpec& est = estimators[e];
        detail::RepEstimate& out = estimates[e][rep];
        try {
          const ModelSpec model = model_spec_for(est, ds, opts);
          mem::MemSpace space;
          if (est.borrow) {
            const mem::ModelPrior prior{est.prior, model.prior_predictor_count(ds)};
            space = mem::compute_mem_space(ds, model, prior,
                                           rep_rng.derive(1000 + e).seed());
          } else {
            space = mem::no_borrow_space(ds);
          }
          const auto post = pate::pate_posterior(ds, model, space, {}, opts.posterior_draws,
                                                 rep_rng.derive(2000 + e).seed());
          out.delta_hat = mean(post.draws);
          out.borrow_weight = est.borrow ? space.borrow_weight() : 0.0;
          out.ok = true;
        } catch (const std::exception&) {
          out.ok = false;
        }
      }
    });

    for (std::size_t e = 0; e < estimators.size(); ++e)
      result.cells.push_back(detail::aggregate(cfg.scenario, cfg.delta, estimators[e], 1.0,
                                               estimates[e], opts.max_failure_rate));
  }
  return result;
}

inline void write_mc_csv(const McResult& result, std::ostream& out) {
  out << "scenario,delta,estimator,prior_kind,reps,bias,root_mse,mean_borrow_weight,failures\n";
  for (const auto& c : result.cells)
    out << c.scenario << ',' << format_g17(c.delta) << ',' << c.estimator << ',' << c.prior_kind
        << ',' << c.reps << ',' << format_g17(c.bias) << ',' << format_g17(c.root_mse) << ','
        << format_g17(c.mean_borrow_weight) << ',' << c.failures << '\n';
}

}  // namespace msborrow::sim
