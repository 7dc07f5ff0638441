#include <doctest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "msborrow/sim.hpp"
#include "oracles.hpp"

using namespace msborrow;

TEST_CASE("delta grids") {
  auto part1 = sim::delta_grid(1);
  REQUIRE(part1.size() == 11);
  CHECK(part1.front() == -2.5);
  CHECK(part1.back() == 2.5);
  CHECK(part1[5] == 0.0);

  auto part2 = sim::delta_grid(2);
  REQUIRE(part2.size() == 5);
  CHECK(part2 == std::vector<double>{-1.5, -0.75, 0.0, 0.75, 1.5});

  for (auto& grid : {part1, part2})
    for (std::size_t i = 0; i < grid.size(); ++i)
      CHECK(grid[i] == doctest::Approx(-grid[grid.size() - 1 - i]));

  CHECK_THROWS_AS(sim::delta_grid(3), std::invalid_argument);
}

TEST_CASE("scenario moments") {
  const int n = 100000;
  for (int scenario : {1, 2, 3}) {
    sim::ScenarioConfig cfg;
    cfg.scenario = scenario;
    cfg.n_primary = n;
    cfg.n_supplemental = n;
    Rng rng(1000 + scenario);
    const Dataset ds = sim::gen_scenario(cfg, rng);

    std::vector<double> x_primary, x_supp, x_treated, x_control;
    int treated_primary = 0;
    for (const auto& r : ds.rows) {
      if (r.source == "P") {
        x_primary.push_back(r.x[0]);
        treated_primary += r.a;
      } else {
        x_supp.push_back(r.x[0]);
      }
      if (r.source == "P") (r.a ? x_treated : x_control).push_back(r.x[0]);
    }

    if (scenario == 1 || scenario == 3) {
      // marginal treatment probability 1/2 in the primary source
      const double frac = static_cast<double>(treated_primary) / n;
      CHECK(std::abs(frac - 0.5) < 3 * std::sqrt(0.25 / n));
    }
    if (scenario == 1 || scenario == 2) {
      auto mp = oracle::moments(x_primary);
      CHECK(std::abs(mp.mean) < 3 * mp.se_mean);
    }
    if (scenario == 2) {
      auto ms = oracle::moments(x_supp);
      CHECK(std::abs(ms.mean - 3.0) < 3 * ms.se_mean);
    }
    if (scenario == 3) {
      auto mc = oracle::moments(x_control);
      auto mt = oracle::moments(x_treated);
      // variance of the sample variance of a normal: 2 sigma^4/(n-1)
      const double se_vc = std::sqrt(2.0 * (4.0 / 3.0) * (4.0 / 3.0) / (x_control.size() - 1.0));
      const double se_vt = std::sqrt(2.0 * (2.0 / 3.0) * (2.0 / 3.0) / (x_treated.size() - 1.0));
      CHECK(std::abs(mc.var - 4.0 / 3.0) < 3 * se_vc);
      CHECK(std::abs(mt.var - 2.0 / 3.0) < 3 * se_vt);
    }
  }
}

TEST_CASE("conditional effect is one everywhere, so the target is one") {
  // Y = effect*A + f(X) + noise: difference of conditional means at fixed X
  // is the effect; with delta = 0 both sources carry effect exactly 1.
  Rng rng(2020);
  sim::ScenarioConfig cfg;
  cfg.scenario = 1;
  cfg.n_primary = 50000;
  cfg.n_supplemental = 2;
  const Dataset ds = sim::gen_scenario(cfg, rng);
  // regress out f(x) = x exactly: residual mean difference is the effect
  double sum_t = 0.0, sum_c = 0.0;
  int n_t = 0, n_c = 0;
  for (const auto& r : ds.rows) {
    if (r.source != "P") continue;
    const double resid = r.y - r.x[0];
    if (r.a) {
      sum_t += resid;
      ++n_t;
    } else {
      sum_c += resid;
      ++n_c;
    }
  }
  const double diff = sum_t / n_t - sum_c / n_c;
  CHECK(std::abs(diff - 1.0) < 0.05);
}

TEST_CASE("treatment effect shift") {
  Rng rng(3030);
  sim::ScenarioConfig cfg;
  cfg.n_primary = 40;
  cfg.n_supplemental = 40;
  const Dataset ds = sim::gen_scenario(cfg, rng);

  // delta = 0 leaves everything untouched
  const Dataset same = sim::shift_treatment_effect(ds, "S1", 0.0);
  for (std::size_t i = 0; i < ds.rows.size(); ++i) CHECK(same.rows[i].y == ds.rows[i].y);

  // treated outcomes of the named source move by exactly delta * sd
  std::vector<double> y_supp;
  for (auto i : ds.rows_for_source("S1")) y_supp.push_back(ds.rows[i].y);
  const double sd = sample_sd(y_supp);
  const Dataset up = sim::shift_treatment_effect(ds, "S1", 1.0);
  for (auto i : ds.rows_for_source("S1"))
    CHECK(up.rows[i].y == doctest::Approx(ds.rows[i].y + (ds.rows[i].a ? sd : 0.0)));
  for (auto i : ds.rows_for_source("P")) CHECK(up.rows[i].y == ds.rows[i].y);

  // applying delta then -delta under the fixed-sd convention round-trips
  const Dataset back = sim::shift_treatment_effect(up, "S1", -1.0, sd);
  for (std::size_t i = 0; i < ds.rows.size(); ++i)
    CHECK(back.rows[i].y == doctest::Approx(ds.rows[i].y).epsilon(1e-12));

  CHECK_THROWS_AS(sim::shift_treatment_effect(ds, "nope", 1.0), std::invalid_argument);
}

TEST_CASE("aggregation of a perfect estimator has zero bias and zero rmse") {
  std::vector<sim::detail::RepEstimate> reps(20);
  for (auto& r : reps) {
    r.ok = true;
    r.delta_hat = 1.0;
    r.borrow_weight = 0.7;
  }
  sim::EstimatorSpec est;
  auto cell = sim::detail::aggregate(1, 0.0, est, 1.0, reps, 0.05);
  CHECK(cell.bias == 0.0);
  CHECK(cell.root_mse == 0.0);
  CHECK(cell.mean_borrow_weight == doctest::Approx(0.7));
  CHECK(cell.reps == 20);
  CHECK(cell.failures == 0);
}

TEST_CASE("aggregation enforces the failure cap and rmse >= |bias|") {
  std::vector<sim::detail::RepEstimate> reps(100);
  Rng rng(4040);
  for (auto& r : reps) {
    r.ok = true;
    r.delta_hat = 1.0 + rng.normal(0.3, 0.5);
  }
  reps[3].ok = false;
  sim::EstimatorSpec est;
  auto cell = sim::detail::aggregate(1, 0.0, est, 1.0, reps, 0.05);
  CHECK(cell.failures == 1);
  CHECK(cell.reps == 99);
  CHECK(cell.root_mse >= std::abs(cell.bias));

  for (int i = 0; i < 7; ++i) reps[static_cast<std::size_t>(i)].ok = false;
  CHECK_THROWS_AS(sim::detail::aggregate(1, 0.0, est, 1.0, reps, 0.05), std::runtime_error);
}

TEST_CASE("small monte carlo run is reproducible and sane") {
  sim::ScenarioConfig cfg;
  cfg.scenario = 1;
  cfg.n_primary = 60;
  cfg.n_supplemental = 60;
  std::vector<sim::EstimatorSpec> estimators = {
      {ModelKind::Blm, mem::ModelPriorKind::FlatHalf, true},
      {ModelKind::Blm, mem::ModelPriorKind::FlatHalf, false},
  };
  sim::McOptions opts;
  opts.posterior_draws = 40;
  opts.threads = 2;

  auto r1 = sim::run_monte_carlo(cfg, {0.0}, estimators, 20, opts, 5150);
  sim::McOptions serial = opts;
  serial.threads = 1;
  auto r2 = sim::run_monte_carlo(cfg, {0.0}, estimators, 20, serial, 5150);

  REQUIRE(r1.cells.size() == 2);
  REQUIRE(r2.cells.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(r1.cells[i].bias == r2.cells[i].bias);
    CHECK(r1.cells[i].root_mse == r2.cells[i].root_mse);
    CHECK(r1.cells[i].mean_borrow_weight == r2.cells[i].mean_borrow_weight);
    CHECK(r1.cells[i].root_mse >= std::abs(r1.cells[i].bias));
    CHECK(r1.cells[i].mean_borrow_weight >= 0.0);
    CHECK(r1.cells[i].mean_borrow_weight <= 1.0);
  }
  // the borrowing estimator borrows heavily when the sources agree
  CHECK(r1.cells[0].mean_borrow_weight > 0.5);
  CHECK(r1.cells[1].mean_borrow_weight == 0.0);
  // both estimators land near the true effect on identical sources
  CHECK(std::abs(r1.cells[0].bias) < 0.2);
  CHECK(std::abs(r1.cells[1].bias) < 0.2);
}

TEST_CASE("scenario-1 fit lands near the unit effect") {
  Rng rng(6060);
  sim::ScenarioConfig cfg;
  cfg.scenario = 1;
  const Dataset ds = sim::gen_scenario(cfg, rng);
  ModelSpec spec;
  spec.kind = ModelKind::Blm;
  spec.formula.covariates = ds.covariate_names;
  auto space = mem::compute_mem_space(ds, spec, {mem::ModelPriorKind::FlatHalf, 3}, 61);
  auto post = pate::pate_posterior(ds, spec, space, {}, 100, 62);
  CHECK(std::abs(mean(post.draws) - 1.0) < 0.3);
}

TEST_CASE("mc csv has the documented columns") {
  sim::McResult result;
  result.master_seed = 9;
  sim::McCell cell;
  cell.scenario = 2;
  cell.delta = -0.75;
  cell.estimator = "blm";
  cell.prior_kind = "half";
  cell.reps = 10;
  cell.bias = 0.015625;
  cell.root_mse = 0.25;
  cell.mean_borrow_weight = 0.5;
  cell.failures = 0;
  result.cells.push_back(cell);
  std::ostringstream out;
  sim::write_mc_csv(result, out);
  const std::string text = out.str();
  CHECK(text.find("scenario,delta,estimator,prior_kind,reps,bias,root_mse,mean_borrow_weight,"
                  "failures") == 0);
  CHECK(text.find("2,-0.75,blm,half,10,0.015625,0.25,0.5,0") != std::string::npos);
}
