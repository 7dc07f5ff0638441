#include <doctest.h>

#include <Eigen/Core>
#include <cmath>
#include <vector>

#include "msborrow/bart.hpp"
#include "msborrow/data.hpp"
#include "msborrow/ols.hpp"
#include "msborrow/rng.hpp"
#include "oracles.hpp"

using namespace msborrow;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd random_predictors(Rng& rng, int n, int p) {
  MatrixXd X(n, p);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < p; ++j) X(i, j) = rng.normal();
  return X;
}

// Pairwise brute-force co-residence, the oracle for shared_node_correlation.
MatrixXd brute_force_correlation(const std::vector<bart::Tree>& trees, const MatrixXd& X) {
  const Eigen::Index n = X.rows();
  MatrixXd R = MatrixXd::Zero(n, n);
  for (Eigen::Index k = 0; k < n; ++k)
    for (Eigen::Index l = 0; l < n; ++l) {
      int shared = 0;
      for (const auto& t : trees)
        if (t.assign(X, k) == t.assign(X, l)) ++shared;
      R(k, l) = static_cast<double>(shared) / static_cast<double>(trees.size());
    }
  return R;
}

}  // namespace

TEST_CASE("default config fixes gamma, tau and nu") {
  Rng rng(2);
  MatrixXd X = random_predictors(rng, 60, 2);
  VectorXd y(60);
  for (int i = 0; i < 60; ++i) y[i] = 0.4 * X(i, 0) + rng.normal(0.0, 0.3);
  auto [ys, t] = standardize_outcome(y);
  auto cfg = bart::default_config(X, ys);

  MatrixXd D(60, 3);
  D.col(0).setOnes();
  D.rightCols(2) = X;
  const double s2hat = least_squares(D, ys).sigma2_hat;

  CHECK(cfg.m == 200);
  CHECK(cfg.nu == 3.0);
  CHECK(cfg.gamma == doctest::Approx(16.0 * 200.0 * s2hat).epsilon(1e-12));
  // the modified-prior leaf variance sigma^2/gamma matches the fixed-variance
  // default 1/(16 m) when sigma^2 sits at its least-squares estimate
  CHECK(s2hat / cfg.gamma == doctest::Approx(1.0 / 3200.0).epsilon(1e-12));
  const double tau = 0.5 / (2.0 * std::sqrt(200.0));
  CHECK(cfg.tau2 == doctest::Approx(tau * tau).epsilon(1e-12));
  CHECK(tau == doctest::Approx(0.01768).epsilon(1e-3));
  CHECK(cfg.tau2 == doctest::Approx(1.0 / 3200.0).epsilon(1e-12));
}

TEST_CASE("lambda puts 90% of the sigma^2 prior below s2hat") {
  Rng rng(3);
  MatrixXd X = random_predictors(rng, 80, 1);
  VectorXd y(80);
  for (int i = 0; i < 80; ++i) y[i] = X(i, 0) + rng.normal();
  auto [ys, t] = standardize_outcome(y);
  auto cfg = bart::default_config(X, ys);
  MatrixXd D(80, 2);
  D.col(0).setOnes();
  D.col(1) = X.col(0);
  const double s2hat = least_squares(D, ys).sigma2_hat;

  Rng mc(10);
  int below = 0;
  const int n_draws = 200000;
  for (int i = 0; i < n_draws; ++i)
    if (mc.inverse_gamma(cfg.nu / 2.0, cfg.nu * cfg.lambda / 2.0) <= s2hat) ++below;
  const double frac = static_cast<double>(below) / n_draws;
  const double se = std::sqrt(0.9 * 0.1 / n_draws);
  CHECK(std::abs(frac - 0.9) < 3 * se);
}

TEST_CASE("cutpoint grids") {
  MatrixXd X(6, 3);
  X.col(0) << 1, 1, 1, 1, 1, 1;  // constant: no grid
  X.col(1) << 0, 1, 0, 1, 0, 1;  // binary: single cut at 0
  X.col(2) << 0.1, 0.5, 0.3, 0.9, 0.7, 0.2;
  auto grids = bart::cutpoint_grids(X, 100);
  CHECK(grids[0].empty());
  REQUIRE(grids[1].size() == 1);
  CHECK(grids[1][0] == 0.0);
  CHECK(grids[2].size() == 5);  // all distinct values but the max

  Rng rng(4);
  MatrixXd Z = random_predictors(rng, 1000, 1);
  auto big = bart::cutpoint_grids(Z, 100);
  CHECK(big[0].size() == 100);
}

TEST_CASE("alpha = 0 makes every prior tree a stump") {
  Rng rng(5);
  MatrixXd X = random_predictors(rng, 40, 2);
  bart::BartConfig cfg;
  cfg.m = 25;
  cfg.alpha = 0.0;
  cfg.gamma = 1.0;
  auto grids = bart::cutpoint_grids(X, cfg.cutpoint_grid);
  auto trees = bart::sample_prior_trees(cfg, X, grids, rng);
  REQUIRE(trees.size() == 25);
  for (const auto& t : trees) CHECK(t.nodes[0].is_leaf());
}

TEST_CASE("prior split frequencies follow alpha (1+d)^-beta") {
  Rng rng(6);
  MatrixXd X = random_predictors(rng, 400, 2);
  bart::BartConfig cfg;
  cfg.m = 1;
  cfg.alpha = 0.95;
  cfg.beta_depth = 2.0;
  cfg.gamma = 1.0;
  auto grids = bart::cutpoint_grids(X, cfg.cutpoint_grid);

  int root_splits = 0;
  int d1_eligible = 0, d1_splits = 0;
  const int n_trees = 20000;
  for (int s = 0; s < n_trees; ++s) {
    Rng sub = rng.derive(static_cast<std::uint64_t>(s));
    auto trees = bart::sample_prior_trees(cfg, X, grids, sub);
    const auto& t = trees[0];
    if (t.nodes[0].is_leaf()) continue;
    ++root_splits;
    // depth-1 children: eligibility needs their row partitions
    std::vector<int> left_rows, right_rows;
    for (int i = 0; i < 400; ++i)
      ((X(i, t.nodes[0].var) <= t.nodes[0].cut) ? left_rows : right_rows).push_back(i);
    for (auto [child, rows] :
         {std::pair{t.nodes[0].left, &left_rows}, std::pair{t.nodes[0].right, &right_rows}}) {
      if (bart::detail::eligible_split_vars(X, grids, *rows).empty()) continue;
      ++d1_eligible;
      if (!t.nodes[static_cast<std::size_t>(child)].is_leaf()) ++d1_splits;
    }
  }
  const double root_rate = static_cast<double>(root_splits) / n_trees;
  const double se_root = std::sqrt(0.95 * 0.05 / n_trees);
  CHECK(std::abs(root_rate - 0.95) < 3 * se_root);

  const double d1_rate = static_cast<double>(d1_splits) / d1_eligible;
  const double expect = 0.95 / 4.0;  // alpha (1+1)^-2
  const double se_d1 = std::sqrt(expect * (1 - expect) / d1_eligible);
  CHECK(std::abs(d1_rate - expect) < 3 * se_d1);
}

TEST_CASE("a single binary covariate exhausts its cutpoints at depth 1") {
  Rng rng(7);
  MatrixXd X(50, 1);
  for (int i = 0; i < 50; ++i) X(i, 0) = static_cast<double>(i % 2);
  bart::BartConfig cfg;
  cfg.m = 200;
  cfg.alpha = 0.95;
  cfg.beta_depth = 0.0;  // maximal pressure to split
  cfg.gamma = 1.0;
  auto grids = bart::cutpoint_grids(X, cfg.cutpoint_grid);
  auto trees = bart::sample_prior_trees(cfg, X, grids, rng);
  for (const auto& t : trees)
    t.for_each_leaf([&](int id) { CHECK(t.nodes[static_cast<std::size_t>(id)].depth <= 1); });
}

TEST_CASE("shared node correlation matches brute force and its edge cases") {
  Rng rng(8);
  MatrixXd X = random_predictors(rng, 30, 2);

  // single stump: everyone shares the single leaf
  std::vector<bart::Tree> stump(1);
  CHECK((bart::shared_node_correlation(stump, X) - MatrixXd::Ones(30, 30)).cwiseAbs().maxCoeff() ==
        0.0);

  // one stump and one split tree: co-residence 0.5 across the split
  bart::Tree split_tree;
  split_tree.grow(0, 0, 0.0);
  std::vector<bart::Tree> pair_trees{bart::Tree{}, split_tree};
  MatrixXd R2 = bart::shared_node_correlation(pair_trees, X);
  Eigen::Index neg = -1, pos = -1;
  for (Eigen::Index i = 0; i < 30 && (neg < 0 || pos < 0); ++i)
    (X(i, 0) <= 0.0 ? neg : pos) = i;
  REQUIRE(neg >= 0);
  REQUIRE(pos >= 0);
  CHECK(R2(neg, pos) == 0.5);

  // random prior forests agree with the pairwise oracle exactly
  bart::BartConfig cfg;
  cfg.m = 7;
  cfg.alpha = 0.9;
  cfg.beta_depth = 1.0;
  cfg.gamma = 1.0;
  auto grids = bart::cutpoint_grids(X, cfg.cutpoint_grid);
  auto forest = bart::sample_prior_trees(cfg, X, grids, rng);
  MatrixXd R = bart::shared_node_correlation(forest, X);
  MatrixXd R_oracle = brute_force_correlation(forest, X);
  CHECK((R - R_oracle).cwiseAbs().maxCoeff() == 0.0);
  CHECK((R - R.transpose()).cwiseAbs().maxCoeff() == 0.0);
  for (Eigen::Index i = 0; i < 30; ++i) CHECK(R(i, i) == 1.0);
  CHECK(R.minCoeff() >= 0.0);
  CHECK(R.maxCoeff() <= 1.0);
}

TEST_CASE("stump forests give the rank-one closed form marginal likelihood") {
  for (int n : {1, 5, 20}) {
    Rng rng(100 + n);
    MatrixXd X = random_predictors(rng, n, 2);
    VectorXd y(n);
    for (int i = 0; i < n; ++i) y[i] = rng.normal(0.0, 0.4);

    bart::BartConfig cfg;
    cfg.m = 200;
    cfg.alpha = 0.0;  // stumps with probability one
    cfg.gamma = 1.0 / 3200.0;
    cfg.lambda = 0.2;
    Rng mc(55);
    const double got = bart::marginal_log_likelihood_prior_mc(X, y, cfg, 20, mc);
    const double want = oracle::stump_forest_t_log_density(
        y, cfg.nu, cfg.lambda, static_cast<double>(cfg.m) / cfg.gamma);
    CHECK(got == doctest::Approx(want).epsilon(1e-10));
  }
}

TEST_CASE("n = 1 marginal likelihood is exact regardless of trees") {
  Rng rng(9);
  MatrixXd X = random_predictors(rng, 1, 3);
  VectorXd y(1);
  y << 0.25;
  bart::BartConfig cfg;
  cfg.m = 50;
  cfg.alpha = 0.95;
  cfg.gamma = 2.0;
  cfg.lambda = 0.7;
  Rng mc(66);
  const double got = bart::marginal_log_likelihood_prior_mc(X, y, cfg, 5, mc);
  const double want = oracle::stump_forest_t_log_density(y, cfg.nu, cfg.lambda, 50.0 / 2.0);
  CHECK(got == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("prior MC estimate lies between the per-draw extremes") {
  Rng rng(10);
  MatrixXd X = random_predictors(rng, 25, 2);
  VectorXd y(25);
  for (int i = 0; i < 25; ++i) y[i] = rng.normal(0.0, 0.3);
  bart::BartConfig cfg;
  cfg.m = 10;
  cfg.alpha = 0.9;
  cfg.gamma = 0.05;
  cfg.lambda = 0.1;
  const int n_draws = 30;
  Rng mc(77);
  const double got = bart::marginal_log_likelihood_prior_mc(X, y, cfg, n_draws, mc);

  auto grids = bart::cutpoint_grids(X, cfg.cutpoint_grid);
  double lo = 1e300, hi = -1e300;
  for (int d = 0; d < n_draws; ++d) {
    Rng sub = mc.derive(static_cast<std::uint64_t>(d));
    auto trees = bart::sample_prior_trees(cfg, X, grids, sub);
    MatrixXd R = bart::shared_node_correlation(trees, X);
    MatrixXd shape = cfg.lambda * ((cfg.m / cfg.gamma) * R + MatrixXd::Identity(25, 25));
    const double v = mvt_log_density(y, VectorXd::Zero(25), shape, cfg.nu);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(got >= lo);
  CHECK(got <= hi);
  CHECK(bart::marginal_log_likelihood_prior_mc(X, y, cfg, n_draws, mc) == got);

  bart::BartConfig bad = cfg;
  bad.node_prior = bart::NodePriorKind::Default;
  bad.tau2 = 0.01;
  CHECK_THROWS_AS(bart::marginal_log_likelihood_prior_mc(X, y, bad, 5, mc), std::invalid_argument);
}

TEST_CASE("grow and prune acceptances are mutually inverse") {
  Rng rng(11);
  const int n = 30;
  MatrixXd X = random_predictors(rng, n, 2);
  VectorXd resid(n);
  for (int i = 0; i < n; ++i) resid[i] = rng.normal(0.0, 0.8);
  bart::BartConfig cfg;
  cfg.m = 1;
  cfg.alpha = 0.8;
  cfg.beta_depth = 1.5;
  cfg.gamma = 2.5;
  auto grids = bart::cutpoint_grids(X, cfg.cutpoint_grid);
  const double sigma2 = 0.7;

  for (int variant = 0; variant < 2; ++variant) {
    bart::Tree tree;
    std::vector<int> leaf_of(n, 0);
    if (variant == 1) {
      // start from a depth-1 tree and grow one of its leaves
      tree.grow(0, 1, X(4, 1));
      for (int i = 0; i < n; ++i) leaf_of[i] = (X(i, 1) <= X(4, 1)) ? 1 : 2;
    }
    auto rows = bart::detail::rows_by_node(tree, leaf_of);
    auto growable = bart::detail::growable_leaves(tree, X, grids, rows);
    REQUIRE(!growable.empty());
    const int leaf = growable[0];
    const auto eligible =
        bart::detail::eligible_split_vars(X, grids, rows[static_cast<std::size_t>(leaf)]);
    REQUIRE(!eligible.empty());

    bart::detail::GrowMove move;
    move.leaf = leaf;
    move.var = eligible[0].var;
    move.cut = grids[static_cast<std::size_t>(
        move.var)][static_cast<std::size_t>(eligible[0].first_cut + eligible[0].n_cuts / 2)];
    for (int i : rows[static_cast<std::size_t>(leaf)])
      ((X(i, move.var) <= move.cut) ? move.left_rows : move.right_rows).push_back(i);
    REQUIRE(!move.left_rows.empty());
    REQUIRE(!move.right_rows.empty());

    const double grow_log_a =
        bart::detail::grow_log_acceptance(cfg, sigma2, tree, X, grids, rows, resid, move);

    bart::Tree grown = tree;
    grown.grow(move.leaf, move.var, move.cut);
    std::vector<int> leaf_of2 = leaf_of;
    const auto& nd = grown.nodes[static_cast<std::size_t>(move.leaf)];
    for (int i : move.left_rows) leaf_of2[static_cast<std::size_t>(i)] = nd.left;
    for (int i : move.right_rows) leaf_of2[static_cast<std::size_t>(i)] = nd.right;
    auto rows2 = bart::detail::rows_by_node(grown, leaf_of2);

    const double prune_log_a = bart::detail::prune_log_acceptance(cfg, sigma2, grown, X, grids,
                                                                  rows2, resid, move.leaf);
    CHECK(grow_log_a == doctest::Approx(-prune_log_a).epsilon(1e-12));
  }
}

TEST_CASE("stump-forced fit reproduces the conjugate node mean") {
  Rng rng(12);
  const int n = 40;
  MatrixXd X = random_predictors(rng, n, 1);
  VectorXd y(n);
  for (int i = 0; i < n; ++i) y[i] = rng.normal(0.2, 0.15);
  auto [ys, t] = standardize_outcome(y);

  bart::BartConfig cfg;
  cfg.m = 1;
  cfg.alpha = 0.0;
  cfg.gamma = 5.0;
  cfg.lambda = 0.05;
  cfg.sigma2_init = 0.02;
  cfg.n_burn = 200;
  cfg.n_keep = 3000;
  Rng chain(13);
  auto draws = bart::fit_mcmc(X, ys, cfg, chain);
  REQUIRE(draws.size() == 3000);

  std::vector<double> values;
  values.reserve(draws.size());
  for (const auto& d : draws) {
    CHECK(d.trees[0].nodes[0].is_leaf());
    values.push_back(d.trees[0].nodes[0].value);
  }
  const double expect = ys.sum() / (static_cast<double>(n) + cfg.gamma);
  auto m = oracle::moments(values);
  CHECK(std::abs(m.mean - expect) < 4 * m.se_mean);
}

TEST_CASE("mcmc is deterministic under a fixed seed") {
  Rng rng(14);
  const int n = 50;
  MatrixXd X = random_predictors(rng, n, 2);
  VectorXd y(n);
  for (int i = 0; i < n; ++i) y[i] = X(i, 0) + rng.normal(0.0, 0.5);
  auto [ys, t] = standardize_outcome(y);
  auto cfg = bart::default_config(X, ys);
  cfg.m = 20;
  cfg.n_burn = 20;
  cfg.n_keep = 10;

  Rng c1(999), c2(999);
  auto d1 = bart::fit_mcmc(X, ys, cfg, c1);
  auto d2 = bart::fit_mcmc(X, ys, cfg, c2);
  REQUIRE(d1.size() == d2.size());
  for (std::size_t k = 0; k < d1.size(); ++k) {
    CHECK(d1[k].sigma2 == d2[k].sigma2);
    for (int i = 0; i < n; ++i) CHECK(d1[k].predict_row_std(X, i) == d2[k].predict_row_std(X, i));
  }
}

TEST_CASE("mcmc recovers a simple signal") {
  Rng rng(15);
  const int n = 200;
  MatrixXd X = random_predictors(rng, n, 1);
  VectorXd y(n);
  for (int i = 0; i < n; ++i) y[i] = X(i, 0) + rng.normal(0.0, 0.1);
  auto [ys, t] = standardize_outcome(y);
  auto cfg = bart::default_config(X, ys);
  cfg.m = 50;
  cfg.n_burn = 100;
  cfg.n_keep = 100;
  cfg.check_partition = true;
  Rng chain(16);
  auto draws = bart::fit_mcmc(X, ys, cfg, chain);

  VectorXd mean_fit = VectorXd::Zero(n);
  for (const auto& d : draws)
    for (int i = 0; i < n; ++i) mean_fit[i] += d.predict_row_std(X, i);
  mean_fit /= static_cast<double>(draws.size());
  const double rmse = std::sqrt((mean_fit - ys).squaredNorm() / n);
  CHECK(rmse < 0.2);
}

TEST_CASE("change moves keep the sampler valid") {
  Rng rng(18);
  const int n = 120;
  MatrixXd X = random_predictors(rng, n, 2);
  VectorXd y(n);
  for (int i = 0; i < n; ++i) y[i] = X(i, 0) - 0.5 * X(i, 1) + rng.normal(0.0, 0.2);
  auto [ys, t] = standardize_outcome(y);
  auto cfg = bart::default_config(X, ys);
  cfg.m = 25;
  cfg.n_burn = 60;
  cfg.n_keep = 60;
  cfg.enable_change_moves = true;
  cfg.check_partition = true;

  Rng c1(314), c2(314);
  auto d1 = bart::fit_mcmc(X, ys, cfg, c1);
  auto d2 = bart::fit_mcmc(X, ys, cfg, c2);
  REQUIRE(d1.size() == 60);
  for (std::size_t k = 0; k < d1.size(); ++k) CHECK(d1[k].sigma2 == d2[k].sigma2);

  VectorXd mean_fit = VectorXd::Zero(n);
  for (const auto& d : d1)
    for (int i = 0; i < n; ++i) mean_fit[i] += d.predict_row_std(X, i);
  mean_fit /= static_cast<double>(d1.size());
  CHECK(std::sqrt((mean_fit - ys).squaredNorm() / n) < 0.25);
}

TEST_CASE("all-constant designs are refused") {
  MatrixXd X = MatrixXd::Ones(10, 2);
  VectorXd y = VectorXd::LinSpaced(10, -0.5, 0.5);
  bart::BartConfig cfg;
  cfg.gamma = 1.0;
  Rng rng(17);
  CHECK_THROWS_WITH_AS(bart::fit_mcmc(X, y, cfg, rng), doctest::Contains("constant"),
                       std::invalid_argument);
}

TEST_CASE("prediction mechanics") {
  OutcomeTransform t{2.0, 4.0};  // invert: z * 4 + 2
  MatrixXd X(2, 1);
  X << -5.0, 3.0;

  // zero forest: predictions equal the inverse transform of zero
  bart::TreeEnsembleDraw zeros;
  zeros.trees.assign(3, bart::Tree{});
  zeros.n_predictors = 1;
  auto p0 = bart::predict(zeros, X, t);
  CHECK(p0[0] == doctest::Approx(2.0));
  CHECK(p0[1] == doctest::Approx(2.0));

  // single split tree: rule tracing
  bart::Tree split;
  split.grow(0, 0, 0.0);
  split.nodes[1].value = -1.0;
  split.nodes[2].value = 1.0;
  bart::TreeEnsembleDraw one;
  one.trees = {split};
  one.n_predictors = 1;
  CHECK(one.predict_row_std(X, 0) == -1.0);
  CHECK(one.predict_row_std(X, 1) == 1.0);

  // two stumps: contributions add
  bart::Tree s1, s2;
  s1.nodes[0].value = 0.3;
  s2.nodes[0].value = -0.1;
  bart::TreeEnsembleDraw two;
  two.trees = {s1, s2};
  two.n_predictors = 1;
  CHECK(two.predict_row_std(X, 0) == doctest::Approx(0.2));

  // column mismatch
  MatrixXd bad(2, 3);
  bad.setZero();
  CHECK_THROWS_AS(bart::predict(one, bad, t), std::invalid_argument);
}
