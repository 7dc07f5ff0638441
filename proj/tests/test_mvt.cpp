#include <doctest.h>

#include <Eigen/Core>

#include "msborrow/mvt.hpp"
#include "oracles.hpp"

using namespace msborrow;
using Eigen::MatrixXd;
using Eigen::VectorXd;

TEST_CASE("univariate case matches the scalar t density") {
  MatrixXd shape(1, 1);
  shape << 1.2;
  VectorXd x(1), loc(1);
  x << 0.7;
  loc << -0.1;
  const double got = mvt_log_density(x, loc, shape, 5.0);
  const double want = oracle::t_log_density_1d(0.7, 5.0, -0.1, 1.2);
  CHECK(got == doctest::Approx(want).epsilon(1e-13));
}

TEST_CASE("zero-dimensional input integrates to one") {
  CHECK(mvt_log_density(VectorXd(0), VectorXd(0), MatrixXd(0, 0), 3.0) == 0.0);
}

TEST_CASE("diagonal shape factorizes into independent scalar terms at the mode") {
  // at x = loc the density is the normalizing constant, which for a diagonal
  // shape is not a product across coordinates (single dof couples them), so
  // compare against the direct formula instead
  const int n = 3;
  MatrixXd shape = MatrixXd::Zero(n, n);
  shape.diagonal() << 0.5, 2.0, 1.0;
  VectorXd x = VectorXd::Zero(n);
  const double dof = 4.0;
  const double want = std::lgamma(0.5 * (dof + n)) - std::lgamma(0.5 * dof) -
                      0.5 * n * std::log(dof * M_PI) -
                      0.5 * std::log(0.5 * 2.0 * 1.0);
  CHECK(mvt_log_density(x, x, shape, dof) == doctest::Approx(want).epsilon(1e-13));
}

TEST_CASE("singular positive semidefinite shapes succeed via the jitter retry") {
  const int n = 4;
  VectorXd v = VectorXd::LinSpaced(n, 1.0, 2.0);
  MatrixXd shape = v * v.transpose();  // rank one
  VectorXd x = VectorXd::Constant(n, 0.3);
  const double val = mvt_log_density(x, VectorXd::Zero(n), shape, 3.0);
  CHECK(std::isfinite(val));
}

TEST_CASE("indefinite shapes are rejected") {
  MatrixXd shape(2, 2);
  shape << 1.0, 0.0, 0.0, -1.0;
  VectorXd x = VectorXd::Zero(2);
  CHECK_THROWS_AS(mvt_log_density(x, x, shape, 3.0), std::runtime_error);
}

TEST_CASE("dimension mismatches are rejected") {
  MatrixXd shape = MatrixXd::Identity(2, 2);
  VectorXd x = VectorXd::Zero(3);
  CHECK_THROWS_AS(mvt_log_density(x, VectorXd::Zero(2), shape, 3.0), std::invalid_argument);
}
