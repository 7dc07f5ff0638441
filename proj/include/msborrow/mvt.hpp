#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <cmath>
#include <stdexcept>

namespace msborrow {

// Log density of the multivariate t distribution with `dof` degrees of
// freedom, location `loc` and shape matrix `shape` (not the covariance;
// the covariance is shape * dof / (dof - 2) when dof > 2), evaluated at x.
//
// The shape matrix is factored once with a Cholesky decomposition; if that
// fails, a single jitter of 1e-10 * trace/n is added to the diagonal and the
// factorization retried before giving up.
inline double mvt_log_density(const Eigen::VectorXd& x, const Eigen::VectorXd& loc,
                              const Eigen::MatrixXd& shape, double dof) {
  const auto n = x.size();
  if (loc.size() != n || shape.rows() != n || shape.cols() != n)
    throw std::invalid_argument("mvt_log_density: dimension mismatch");
  if (!(dof > 0.0)) throw std::invalid_argument("mvt_log_density: dof must be positive");
  if (n == 0) return 0.0;

  Eigen::LLT<Eigen::MatrixXd> llt(shape);
  if (llt.info() != Eigen::Success) {
    const double jitter = 1e-10 * shape.trace() / static_cast<double>(n);
    Eigen::MatrixXd jittered = shape;
    jittered.diagonal().array() += jitter;
    llt.compute(jittered);
    if (llt.info() != Eigen::Success)
      throw std::runtime_error("mvt_log_density: shape matrix is not positive definite");
  }

  const Eigen::MatrixXd& L = llt.matrixL();
  double log_det = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) log_det += 2.0 * std::log(L(i, i));

  const Eigen::VectorXd r = x - loc;
  const Eigen::VectorXd z = llt.matrixL().solve(r);
  const double quad = z.squaredNorm();

  const double nd = static_cast<double>(n);
  return std::lgamma(0.5 * (dof + nd)) - std::lgamma(0.5 * dof) -
         0.5 * nd * std::log(dof * M_PI) - 0.5 * log_det -
         0.5 * (dof + nd) * std::log1p(quad / dof);
}

}  // namespace msborrow
