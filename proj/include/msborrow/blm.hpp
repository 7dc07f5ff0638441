#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "msborrow/mvt.hpp"
#include "msborrow/ols.hpp"
#include "msborrow/rng.hpp"

namespace msborrow::blm {

// Normal-inverse-gamma prior for a linear model: sigma^2 ~ IG(a, b) and
// beta | sigma^2 ~ N(mu, sigma^2 V).
struct NigHyperparams {
  double a = 0.0;
  double b = 0.0;
  Eigen::VectorXd mu;
  Eigen::MatrixXd V;

  void validate() const {
    if (!(a > 0.0) || !std::isfinite(a) || !(b > 0.0) || !std::isfinite(b))
      throw std::invalid_argument("blm: hyperparameters a, b must be finite and positive");
    if (V.rows() != V.cols() || V.rows() != mu.size())
      throw std::invalid_argument("blm: hyperparameter dimensions disagree");
    const double scale = std::max(1.0, V.cwiseAbs().maxCoeff());
    if (((V - V.transpose()).cwiseAbs().maxCoeff()) > 1e-10 * scale)
      throw std::invalid_argument("blm: V is not symmetric");
    if (Eigen::LLT<Eigen::MatrixXd>(V).info() != Eigen::Success)
      throw std::invalid_argument("blm: V is not positive definite");
  }
};

struct NigPosterior {
  double a_n = 0.0;
  double b_n = 0.0;
  Eigen::VectorXd mu_n;
  Eigen::MatrixXd V_n;
};

// Empirical hyperparameters from the data block being fit: mu = (ybar, 0, ...),
// V = (D'D / n)^{-1}, and (a, b) solving mean = s2hat, variance = 2 s2hat^2
// for the inverse-gamma on sigma^2, which gives a = 2.5 and b = 1.5 s2hat.
inline NigHyperparams default_hyperparams(const Eigen::MatrixXd& D, const Eigen::VectorXd& y,
                                          const std::vector<std::string>& names = {}) {
  const Eigen::Index n = D.rows();
  const Eigen::Index d = D.cols();
  const OlsFit ls = least_squares(D, y, names);
  if (!(ls.sigma2_hat > 0.0))
    throw std::invalid_argument("blm: degenerate fit, least-squares residual variance is zero");

  NigHyperparams h;
  h.mu = Eigen::VectorXd::Zero(d);
  h.mu[0] = y.mean();
  Eigen::MatrixXd dtd_over_n = (D.transpose() * D) / static_cast<double>(n);
  Eigen::LLT<Eigen::MatrixXd> llt(dtd_over_n);
  if (llt.info() != Eigen::Success)
    throw std::invalid_argument("blm: D'D / n is not positive definite");
  h.V = llt.solve(Eigen::MatrixXd::Identity(d, d));
  h.V = 0.5 * (h.V + h.V.transpose());
  h.a = 2.5;
  h.b = 1.5 * ls.sigma2_hat;
  return h;
}

// Conjugate update. With zero rows the prior is returned unchanged.
inline NigPosterior posterior(const Eigen::MatrixXd& D, const Eigen::VectorXd& y,
                              const NigHyperparams& prior) {
  prior.validate();
  const Eigen::Index n = D.rows();
  if (y.size() != n) throw std::invalid_argument("blm: y length does not match design rows");
  if (D.cols() != prior.mu.size())
    throw std::invalid_argument("blm: design columns do not match prior dimension");
  if (n == 0) return {prior.a, prior.b, prior.mu, prior.V};

  Eigen::LLT<Eigen::MatrixXd> V_llt(prior.V);
  if (V_llt.info() != Eigen::Success)
    throw std::runtime_error("blm: prior V is not positive definite");
  const Eigen::Index d = D.cols();
  const Eigen::MatrixXd V_inv = V_llt.solve(Eigen::MatrixXd::Identity(d, d));

  Eigen::MatrixXd precision = V_inv + D.transpose() * D;
  precision = 0.5 * (precision + precision.transpose());
  Eigen::LLT<Eigen::MatrixXd> P_llt(precision);
  if (P_llt.info() != Eigen::Success)
    throw std::runtime_error(
        "blm: posterior precision is not positive definite; consider adding diagonal jitter");

  NigPosterior post;
  post.V_n = P_llt.solve(Eigen::MatrixXd::Identity(d, d));
  post.V_n = 0.5 * (post.V_n + post.V_n.transpose());
  post.mu_n = P_llt.solve(V_inv * prior.mu + D.transpose() * y);
  post.a_n = prior.a + 0.5 * static_cast<double>(n);
  const double quad_prior = prior.mu.dot(V_inv * prior.mu);
  const double quad_post = post.mu_n.dot(precision * post.mu_n);
  post.b_n = prior.b + 0.5 * (y.squaredNorm() + quad_prior - quad_post);
  if (!(post.b_n > 0.0))
    throw std::runtime_error("blm: posterior rate b_n is not positive (numerical failure)");
  return post;
}

struct CoefficientDraw {
  Eigen::VectorXd beta;
  double sigma2 = 0.0;
};

// Exact draws from the posterior: sigma^2 ~ IG(a_n, b_n) then
// beta | sigma^2 ~ N(mu_n, sigma^2 V_n). Pure function of (posterior, rng state).
inline std::vector<CoefficientDraw> sample_coefficients(const NigPosterior& post, int n_draws,
                                                        Rng& rng) {
  if (n_draws < 1) throw std::invalid_argument("blm: need at least one draw");
  Eigen::LLT<Eigen::MatrixXd> llt(post.V_n);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("blm: posterior V_n is not positive definite");
  const Eigen::MatrixXd L = llt.matrixL();
  const Eigen::Index d = post.mu_n.size();

  std::vector<CoefficientDraw> draws;
  draws.reserve(static_cast<std::size_t>(n_draws));
  for (int b = 0; b < n_draws; ++b) {
    CoefficientDraw draw;
    draw.sigma2 = rng.inverse_gamma(post.a_n, post.b_n);
    Eigen::VectorXd z(d);
    for (Eigen::Index i = 0; i < d; ++i) z[i] = rng.normal();
    draw.beta = post.mu_n + std::sqrt(draw.sigma2) * (L * z);
    draws.push_back(std::move(draw));
  }
  return draws;
}

// Log marginal likelihood of y: a multivariate t with 2a degrees of freedom,
// location D mu and shape (b/a)(I + D V D').
inline double marginal_log_likelihood(const Eigen::MatrixXd& D, const Eigen::VectorXd& y,
                                      const NigHyperparams& prior) {
  prior.validate();
  const Eigen::Index n = D.rows();
  if (y.size() != n) throw std::invalid_argument("blm: y length does not match design rows");
  if (n == 0) return 0.0;
  Eigen::MatrixXd shape =
      (prior.b / prior.a) *
      (Eigen::MatrixXd::Identity(n, n) + D * prior.V.selfadjointView<Eigen::Lower>() * D.transpose());
  shape = 0.5 * (shape + shape.transpose());
  return mvt_log_density(y, D * prior.mu, shape, 2.0 * prior.a);
}

}  // namespace msborrow::blm
