#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "msborrow/data.hpp"
#include "msborrow/mem.hpp"
#include "msborrow/model.hpp"
#include "msborrow/numeric.hpp"
#include "msborrow/parallel.hpp"
#include "msborrow/rng.hpp"

namespace msborrow::pate {

// What to contrast. The treatment contrast is always a = 1 versus a = 0;
// fix-compliant additionally sets c = 1 in both counterfactual arms, the
// enforced-compliance estimand.
enum class ComplianceHandling { None, FixCompliant };

struct EstimandSpec {
  ComplianceHandling compliance = ComplianceHandling::None;
};

struct Summary {
  double mean = 0.0;
  double sd = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

struct PatePosterior {
  std::vector<double> draws;        // outcome units
  std::vector<int> mem_allocation;  // draws per exchangeability pattern
};

// Flat Dirichlet weights over the observed primary rows; one fresh draw per
// posterior draw integrates the conditional effects over the empirical
// covariate distribution.
inline std::vector<double> bayesian_bootstrap_weights(std::size_t n, Rng& rng) {
  return rng.dirichlet_flat(n);
}

// Deterministic largest-remainder split of B draws across patterns:
// floor(w_q B) each, leftovers to the largest fractional parts (ties to the
// lower pattern index). Guarantees sum B and |alloc_q - w_q B| <= 1.
inline std::vector<int> allocate_draws(const Eigen::VectorXd& weights, int B) {
  if (B < 1) throw std::invalid_argument("pate: need at least one draw");
  const auto n = static_cast<std::size_t>(weights.size());
  std::vector<int> alloc(n);
  std::vector<std::pair<double, std::size_t>> fracs(n);
  int assigned = 0;
  for (std::size_t q = 0; q < n; ++q) {
    const double target = weights[static_cast<Eigen::Index>(q)] * B;
    alloc[q] = static_cast<int>(std::floor(target));
    assigned += alloc[q];
    fracs[q] = {target - std::floor(target), q};
  }
  std::sort(fracs.begin(), fracs.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (int k = 0; k < B - assigned; ++k) alloc[fracs[static_cast<std::size_t>(k)].second] += 1;
  return alloc;
}

// Conditional treatment effect per primary row for one linear-model
// coefficient draw: the contrast of the two counterfactual design rows.
inline Eigen::VectorXd blm_cate(const Eigen::VectorXd& beta, const DesignMatrix& treated,
                                const DesignMatrix& control) {
  if (treated.cols() != beta.size() || control.cols() != beta.size())
    throw std::invalid_argument("pate: coefficient length does not match the design");
  return (treated.values - control.values) * beta;
}

// Same contrast for one tree-ensemble draw; the standardization shift cancels
// and the scale is restored by the transform.
inline Eigen::VectorXd bart_cate(const bart::TreeEnsembleDraw& draw, const Eigen::MatrixXd& treated,
                                 const Eigen::MatrixXd& control,
                                 const OutcomeTransform& transform) {
  return bart::predict(draw, treated, transform) - bart::predict(draw, control, transform);
}

namespace detail {

inline std::string pattern_label(const mem::ExchPattern& pattern) {
  std::string out = "(";
  for (std::size_t h = 0; h < pattern.h(); ++h) {
    if (h) out += ",";
    out += pattern.z[h] ? "1" : "0";
  }
  return out + ")";
}

}  // namespace detail

// Posterior distribution of the population average treatment effect in the
// primary source. Draws are allocated across exchangeability patterns by the
// posterior weights; each pattern's model is fit on its pooled block, the
// conditional effects are evaluated on the primary rows only, and every draw
// is integrated over the covariates with fresh Bayesian-bootstrap weights.
inline PatePosterior pate_posterior(const Dataset& ds, const ModelSpec& model,
                                    const mem::MemSpace& mem_space, const EstimandSpec& spec,
                                    int B, std::uint64_t seed, int threads = 1) {
  if (B < 1) throw std::invalid_argument("pate: need at least one draw");
  if (spec.compliance == ComplianceHandling::FixCompliant && !ds.has_compliance)
    throw std::invalid_argument("pate: fix-compliant estimand requires compliance data");
  if (mem_space.patterns.empty()) throw std::invalid_argument("pate: empty exchangeability space");

  const std::vector<int> alloc = allocate_draws(mem_space.weights, B);
  const std::vector<std::size_t> primary = ds.primary_rows();

  Counterfactual treated{1, {}};
  Counterfactual control{0, {}};
  if (spec.compliance == ComplianceHandling::FixCompliant) {
    treated.c = 1;
    control.c = 1;
  }

  // counterfactual rows are identical for every pattern; build them once
  DesignMatrix d_treated, d_control;
  if (model.kind == ModelKind::Blm) {
    d_treated = build_design(ds, primary, model.formula, treated);
    d_control = build_design(ds, primary, model.formula, control);
  } else {
    const Formula predictors = model.bart_predictor_formula(ds);
    d_treated = build_design(ds, primary, predictors, treated);
    d_control = build_design(ds, primary, predictors, control);
  }

  const Rng base(seed);
  std::vector<std::vector<double>> draws_by_pattern(mem_space.patterns.size());

  parallel_for(mem_space.patterns.size(), threads, [&](std::size_t q) {
    if (alloc[q] == 0) return;
    const mem::ExchPattern& pattern = mem_space.patterns[q];
    try {
      const mem::PooledBlocks blocks = mem::pool(ds, pattern);
      const Eigen::VectorXd y = outcomes(ds, blocks.pooled);
      Rng rng = base.derive(q);
      std::vector<double>& out = draws_by_pattern[q];
      out.reserve(static_cast<std::size_t>(alloc[q]));

      if (model.kind == ModelKind::Blm) {
        const DesignMatrix dm = build_design(ds, blocks.pooled, model.formula);
        const auto prior = model.blm_prior_for(ds, dm, y);
        const auto post = blm::posterior(dm.values, y, prior);
        const auto coef = blm::sample_coefficients(post, alloc[q], rng);
        for (const auto& draw : coef) {
          const Eigen::VectorXd cate = blm_cate(draw.beta, d_treated, d_control);
          const auto w = bayesian_bootstrap_weights(primary.size(), rng);
          double delta = 0.0;
          for (std::size_t i = 0; i < w.size(); ++i)
            delta += w[i] * cate[static_cast<Eigen::Index>(i)];
          out.push_back(delta);
        }
      } else {
        const DesignMatrix dm = build_design(ds, blocks.pooled, model.bart_predictor_formula(ds));
        auto [y_std, transform] = standardize_outcome(y);
        bart::BartConfig cfg = model.bart_config_for(dm.values, y_std);
        cfg.n_keep = alloc[q];
        const auto ensemble = bart::fit_mcmc(dm.values, y_std, cfg, rng);
        for (const auto& draw : ensemble) {
          const Eigen::VectorXd cate =
              bart_cate(draw, d_treated.values, d_control.values, transform);
          const auto w = bayesian_bootstrap_weights(primary.size(), rng);
          double delta = 0.0;
          for (std::size_t i = 0; i < w.size(); ++i)
            delta += w[i] * cate[static_cast<Eigen::Index>(i)];
          out.push_back(delta);
        }
      }
    } catch (const std::exception& e) {
      throw std::runtime_error("pate: pattern " + detail::pattern_label(pattern) + " with " +
                               std::to_string(alloc[q]) + " draws: " + e.what());
    }
  });

  PatePosterior post;
  post.mem_allocation = alloc;
  post.draws.reserve(static_cast<std::size_t>(B));
  for (const auto& block : draws_by_pattern)
    post.draws.insert(post.draws.end(), block.begin(), block.end());
  return post;
}

inline Summary summarize(const PatePosterior& post, double interval_mass = 0.95) {
  if (post.draws.empty()) throw std::invalid_argument("pate: no draws to summarize");
  if (post.draws.size() < 2)
    throw std::invalid_argument("pate: standard deviation needs at least 2 draws");
  if (!(interval_mass > 0.0) || !(interval_mass < 1.0))
    throw std::invalid_argument("pate: interval mass must lie in (0, 1)");
  Summary s;
  s.mean = mean(post.draws);
  s.sd = sample_sd(post.draws);
  const double tail = (1.0 - interval_mass) / 2.0;
  s.lower = quantile(post.draws, tail);
  s.upper = quantile(post.draws, 1.0 - tail);
  return s;
}

}  // namespace msborrow::pate
