#pragma once

#include <Eigen/Core>
#include <stdexcept>
#include <string>
#include <vector>

#include "msborrow/bart.hpp"
#include "msborrow/blm.hpp"
#include "msborrow/data.hpp"

namespace msborrow {

enum class ModelKind { Blm, Bart };

inline std::string to_string(ModelKind k) { return k == ModelKind::Blm ? "blm" : "bart"; }

// Where the linear model's empirical hyperparameters come from when a block
// other than the primary source is fit: the block's own data (default) or
// frozen from the primary source.
enum class BlmHyperparamSource { Block, Primary };

struct BartOptions {
  int m = 200;
  int n_burn = 100;
  int prior_draws = 100;
  bart::NodePriorKind node_prior = bart::NodePriorKind::Modified;
  double alpha = 0.95;
  double beta_depth = 2.0;
  int cutpoint_grid = 100;
  bool enable_change_moves = false;
};

// Which outcome model to fit and how. The BLM uses the declared formula
// (intercept, treatment, optional compliance, covariates, interactions); the
// tree model uses treatment, optional compliance and every covariate as
// predictors with no interactions or intercept.
struct ModelSpec {
  ModelKind kind = ModelKind::Blm;
  Formula formula;
  BlmHyperparamSource blm_hyperparams = BlmHyperparamSource::Block;
  bool use_compliance = false;  // include compliance among tree-model predictors
  BartOptions bart;

  // The prior for a linear-model block under the configured hyperparameter
  // source: rebuilt from the block itself, or from the primary rows.
  blm::NigHyperparams blm_prior_for(const Dataset& ds, const DesignMatrix& block_design,
                                    const Eigen::VectorXd& block_y) const {
    if (blm_hyperparams == BlmHyperparamSource::Block)
      return blm::default_hyperparams(block_design.values, block_y, block_design.names);
    const auto primary = ds.primary_rows();
    const DesignMatrix dm = build_design(ds, primary, formula);
    return blm::default_hyperparams(dm.values, outcomes(ds, primary), dm.names);
  }

  Formula bart_predictor_formula(const Dataset& ds) const {
    return Formula::predictors(ds, use_compliance);
  }

  // Predictor count r driving the exchangeability prior: design columns
  // including the intercept for the linear model, predictor variables for
  // the tree model.
  int prior_predictor_count(const Dataset& ds) const {
    if (kind == ModelKind::Blm) {
      return static_cast<int>((formula.intercept ? 1 : 0) + 1 + (formula.compliance ? 1 : 0) +
                              formula.covariates.size() + formula.treatment_interactions.size() +
                              formula.compliance_interactions.size());
    }
    return static_cast<int>(1 + (use_compliance ? 1 : 0) + ds.num_covariates());
  }

  // Per-block tree configuration: data-driven defaults recomputed from the
  // block being fit, then explicit overrides applied on top.
  bart::BartConfig bart_config_for(const Eigen::MatrixXd& X, const Eigen::VectorXd& y_std) const {
    bart::BartConfig cfg = bart::default_config(X, y_std, bart.m);
    cfg.node_prior = bart.node_prior;
    cfg.n_burn = bart.n_burn;
    cfg.alpha = bart.alpha;
    cfg.beta_depth = bart.beta_depth;
    cfg.cutpoint_grid = bart.cutpoint_grid;
    cfg.enable_change_moves = bart.enable_change_moves;
    return cfg;
  }
};

}  // namespace msborrow
