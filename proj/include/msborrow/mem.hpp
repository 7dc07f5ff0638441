#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "msborrow/data.hpp"
#include "msborrow/model.hpp"
#include "msborrow/parallel.hpp"
#include "msborrow/rng.hpp"

namespace msborrow::mem {

// One exchangeability pattern: z[h] = 1 means supplemental source h shares
// the primary source's model parameters and is pooled with it.
struct ExchPattern {
  std::vector<std::uint8_t> z;

  std::size_t h() const { return z.size(); }
  std::size_t n_borrowed() const {
    std::size_t k = 0;
    for (auto v : z) k += v;
    return k;
  }
};

// All 2^H patterns in a fixed order: pattern q sets z[h] = 1 - bit h of q, so
// q = 0 borrows from every source and q = 2^H - 1 from none. This matches the
// usual weight-table layout (borrow-all first) and is stable across runs.
inline std::vector<ExchPattern> enumerate_patterns(std::size_t H) {
  if (H > 20)
    throw std::invalid_argument("mem: H = " + std::to_string(H) +
                                " exceeds the 2^20-pattern desk-scale limit");
  const std::size_t count = std::size_t{1} << H;
  std::vector<ExchPattern> patterns(count);
  for (std::size_t q = 0; q < count; ++q) {
    patterns[q].z.resize(H);
    for (std::size_t h = 0; h < H; ++h) patterns[q].z[h] = ((q >> h) & 1) ? 0 : 1;
  }
  return patterns;
}

enum class ModelPriorKind { FlatHalf, PowerR, InverseR, PowerHalfR };

inline std::string to_string(ModelPriorKind k) {
  switch (k) {
    case ModelPriorKind::FlatHalf: return "half";
    case ModelPriorKind::PowerR: return "power-r";
    case ModelPriorKind::InverseR: return "inverse-r";
    case ModelPriorKind::PowerHalfR: return "power-half-r";
  }
  return "?";
}

// Prior on exchangeability patterns, driven by a single per-source
// probability p. Sources are independent a priori, so a pattern with k of H
// sources exchangeable has probability p^k (1-p)^(H-k).
struct ModelPrior {
  ModelPriorKind kind = ModelPriorKind::FlatHalf;
  int r = 1;  // predictor count for the r-dependent families

  double per_source_prob() const {
    if (r < 1) throw std::invalid_argument("mem: model prior needs r >= 1");
    switch (kind) {
      case ModelPriorKind::FlatHalf: return 0.5;
      case ModelPriorKind::PowerR: return std::pow(0.5, static_cast<double>(r));
      case ModelPriorKind::InverseR: return 1.0 / static_cast<double>(r);
      case ModelPriorKind::PowerHalfR: return std::pow(0.5, static_cast<double>(r) / 2.0);
    }
    return 0.5;
  }
};

inline double pattern_prior_prob(const ExchPattern& pattern, const ModelPrior& prior) {
  const double p = prior.per_source_prob();
  if (!(p > 0.0) || p > 1.0)
    throw std::invalid_argument("mem: per-source prior probability outside (0, 1]");
  double out = 1.0;
  for (auto zh : pattern.z) out *= zh ? p : (1.0 - p);
  return out;
}

inline Eigen::VectorXd pattern_prior_probs(const std::vector<ExchPattern>& patterns,
                                           const ModelPrior& prior) {
  Eigen::VectorXd probs(static_cast<Eigen::Index>(patterns.size()));
  for (std::size_t q = 0; q < patterns.size(); ++q)
    probs[static_cast<Eigen::Index>(q)] = pattern_prior_prob(patterns[q], prior);
  return probs;
}

// Row blocks implied by a pattern: one pooled block holding the primary
// source plus every exchangeable source, and a singleton block per
// non-exchangeable source. Blocks partition the dataset.
struct PooledBlocks {
  std::vector<std::size_t> pooled;
  std::vector<std::pair<std::size_t, std::vector<std::size_t>>> singletons;  // (source idx, rows)
};

inline PooledBlocks pool(const Dataset& ds, const ExchPattern& pattern) {
  if (pattern.h() != ds.num_supplemental())
    throw std::invalid_argument("mem: pattern length does not match the number of sources");
  PooledBlocks blocks;
  blocks.pooled = ds.primary_rows();
  for (std::size_t h = 0; h < pattern.h(); ++h) {
    auto rows = ds.rows_for_source(ds.supplemental_labels[h]);
    if (pattern.z[h]) {
      blocks.pooled.insert(blocks.pooled.end(), rows.begin(), rows.end());
    } else {
      blocks.singletons.emplace_back(h, std::move(rows));
    }
  }
  std::sort(blocks.pooled.begin(), blocks.pooled.end());
  return blocks;
}

// ---------------------------------------------------------------------------
// Block marginal likelihoods

// Log marginal likelihood of one data block under the selected model, with
// hyperparameters rebuilt from that block's own data. The tree-model value is
// computed on the block-standardized scale and mapped back to outcome units
// through the change-of-variables term -n log(scale); block marginals then
// combine coherently across patterns even though every block standardizes
// its own outcome.
inline double block_log_marginal(const Dataset& ds, const std::vector<std::size_t>& rows,
                                 const ModelSpec& model, Rng rng, int threads = 1) {
  const Eigen::VectorXd y = outcomes(ds, rows);
  if (model.kind == ModelKind::Blm) {
    const DesignMatrix dm = build_design(ds, rows, model.formula);
    const auto prior = model.blm_prior_for(ds, dm, y);
    return blm::marginal_log_likelihood(dm.values, y, prior);
  }
  const DesignMatrix dm = build_design(ds, rows, model.bart_predictor_formula(ds));
  auto [y_std, transform] = standardize_outcome(y);
  const bart::BartConfig cfg = model.bart_config_for(dm.values, y_std);
  const double log_ml_std = bart::marginal_log_likelihood_prior_mc(
      dm.values, y_std, cfg, model.bart.prior_draws, rng, threads);
  return log_ml_std - static_cast<double>(y.size()) * std::log(transform.scale);
}

// Sum of block marginals for one pattern: pooled block plus each singleton.
inline double pattern_log_marginal(const Dataset& ds, const ExchPattern& pattern,
                                   const ModelSpec& model, std::uint64_t seed, int threads = 1) {
  const PooledBlocks blocks = pool(ds, pattern);
  const Rng base(seed);
  std::uint64_t pooled_stream = 0;
  for (std::size_t h = 0; h < pattern.h(); ++h)
    if (pattern.z[h]) pooled_stream |= (std::uint64_t{1} << h);

  double total = 0.0;
  try {
    total += block_log_marginal(ds, blocks.pooled, model, base.derive(pooled_stream), threads);
  } catch (const std::exception& e) {
    throw std::runtime_error("mem: pooled block (primary plus exchangeable sources): " +
                             std::string(e.what()));
  }
  for (const auto& [h, rows] : blocks.singletons) {
    try {
      total += block_log_marginal(ds, rows, model,
                                  base.derive((std::uint64_t{1} << pattern.h()) + h), threads);
    } catch (const std::exception& e) {
      throw std::runtime_error("mem: singleton block for source '" + ds.supplemental_labels[h] +
                               "': " + std::string(e.what()));
    }
  }
  return total;
}

// Posterior pattern weights: omega_q proportional to exp(log_marginal_q)
// times the prior, normalized in log space.
inline Eigen::VectorXd posterior_weights(const Eigen::VectorXd& log_marginals,
                                         const Eigen::VectorXd& prior_probs) {
  if (log_marginals.size() != prior_probs.size() || log_marginals.size() == 0)
    throw std::invalid_argument("mem: weight inputs are empty or mismatched");
  const Eigen::Index n = log_marginals.size();
  Eigen::VectorXd logs(n);
  double best = -std::numeric_limits<double>::infinity();
  for (Eigen::Index q = 0; q < n; ++q) {
    if (std::isnan(log_marginals[q]))
      throw std::invalid_argument("mem: NaN log marginal likelihood");
    if (!(prior_probs[q] >= 0.0))
      throw std::invalid_argument("mem: negative prior probability");
    logs[q] = prior_probs[q] > 0.0 ? log_marginals[q] + std::log(prior_probs[q])
                                   : -std::numeric_limits<double>::infinity();
    best = std::max(best, logs[q]);
  }
  if (!std::isfinite(best))
    throw std::invalid_argument("mem: every pattern has zero posterior mass");
  Eigen::VectorXd w(n);
  double total = 0.0;
  for (Eigen::Index q = 0; q < n; ++q) {
    w[q] = std::exp(logs[q] - best);
    total += w[q];
  }
  return w / total;
}

// ---------------------------------------------------------------------------
// Full exchangeability-model space

struct MemSpace {
  std::vector<ExchPattern> patterns;
  Eigen::VectorXd prior_probs;
  Eigen::VectorXd log_marginals;
  Eigen::VectorXd weights;

  // Weighted fraction of sources borrowed: for a single supplemental source
  // this is the posterior weight of the borrow-everything pattern.
  double borrow_weight() const {
    if (patterns.empty() || patterns[0].h() == 0) return 0.0;
    double total = 0.0;
    for (std::size_t q = 0; q < patterns.size(); ++q)
      total += weights[static_cast<Eigen::Index>(q)] *
               static_cast<double>(patterns[q].n_borrowed()) / static_cast<double>(patterns[0].h());
    return total;
  }
};

// Point-mass space on the no-borrowing pattern; the primary source is fit
// alone and supplemental sources are ignored downstream.
inline MemSpace no_borrow_space(const Dataset& ds) {
  MemSpace space;
  const std::size_t H = ds.num_supplemental();
  space.patterns = enumerate_patterns(H);
  const auto count = static_cast<Eigen::Index>(space.patterns.size());
  space.prior_probs = Eigen::VectorXd::Zero(count);
  space.log_marginals = Eigen::VectorXd::Zero(count);
  space.weights = Eigen::VectorXd::Zero(count);
  space.prior_probs[count - 1] = 1.0;  // all-zeros pattern is last
  space.weights[count - 1] = 1.0;
  return space;
}

// Enumerates patterns, computes every distinct block marginal once (patterns
// share singleton blocks), and normalizes the posterior weights. Distinct
// blocks get independent derived substreams keyed by their source subset, so
// the result is one value regardless of evaluation order or thread count.
inline MemSpace compute_mem_space(const Dataset& ds, const ModelSpec& model,
                                  const ModelPrior& prior, std::uint64_t seed, int threads = 1) {
  MemSpace space;
  const std::size_t H = ds.num_supplemental();
  space.patterns = enumerate_patterns(H);
  space.prior_probs = pattern_prior_probs(space.patterns, prior);

  const Rng base(seed);
  const std::size_t n_pooled = std::size_t{1} << H;

  // distinct pooled blocks: one per borrow mask; singleton blocks: one per source
  std::vector<double> pooled_ml(n_pooled, 0.0);
  std::vector<double> singleton_ml(H, 0.0);

  parallel_for(n_pooled + H, threads, [&](std::size_t task) {
    if (task < n_pooled) {
      const std::uint64_t mask = task;
      std::vector<std::size_t> rows = ds.primary_rows();
      std::string members = ds.primary_label;
      for (std::size_t h = 0; h < H; ++h)
        if ((mask >> h) & 1) {
          auto extra = ds.rows_for_source(ds.supplemental_labels[h]);
          rows.insert(rows.end(), extra.begin(), extra.end());
          members += "+" + ds.supplemental_labels[h];
        }
      std::sort(rows.begin(), rows.end());
      try {
        pooled_ml[task] = block_log_marginal(ds, rows, model, base.derive(mask));
      } catch (const std::exception& e) {
        throw std::runtime_error("mem: pooled block {" + members + "}: " + e.what());
      }
    } else {
      const std::size_t h = task - n_pooled;
      const auto rows = ds.rows_for_source(ds.supplemental_labels[h]);
      try {
        singleton_ml[h] =
            block_log_marginal(ds, rows, model, base.derive((std::uint64_t{1} << H) + h));
      } catch (const std::exception& e) {
        throw std::runtime_error("mem: singleton block {" + ds.supplemental_labels[h] +
                                 "}: " + e.what());
      }
    }
  });

  space.log_marginals.resize(static_cast<Eigen::Index>(space.patterns.size()));
  for (std::size_t q = 0; q < space.patterns.size(); ++q) {
    const ExchPattern& pattern = space.patterns[q];
    std::uint64_t mask = 0;
    double total = 0.0;
    for (std::size_t h = 0; h < H; ++h) {
      if (pattern.z[h])
        mask |= (std::uint64_t{1} << h);
      else
        total += singleton_ml[h];
    }
    total += pooled_ml[mask];
    space.log_marginals[static_cast<Eigen::Index>(q)] = total;
  }
  space.weights = posterior_weights(space.log_marginals, space.prior_probs);
  return space;
}

}  // namespace msborrow::mem
