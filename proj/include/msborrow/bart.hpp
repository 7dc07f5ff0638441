#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "msborrow/data.hpp"
#include "msborrow/mvt.hpp"
#include "msborrow/numeric.hpp"
#include "msborrow/ols.hpp"
#include "msborrow/parallel.hpp"
#include "msborrow/rng.hpp"

namespace msborrow::bart {

// Terminal-node value prior. Modified: values ~ N(0, sigma^2/gamma), which
// lets sigma^2 factor out of the ensemble covariance so the marginal
// likelihood reduces to a t density per tree draw. Default: values ~ N(0, tau^2)
// with tau^2 fixed; usable for fitting but not for marginal likelihoods.
enum class NodePriorKind { Default, Modified };

struct BartConfig {
  int m = 200;
  NodePriorKind node_prior = NodePriorKind::Modified;
  double gamma = 1.0;  // modified prior precision multiplier
  double tau2 = 0.0;   // default prior variance
  double nu = 3.0;
  double lambda = 1.0;
  double alpha = 0.95;      // split probability at depth 0
  double beta_depth = 2.0;  // split probability depth decay
  int cutpoint_grid = 100;
  int n_burn = 100;
  int n_keep = 100;
  bool enable_change_moves = false;
  double sigma2_init = 1.0;
  bool check_partition = false;  // verify the leaf partition after every sweep

  void validate() const {
    if (m < 1) throw std::invalid_argument("bart: m must be >= 1");
    if (node_prior == NodePriorKind::Modified && !(gamma > 0.0))
      throw std::invalid_argument("bart: modified prior requires gamma > 0");
    if (node_prior == NodePriorKind::Default && !(tau2 > 0.0))
      throw std::invalid_argument("bart: default prior requires tau2 > 0");
    if (!(nu > 0.0) || !(lambda > 0.0))
      throw std::invalid_argument("bart: nu and lambda must be positive");
    if (!(alpha >= 0.0) || !(alpha < 1.0))
      throw std::invalid_argument("bart: alpha must lie in [0, 1)");
    if (!(beta_depth >= 0.0)) throw std::invalid_argument("bart: beta_depth must be >= 0");
    if (cutpoint_grid < 1) throw std::invalid_argument("bart: cutpoint grid size must be >= 1");
    if (n_burn < 0 || n_keep < 0) throw std::invalid_argument("bart: negative draw counts");
    if (!(sigma2_init > 0.0)) throw std::invalid_argument("bart: sigma2_init must be positive");
  }
};

// Defaults for a standardized outcome: nu = 3, lambda placing 90% prior mass
// on sigma^2 below the least-squares estimate, and tau = 0.5/(k sqrt(m)) with
// k = 2 for the fixed-variance prior variant. The modified prior sets
// gamma = 16 m s2hat, so the leaf variance sigma^2/gamma equals the
// fixed-variance default tau^2 = 1/(16 m) when sigma^2 is at its estimate;
// s2hat comes from least squares of y on the predictors plus an intercept.
inline BartConfig default_config(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, int m = 200) {
  BartConfig cfg;
  cfg.m = m;
  Eigen::MatrixXd D(X.rows(), X.cols() + 1);
  D.col(0).setOnes();
  D.rightCols(X.cols()) = X;
  const OlsFit ls = least_squares(D, y);
  if (!(ls.sigma2_hat > 0.0))
    throw std::invalid_argument("bart: degenerate fit, least-squares residual variance is zero");
  const boost::math::chi_squared chi2(cfg.nu);
  cfg.lambda = ls.sigma2_hat * boost::math::quantile(chi2, 0.1) / cfg.nu;
  cfg.gamma = 16.0 * static_cast<double>(cfg.m) * ls.sigma2_hat;
  const double tau = 0.5 / (2.0 * std::sqrt(static_cast<double>(cfg.m)));
  cfg.tau2 = tau * tau;
  cfg.sigma2_init = ls.sigma2_hat;
  return cfg;
}

// ---------------------------------------------------------------------------
// Trees

struct TreeNode {
  int left = -1;
  int right = -1;
  int var = -1;
  double cut = 0.0;
  double value = 0.0;
  int depth = 0;

  bool is_leaf() const { return left < 0; }
};

// Binary decision tree with rules x[var] <= cut. Node 0 is the root; pruned
// slots are recycled through a free list so node indices stay stable.
struct Tree {
  std::vector<TreeNode> nodes;
  std::vector<int> free_slots;

  Tree() : nodes(1) {}

  int assign(const Eigen::MatrixXd& X, Eigen::Index row) const {
    int node = 0;
    while (!nodes[node].is_leaf())
      node = (X(row, nodes[node].var) <= nodes[node].cut) ? nodes[node].left : nodes[node].right;
    return node;
  }

  double predict_row(const Eigen::MatrixXd& X, Eigen::Index row) const {
    return nodes[assign(X, row)].value;
  }

  template <typename F>
  void for_each_leaf(F&& fn) const {
    std::vector<int> stack{0};
    while (!stack.empty()) {
      const int id = stack.back();
      stack.pop_back();
      if (nodes[id].is_leaf()) {
        fn(id);
      } else {
        stack.push_back(nodes[id].left);
        stack.push_back(nodes[id].right);
      }
    }
  }

  int leaf_count() const {
    int count = 0;
    for_each_leaf([&](int) { ++count; });
    return count;
  }

  // Interior nodes whose children are both leaves (prunable).
  std::vector<int> nog_nodes() const {
    std::vector<int> out;
    std::vector<int> stack{0};
    while (!stack.empty()) {
      const int id = stack.back();
      stack.pop_back();
      const TreeNode& nd = nodes[id];
      if (nd.is_leaf()) continue;
      if (nodes[nd.left].is_leaf() && nodes[nd.right].is_leaf()) out.push_back(id);
      stack.push_back(nd.left);
      stack.push_back(nd.right);
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  int allocate_node() {
    if (!free_slots.empty()) {
      const int id = free_slots.back();
      free_slots.pop_back();
      nodes[id] = TreeNode{};
      return id;
    }
    nodes.emplace_back();
    return static_cast<int>(nodes.size()) - 1;
  }

  void grow(int leaf, int var, double cut) {
    const int l = allocate_node();
    const int r = allocate_node();
    nodes[l].depth = nodes[leaf].depth + 1;
    nodes[r].depth = nodes[leaf].depth + 1;
    nodes[leaf].left = l;
    nodes[leaf].right = r;
    nodes[leaf].var = var;
    nodes[leaf].cut = cut;
  }

  void prune(int nog) {
    free_slots.push_back(nodes[nog].left);
    free_slots.push_back(nodes[nog].right);
    nodes[nog].left = -1;
    nodes[nog].right = -1;
    nodes[nog].var = -1;
    nodes[nog].value = 0.0;
  }
};

// One posterior draw: m trees plus sigma^2, both on the standardized scale.
struct TreeEnsembleDraw {
  std::vector<Tree> trees;
  double sigma2 = 0.0;
  Eigen::Index n_predictors = 0;

  double predict_row_std(const Eigen::MatrixXd& X, Eigen::Index row) const {
    double total = 0.0;
    for (const Tree& t : trees) total += t.predict_row(X, row);
    return total;
  }
};

// Per-variable split candidates: up to grid_size equally spaced quantiles of
// the observed values, or every distinct value but the maximum when there are
// fewer. Constant columns get an empty grid and are never proposed.
inline std::vector<std::vector<double>> cutpoint_grids(const Eigen::MatrixXd& X, int grid_size) {
  std::vector<std::vector<double>> grids(static_cast<std::size_t>(X.cols()));
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    std::vector<double> vals(X.rows());
    for (Eigen::Index i = 0; i < X.rows(); ++i) vals[static_cast<std::size_t>(i)] = X(i, j);
    std::sort(vals.begin(), vals.end());
    vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
    if (vals.size() < 2) continue;
    auto& grid = grids[static_cast<std::size_t>(j)];
    const std::size_t n_unique = vals.size();
    if (n_unique - 1 <= static_cast<std::size_t>(grid_size)) {
      grid.assign(vals.begin(), vals.end() - 1);  // a cut at the maximum is never usable
    } else {
      grid.reserve(static_cast<std::size_t>(grid_size));
      for (int k = 1; k <= grid_size; ++k) {
        const double p = static_cast<double>(k) / (grid_size + 1.0);
        const auto idx = static_cast<std::size_t>(p * static_cast<double>(n_unique - 1));
        grid.push_back(vals[idx]);
      }
      grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    }
  }
  return grids;
}

namespace detail {

// Valid cuts for rows spanning [lo, hi] are the grid values in [lo, hi): both
// children stay nonempty. Returns {first index, count}.
inline std::pair<int, int> valid_cut_range(const std::vector<double>& grid, double lo, double hi) {
  const auto b = std::lower_bound(grid.begin(), grid.end(), lo);
  const auto e = std::lower_bound(grid.begin(), grid.end(), hi);
  return {static_cast<int>(b - grid.begin()), static_cast<int>(e - b)};
}

struct EligibleVar {
  int var = 0;
  int first_cut = 0;
  int n_cuts = 0;
};

inline std::vector<EligibleVar> eligible_split_vars(const Eigen::MatrixXd& X,
                                                    const std::vector<std::vector<double>>& grids,
                                                    const std::vector<int>& rows) {
  std::vector<EligibleVar> out;
  for (std::size_t j = 0; j < grids.size(); ++j) {
    if (grids[j].empty()) continue;
    double lo = X(rows[0], static_cast<Eigen::Index>(j));
    double hi = lo;
    for (int i : rows) {
      const double v = X(i, static_cast<Eigen::Index>(j));
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    const auto [first, count] = valid_cut_range(grids[j], lo, hi);
    if (count > 0) out.push_back({static_cast<int>(j), first, count});
  }
  return out;
}

// Probability that a node at the given depth splits, conditional on having at
// least one usable rule; a node with none is terminal with probability one.
// The same convention drives prior sampling and the acceptance ratios below.
inline double split_probability(const BartConfig& cfg, int depth) {
  return cfg.alpha * std::pow(1.0 + static_cast<double>(depth), -cfg.beta_depth);
}

struct LeafSuffStats {
  double n = 0.0;
  double sum = 0.0;
  double sumsq = 0.0;
};

// Log of the leaf-level likelihood with the node value integrated out under
// its prior, given sigma^2. Modified prior N(0, sigma^2/gamma):
//   (2 pi sigma^2)^{-n/2} sqrt(gamma/(n+gamma))
//       exp(-[sumsq - sum^2/(n+gamma)]/(2 sigma^2)).
// Default prior N(0, tau^2):
//   (2 pi sigma^2)^{-n/2} sqrt(sigma^2/(sigma^2 + n tau^2))
//       exp(-sumsq/(2 sigma^2) + tau^2 sum^2/(2 sigma^2 (sigma^2 + n tau^2))).
inline double leaf_log_marginal(const BartConfig& cfg, double sigma2, const LeafSuffStats& s) {
  const double base = -0.5 * s.n * std::log(2.0 * M_PI * sigma2);
  if (cfg.node_prior == NodePriorKind::Modified) {
    const double g = cfg.gamma;
    return base + 0.5 * std::log(g / (s.n + g)) -
           (s.sumsq - s.sum * s.sum / (s.n + g)) / (2.0 * sigma2);
  }
  const double t2 = cfg.tau2;
  return base + 0.5 * std::log(sigma2 / (sigma2 + s.n * t2)) - s.sumsq / (2.0 * sigma2) +
         t2 * s.sum * s.sum / (2.0 * sigma2 * (sigma2 + s.n * t2));
}

inline LeafSuffStats stats_for_rows(const Eigen::VectorXd& resid, const std::vector<int>& rows) {
  LeafSuffStats s;
  s.n = static_cast<double>(rows.size());
  for (int i : rows) {
    s.sum += resid[i];
    s.sumsq += resid[i] * resid[i];
  }
  return s;
}

// Rows currently assigned to each node, indexed by node id. Scanning rows in
// order keeps every downstream choice deterministic.
inline std::vector<std::vector<int>> rows_by_node(const Tree& tree,
                                                  const std::vector<int>& leaf_of_row) {
  std::vector<std::vector<int>> out(tree.nodes.size());
  for (std::size_t i = 0; i < leaf_of_row.size(); ++i)
    out[static_cast<std::size_t>(leaf_of_row[i])].push_back(static_cast<int>(i));
  return out;
}

inline std::vector<int> growable_leaves(const Tree& tree, const Eigen::MatrixXd& X,
                                        const std::vector<std::vector<double>>& grids,
                                        const std::vector<std::vector<int>>& rows) {
  std::vector<int> out;
  tree.for_each_leaf([&](int id) {
    const auto& r = rows[static_cast<std::size_t>(id)];
    if (!r.empty() && !eligible_split_vars(X, grids, r).empty()) out.push_back(id);
  });
  std::sort(out.begin(), out.end());
  return out;
}

struct MoveProbs {
  double grow = 0.0;
  double prune = 0.0;
  double change = 0.0;
};

// Proposal mixture: grow/prune split evenly when both are legal, grow alone
// at a stump, prune alone when nothing can grow. Change moves, when enabled,
// take a fixed 0.2 share whenever a prunable node exists.
inline MoveProbs move_probs(const BartConfig& cfg, bool can_grow, bool can_prune) {
  MoveProbs p;
  if (!can_grow && !can_prune) return p;
  if (cfg.enable_change_moves && can_prune) {
    p.change = 0.2;
    if (can_grow) {
      p.grow = 0.4;
      p.prune = 0.4;
    } else {
      p.prune = 0.8;
    }
    return p;
  }
  if (can_grow && can_prune) {
    p.grow = 0.5;
    p.prune = 0.5;
  } else if (can_grow) {
    p.grow = 1.0;
  } else {
    p.prune = 1.0;
  }
  return p;
}

struct GrowMove {
  int leaf = 0;
  int var = 0;
  double cut = 0.0;
  std::vector<int> left_rows;
  std::vector<int> right_rows;
};

// Log MH acceptance for growing `leaf` with rule (var, cut). Computes the
// full product of likelihood, prior and proposal ratios; the rule-selection
// factor appears in both prior and proposal and cancels exactly, so it is
// omitted from both.
inline double grow_log_acceptance(const BartConfig& cfg, double sigma2, const Tree& tree,
                                  const Eigen::MatrixXd& X,
                                  const std::vector<std::vector<double>>& grids,
                                  const std::vector<std::vector<int>>& rows,
                                  const Eigen::VectorXd& resid, const GrowMove& move) {
  const auto& parent_rows = rows[static_cast<std::size_t>(move.leaf)];
  const LeafSuffStats parent = stats_for_rows(resid, parent_rows);
  const LeafSuffStats left = stats_for_rows(resid, move.left_rows);
  const LeafSuffStats right = stats_for_rows(resid, move.right_rows);

  const double log_lik = leaf_log_marginal(cfg, sigma2, left) +
                         leaf_log_marginal(cfg, sigma2, right) -
                         leaf_log_marginal(cfg, sigma2, parent);

  const int depth = tree.nodes[static_cast<std::size_t>(move.leaf)].depth;
  const double p_split = split_probability(cfg, depth);
  const double p_child = split_probability(cfg, depth + 1);
  const bool left_can = !eligible_split_vars(X, grids, move.left_rows).empty();
  const bool right_can = !eligible_split_vars(X, grids, move.right_rows).empty();
  double log_prior = std::log(p_split) - std::log(1.0 - p_split);
  if (left_can) log_prior += std::log(1.0 - p_child);
  if (right_can) log_prior += std::log(1.0 - p_child);

  // forward: pick a growable leaf uniformly; reverse: pick a nog node in the
  // grown tree uniformly.
  const std::vector<int> growable = growable_leaves(tree, X, grids, rows);
  const auto n_growable = static_cast<double>(growable.size());
  const MoveProbs fwd = move_probs(cfg, n_growable > 0, !tree.nog_nodes().empty());

  // state after the grow, computed without mutating the tree
  const auto n_nog_after = [&] {
    int count = 1;  // the grown node itself becomes nog
    for (int nog : tree.nog_nodes())
      if (nog != move.leaf) ++count;
    // a nog node stays nog after growing elsewhere; growing a child of a nog
    // node is impossible since nog children are leaves and `leaf` is one of
    // them only if its parent loses nog status
    const auto parent_of = [&](int id) {
      for (std::size_t k = 0; k < tree.nodes.size(); ++k)
        if (tree.nodes[k].left == id || tree.nodes[k].right == id) return static_cast<int>(k);
      return -1;
    };
    const int par = parent_of(move.leaf);
    if (par >= 0 && tree.nodes[static_cast<std::size_t>(par)].left >= 0) {
      const TreeNode& pn = tree.nodes[static_cast<std::size_t>(par)];
      if (tree.nodes[static_cast<std::size_t>(pn.left)].is_leaf() &&
          tree.nodes[static_cast<std::size_t>(pn.right)].is_leaf())
        --count;  // parent was nog, no longer is
    }
    return count;
  }();

  bool can_grow_after = left_can || right_can;
  if (!can_grow_after) {
    for (int leaf_id : growable)
      if (leaf_id != move.leaf) {
        can_grow_after = true;
        break;
      }
  }
  const MoveProbs rev = move_probs(cfg, can_grow_after, true);

  const double log_proposal = std::log(rev.prune) - std::log(static_cast<double>(n_nog_after)) -
                              (std::log(fwd.grow) - std::log(n_growable));

  return log_lik + log_prior + log_proposal;
}

// Log MH acceptance for pruning the nog node `nog`; exact mirror of the grow
// acceptance for the move that would regrow it.
inline double prune_log_acceptance(const BartConfig& cfg, double sigma2, const Tree& tree,
                                   const Eigen::MatrixXd& X,
                                   const std::vector<std::vector<double>>& grids,
                                   const std::vector<std::vector<int>>& rows,
                                   const Eigen::VectorXd& resid, int nog) {
  const TreeNode& node = tree.nodes[static_cast<std::size_t>(nog)];
  const auto& left_rows = rows[static_cast<std::size_t>(node.left)];
  const auto& right_rows = rows[static_cast<std::size_t>(node.right)];
  std::vector<int> merged;
  merged.reserve(left_rows.size() + right_rows.size());
  std::merge(left_rows.begin(), left_rows.end(), right_rows.begin(), right_rows.end(),
             std::back_inserter(merged));

  const LeafSuffStats parent = stats_for_rows(resid, merged);
  const LeafSuffStats left = stats_for_rows(resid, left_rows);
  const LeafSuffStats right = stats_for_rows(resid, right_rows);
  const double log_lik = leaf_log_marginal(cfg, sigma2, parent) -
                         leaf_log_marginal(cfg, sigma2, left) -
                         leaf_log_marginal(cfg, sigma2, right);

  const double p_split = split_probability(cfg, node.depth);
  const double p_child = split_probability(cfg, node.depth + 1);
  const bool left_can = !eligible_split_vars(X, grids, left_rows).empty();
  const bool right_can = !eligible_split_vars(X, grids, right_rows).empty();
  double log_prior = std::log(1.0 - p_split) - std::log(p_split);
  if (left_can) log_prior -= std::log(1.0 - p_child);
  if (right_can) log_prior -= std::log(1.0 - p_child);

  const auto nogs = tree.nog_nodes();
  const std::vector<int> growable = growable_leaves(tree, X, grids, rows);
  const MoveProbs fwd = move_probs(cfg, !growable.empty(), !nogs.empty());

  // after the prune: the merged leaf is growable by construction; nog count
  // recomputed on the hypothetical tree
  Tree after = tree;
  after.prune(nog);
  const auto n_nog_after = static_cast<double>(after.nog_nodes().size());
  const MoveProbs rev = move_probs(cfg, true, n_nog_after > 0);

  double log_growable_after = 0.0;
  {
    int count = 1;  // the merged leaf
    for (int leaf_id : growable)
      if (leaf_id != node.left && leaf_id != node.right) ++count;
    log_growable_after = std::log(static_cast<double>(count));
  }

  const double log_proposal = std::log(rev.grow) - log_growable_after -
                              (std::log(fwd.prune) - std::log(static_cast<double>(nogs.size())));

  return log_lik + log_prior + log_proposal;
}

struct ChangeMove {
  int nog = 0;
  int var = 0;
  double cut = 0.0;
  std::vector<int> left_rows;
  std::vector<int> right_rows;
};

// Change move on a nog node: keep the structure, redraw the rule. The rule
// prior and the symmetric uniform proposal cancel; what is left is the
// likelihood ratio of the new versus old child partition, adjusted for any
// shift in the overall move mixture.
inline double change_log_acceptance(const BartConfig& cfg, double sigma2, const Tree& tree,
                                    const Eigen::MatrixXd& X,
                                    const std::vector<std::vector<double>>& grids,
                                    const std::vector<std::vector<int>>& rows,
                                    const Eigen::VectorXd& resid, const ChangeMove& move) {
  const TreeNode& node = tree.nodes[static_cast<std::size_t>(move.nog)];
  const LeafSuffStats old_left = stats_for_rows(resid, rows[static_cast<std::size_t>(node.left)]);
  const LeafSuffStats old_right = stats_for_rows(resid, rows[static_cast<std::size_t>(node.right)]);
  const LeafSuffStats new_left = stats_for_rows(resid, move.left_rows);
  const LeafSuffStats new_right = stats_for_rows(resid, move.right_rows);

  const double log_lik =
      leaf_log_marginal(cfg, sigma2, new_left) + leaf_log_marginal(cfg, sigma2, new_right) -
      leaf_log_marginal(cfg, sigma2, old_left) - leaf_log_marginal(cfg, sigma2, old_right);

  // growability elsewhere is untouched; only this node's children change
  const std::vector<int> growable = growable_leaves(tree, X, grids, rows);
  bool other_growable = false;
  for (int id : growable)
    if (id != node.left && id != node.right) other_growable = true;
  const bool new_left_can = !eligible_split_vars(X, grids, move.left_rows).empty();
  const bool new_right_can = !eligible_split_vars(X, grids, move.right_rows).empty();
  const MoveProbs fwd = move_probs(cfg, !growable.empty(), true);
  const MoveProbs rev = move_probs(cfg, other_growable || new_left_can || new_right_can, true);
  return log_lik + std::log(rev.change) - std::log(fwd.change);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Prior tree sampling and the co-residence matrix

// Draws tree structures from the regularization prior: a node at depth d with
// at least one usable rule splits with probability alpha (1+d)^{-beta_depth};
// the rule is uniform over eligible variables and their valid cuts, so both
// children are nonempty on the training rows. Values are left at zero.
inline std::vector<Tree> sample_prior_trees(const BartConfig& cfg, const Eigen::MatrixXd& X,
                                            const std::vector<std::vector<double>>& grids,
                                            Rng& rng) {
  cfg.validate();
  if (X.rows() < 1) throw std::invalid_argument("bart: no rows to sample trees over");
  std::vector<int> all_rows(static_cast<std::size_t>(X.rows()));
  for (std::size_t i = 0; i < all_rows.size(); ++i) all_rows[i] = static_cast<int>(i);

  std::vector<Tree> trees;
  trees.reserve(static_cast<std::size_t>(cfg.m));
  struct Item {
    int node;
    std::vector<int> rows;
  };
  for (int j = 0; j < cfg.m; ++j) {
    Tree tree;
    std::vector<Item> stack;
    stack.push_back({0, all_rows});
    while (!stack.empty()) {
      Item item = std::move(stack.back());
      stack.pop_back();
      const auto eligible = detail::eligible_split_vars(X, grids, item.rows);
      if (eligible.empty()) continue;
      const int depth = tree.nodes[static_cast<std::size_t>(item.node)].depth;
      if (rng.uniform() >= detail::split_probability(cfg, depth)) continue;
      const auto& pick = eligible[rng.uniform_index(eligible.size())];
      const auto& grid = grids[static_cast<std::size_t>(pick.var)];
      const double cut =
          grid[static_cast<std::size_t>(pick.first_cut) + rng.uniform_index(pick.n_cuts)];
      tree.grow(item.node, pick.var, cut);
      const TreeNode& nd = tree.nodes[static_cast<std::size_t>(item.node)];
      Item left{nd.left, {}};
      Item right{nd.right, {}};
      for (int i : item.rows)
        ((X(i, pick.var) <= cut) ? left.rows : right.rows).push_back(i);
      stack.push_back(std::move(right));
      stack.push_back(std::move(left));
    }
    trees.push_back(std::move(tree));
  }
  return trees;
}

// R[k, l] = fraction of trees in which rows k and l land in the same terminal
// node. Symmetric with a unit diagonal.
inline Eigen::MatrixXd shared_node_correlation(const std::vector<Tree>& trees,
                                               const Eigen::MatrixXd& X) {
  if (trees.empty()) throw std::invalid_argument("bart: need at least one tree");
  const Eigen::Index n = X.rows();
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(n, n);
  std::vector<int> leaf(static_cast<std::size_t>(n));
  std::vector<std::vector<int>> groups;
  for (const Tree& tree : trees) {
    groups.assign(tree.nodes.size(), {});
    for (Eigen::Index i = 0; i < n; ++i) {
      leaf[static_cast<std::size_t>(i)] = tree.assign(X, i);
      groups[static_cast<std::size_t>(leaf[static_cast<std::size_t>(i)])].push_back(
          static_cast<int>(i));
    }
    for (const auto& g : groups)
      for (std::size_t a = 0; a < g.size(); ++a)
        for (std::size_t b = a + 1; b < g.size(); ++b) counts(g[a], g[b]) += 1.0;
  }
  Eigen::MatrixXd R = counts / static_cast<double>(trees.size());
  R = R + R.transpose().eval();
  R.diagonal().setOnes();
  return R;
}

// ---------------------------------------------------------------------------
// Marginal likelihood under the modified prior

// Prior Monte Carlo estimate of log p(y): for each of n_prior_draws tree sets
// drawn from the regularization prior, the node values and sigma^2 integrate
// out to a central multivariate t with nu dof and shape lambda U,
// U = (m/gamma) R + I; the estimate is the log of the average of those
// densities. Draw d uses the derived substream d, so the result does not
// depend on evaluation order and parallelizes over draws.
inline double marginal_log_likelihood_prior_mc(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                               const BartConfig& cfg, int n_prior_draws, Rng& rng,
                                               int threads = 1) {
  cfg.validate();
  if (cfg.node_prior != NodePriorKind::Modified)
    throw std::invalid_argument(
        "bart: marginal likelihood requires the modified node prior (the default prior does not "
        "factor sigma^2 out of the ensemble covariance)");
  if (n_prior_draws < 1) throw std::invalid_argument("bart: need at least one prior draw");
  if (y.size() != X.rows()) throw std::invalid_argument("bart: y length does not match rows");

  const auto grids = cutpoint_grids(X, cfg.cutpoint_grid);
  const double m_over_gamma = static_cast<double>(cfg.m) / cfg.gamma;
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(y.size());

  std::vector<double> logs(static_cast<std::size_t>(n_prior_draws));
  parallel_for(logs.size(), threads, [&](std::size_t d) {
    Rng sub = rng.derive(static_cast<std::uint64_t>(d));
    const auto trees = sample_prior_trees(cfg, X, grids, sub);
    const Eigen::MatrixXd R = shared_node_correlation(trees, X);
    Eigen::MatrixXd shape = cfg.lambda * (m_over_gamma * R +
                                          Eigen::MatrixXd::Identity(y.size(), y.size()));
    logs[d] = mvt_log_density(y, zero, shape, cfg.nu);
  });
  return log_mean_exp(logs);
}

// ---------------------------------------------------------------------------
// Backfitting MCMC

namespace detail {

// Full MCMC state. One sweep updates every tree by a Metropolis-Hastings
// structural move with node values integrated out, redraws the node values
// from their normal conditionals, and then redraws sigma^2.
class Sampler {
 public:
  Sampler(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const BartConfig& cfg, Rng& rng)
      : X_(X), y_(y), cfg_(cfg), rng_(rng) {
    cfg_.validate();
    if (y_.size() != X_.rows()) throw std::invalid_argument("bart: y length does not match rows");
    if (X_.rows() < 2) throw std::invalid_argument("bart: need at least 2 rows");
    grids_ = cutpoint_grids(X_, cfg_.cutpoint_grid);
    bool any = false;
    for (const auto& g : grids_) any |= !g.empty();
    if (!any) throw std::invalid_argument("bart: all predictors are constant");

    const auto n = static_cast<std::size_t>(X_.rows());
    trees_.assign(static_cast<std::size_t>(cfg_.m), Tree{});
    leaf_of_row_.assign(static_cast<std::size_t>(cfg_.m), std::vector<int>(n, 0));
    fit_ = Eigen::VectorXd::Zero(X_.rows());
    sigma2_ = cfg_.sigma2_init;
  }

  void sweep() {
    for (std::size_t j = 0; j < trees_.size(); ++j) update_tree(j);
    draw_sigma2();
    if (cfg_.check_partition) check_partition();
  }

  TreeEnsembleDraw snapshot() const {
    TreeEnsembleDraw draw;
    draw.trees = trees_;
    draw.sigma2 = sigma2_;
    draw.n_predictors = X_.cols();
    return draw;
  }

  double sigma2() const { return sigma2_; }
  const std::vector<Tree>& trees() const { return trees_; }

 private:
  void update_tree(std::size_t j) {
    Tree& tree = trees_[j];
    std::vector<int>& leaf_of = leaf_of_row_[j];

    // remove this tree's contribution; resid_ is y minus all other trees
    for (Eigen::Index i = 0; i < y_.size(); ++i)
      fit_[i] -= tree.nodes[static_cast<std::size_t>(leaf_of[static_cast<std::size_t>(i)])].value;
    resid_ = y_ - fit_;

    auto rows = rows_by_node(tree, leaf_of);
    propose_structural(tree, leaf_of, rows);
    redraw_leaves(tree, rows);

    for (Eigen::Index i = 0; i < y_.size(); ++i)
      fit_[i] += tree.nodes[static_cast<std::size_t>(leaf_of[static_cast<std::size_t>(i)])].value;
  }

  void propose_structural(Tree& tree, std::vector<int>& leaf_of,
                          std::vector<std::vector<int>>& rows) {
    const std::vector<int> growable = growable_leaves(tree, X_, grids_, rows);
    const std::vector<int> nogs = tree.nog_nodes();
    const MoveProbs probs = move_probs(cfg_, !growable.empty(), !nogs.empty());
    const double u = rng_.uniform();
    if (u < probs.grow) {
      propose_grow(tree, leaf_of, rows, growable);
    } else if (u < probs.grow + probs.prune) {
      propose_prune(tree, leaf_of, rows, nogs);
    } else if (u < probs.grow + probs.prune + probs.change) {
      propose_change(tree, leaf_of, rows, nogs);
    }
  }

  void propose_grow(Tree& tree, std::vector<int>& leaf_of, std::vector<std::vector<int>>& rows,
                    const std::vector<int>& growable) {
    GrowMove move;
    move.leaf = growable[rng_.uniform_index(growable.size())];
    const auto& leaf_rows = rows[static_cast<std::size_t>(move.leaf)];
    const auto eligible = eligible_split_vars(X_, grids_, leaf_rows);
    const auto& pick = eligible[rng_.uniform_index(eligible.size())];
    move.var = pick.var;
    const auto& grid = grids_[static_cast<std::size_t>(pick.var)];
    move.cut = grid[static_cast<std::size_t>(pick.first_cut) + rng_.uniform_index(pick.n_cuts)];
    for (int i : leaf_rows)
      ((X_(i, move.var) <= move.cut) ? move.left_rows : move.right_rows).push_back(i);

    const double log_a =
        grow_log_acceptance(cfg_, sigma2_, tree, X_, grids_, rows, resid_, move);
    if (std::log(rng_.uniform_pos()) < log_a) {
      tree.grow(move.leaf, move.var, move.cut);
      const TreeNode& nd = tree.nodes[static_cast<std::size_t>(move.leaf)];
      rows.resize(tree.nodes.size());
      rows[static_cast<std::size_t>(nd.left)] = move.left_rows;
      rows[static_cast<std::size_t>(nd.right)] = move.right_rows;
      for (int i : move.left_rows) leaf_of[static_cast<std::size_t>(i)] = nd.left;
      for (int i : move.right_rows) leaf_of[static_cast<std::size_t>(i)] = nd.right;
      rows[static_cast<std::size_t>(move.leaf)].clear();
    }
  }

  void propose_prune(Tree& tree, std::vector<int>& leaf_of, std::vector<std::vector<int>>& rows,
                     const std::vector<int>& nogs) {
    const int nog = nogs[rng_.uniform_index(nogs.size())];
    const double log_a =
        prune_log_acceptance(cfg_, sigma2_, tree, X_, grids_, rows, resid_, nog);
    if (std::log(rng_.uniform_pos()) < log_a) {
      const TreeNode& nd = tree.nodes[static_cast<std::size_t>(nog)];
      auto& merged = rows[static_cast<std::size_t>(nog)];
      const auto& lrows = rows[static_cast<std::size_t>(nd.left)];
      const auto& rrows = rows[static_cast<std::size_t>(nd.right)];
      merged.clear();
      std::merge(lrows.begin(), lrows.end(), rrows.begin(), rrows.end(),
                 std::back_inserter(merged));
      for (int i : merged) leaf_of[static_cast<std::size_t>(i)] = nog;
      rows[static_cast<std::size_t>(nd.left)].clear();
      rows[static_cast<std::size_t>(nd.right)].clear();
      tree.prune(nog);
    }
  }

  void propose_change(Tree& tree, std::vector<int>& leaf_of, std::vector<std::vector<int>>& rows,
                      const std::vector<int>& nogs) {
    ChangeMove move;
    move.nog = nogs[rng_.uniform_index(nogs.size())];
    const TreeNode& nd = tree.nodes[static_cast<std::size_t>(move.nog)];
    std::vector<int> merged;
    const auto& lrows = rows[static_cast<std::size_t>(nd.left)];
    const auto& rrows = rows[static_cast<std::size_t>(nd.right)];
    std::merge(lrows.begin(), lrows.end(), rrows.begin(), rrows.end(), std::back_inserter(merged));
    const auto eligible = eligible_split_vars(X_, grids_, merged);
    if (eligible.empty()) return;
    const auto& pick = eligible[rng_.uniform_index(eligible.size())];
    move.var = pick.var;
    const auto& grid = grids_[static_cast<std::size_t>(pick.var)];
    move.cut = grid[static_cast<std::size_t>(pick.first_cut) + rng_.uniform_index(pick.n_cuts)];
    for (int i : merged)
      ((X_(i, move.var) <= move.cut) ? move.left_rows : move.right_rows).push_back(i);
    if (move.left_rows.empty() || move.right_rows.empty()) return;

    const double log_a =
        change_log_acceptance(cfg_, sigma2_, tree, X_, grids_, rows, resid_, move);
    if (std::log(rng_.uniform_pos()) < log_a) {
      tree.nodes[static_cast<std::size_t>(move.nog)].var = move.var;
      tree.nodes[static_cast<std::size_t>(move.nog)].cut = move.cut;
      rows[static_cast<std::size_t>(nd.left)] = move.left_rows;
      rows[static_cast<std::size_t>(nd.right)] = move.right_rows;
      for (int i : move.left_rows) leaf_of[static_cast<std::size_t>(i)] = nd.left;
      for (int i : move.right_rows) leaf_of[static_cast<std::size_t>(i)] = nd.right;
    }
  }

  // Node value conditionals given sigma^2 and the partial residuals r:
  // modified prior: mu | . ~ N(sum r / (n + gamma), sigma^2/(n + gamma)),
  // from combining the N(mu, sigma^2) likelihood of each residual with the
  // N(0, sigma^2/gamma) prior. Default prior: precision n/sigma^2 + 1/tau^2.
  void redraw_leaves(Tree& tree, const std::vector<std::vector<int>>& rows) {
    tree.for_each_leaf([&](int id) {
      const LeafSuffStats s = stats_for_rows(resid_, rows[static_cast<std::size_t>(id)]);
      double mean, var;
      if (cfg_.node_prior == NodePriorKind::Modified) {
        mean = s.sum / (s.n + cfg_.gamma);
        var = sigma2_ / (s.n + cfg_.gamma);
      } else {
        const double precision = s.n / sigma2_ + 1.0 / cfg_.tau2;
        mean = (s.sum / sigma2_) / precision;
        var = 1.0 / precision;
      }
      tree.nodes[static_cast<std::size_t>(id)].value = rng_.normal(mean, std::sqrt(var));
    });
  }

  // sigma^2 | rest. With the default prior the node values carry no sigma^2,
  // so the conditional is IG((nu + n)/2, (nu lambda + RSS)/2). The modified
  // prior puts N(0, sigma^2/gamma) on each of the L node values, contributing
  // (sigma^2)^{-L/2} exp(-gamma sum mu^2 / (2 sigma^2)), hence
  // IG((nu + n + L)/2, (nu lambda + RSS + gamma sum mu^2)/2).
  void draw_sigma2() {
    const double rss = (y_ - fit_).squaredNorm();
    double shape = (cfg_.nu + static_cast<double>(y_.size())) / 2.0;
    double rate = (cfg_.nu * cfg_.lambda + rss) / 2.0;
    if (cfg_.node_prior == NodePriorKind::Modified) {
      double n_leaves = 0.0;
      double sumsq_values = 0.0;
      for (const Tree& tree : trees_)
        tree.for_each_leaf([&](int id) {
          n_leaves += 1.0;
          sumsq_values += tree.nodes[static_cast<std::size_t>(id)].value *
                          tree.nodes[static_cast<std::size_t>(id)].value;
        });
      shape += n_leaves / 2.0;
      rate += cfg_.gamma * sumsq_values / 2.0;
    }
    sigma2_ = rng_.inverse_gamma(shape, rate);
  }

  void check_partition() const {
    for (std::size_t j = 0; j < trees_.size(); ++j) {
      const Tree& tree = trees_[j];
      std::vector<int> counts(tree.nodes.size(), 0);
      for (Eigen::Index i = 0; i < X_.rows(); ++i) {
        const int leaf = tree.assign(X_, i);
        if (leaf != leaf_of_row_[j][static_cast<std::size_t>(i)])
          throw std::logic_error("bart: row-to-leaf cache disagrees with tree traversal");
        counts[static_cast<std::size_t>(leaf)] += 1;
      }
      int total = 0;
      tree.for_each_leaf([&](int id) { total += counts[static_cast<std::size_t>(id)]; });
      if (total != static_cast<int>(X_.rows()))
        throw std::logic_error("bart: leaves do not partition the training rows");
    }
  }

  Eigen::MatrixXd X_;
  Eigen::VectorXd y_;
  BartConfig cfg_;
  Rng& rng_;
  std::vector<std::vector<double>> grids_;
  std::vector<Tree> trees_;
  std::vector<std::vector<int>> leaf_of_row_;
  Eigen::VectorXd fit_;
  Eigen::VectorXd resid_;
  double sigma2_ = 1.0;
};

}  // namespace detail

// Runs n_burn + n_keep backfitting sweeps and returns the kept draws.
// Deterministic given the rng state; the proposal sequence consumes
// randomness in row order, so permuting the training rows changes the
// realized chain (not its distribution).
inline std::vector<TreeEnsembleDraw> fit_mcmc(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                              const BartConfig& cfg, Rng& rng) {
  detail::Sampler sampler(X, y, cfg, rng);
  for (int s = 0; s < cfg.n_burn; ++s) sampler.sweep();
  std::vector<TreeEnsembleDraw> draws;
  draws.reserve(static_cast<std::size_t>(cfg.n_keep));
  for (int s = 0; s < cfg.n_keep; ++s) {
    sampler.sweep();
    draws.push_back(sampler.snapshot());
  }
  return draws;
}

// Sum of terminal values per row, mapped back to outcome units.
inline Eigen::VectorXd predict(const TreeEnsembleDraw& draw, const Eigen::MatrixXd& X,
                               const OutcomeTransform& transform) {
  if (X.cols() != draw.n_predictors)
    throw std::invalid_argument("bart: prediction rows have " + std::to_string(X.cols()) +
                                " columns, ensemble was trained on " +
                                std::to_string(draw.n_predictors));
  Eigen::VectorXd out(X.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i)
    out[i] = transform.invert(draw.predict_row_std(X, i));
  return out;
}

}  // namespace msborrow::bart
