#pragma once

#include <string>
#include <utility>
#include <vector>

#include "splatflow/gaussian.hpp"

namespace splatflow {

struct TreeNode {
  Gaussian3D gaussian;
  double weight = 0.0;  // merge mass
  int left = -1, right = -1;
  int depth = 0;
};

// Perfect binary tree stored breadth-first: depth-l nodes occupy indices
// [2^l - 1, 2^(l+1) - 1) in left-to-right order, children of node i are at
// 2i+1 and 2i+2. Leaves hold the input Gaussians reordered by the pairing
// permutation; internal nodes are moment-matched merges of their children.
struct GaussianTree {
  std::vector<TreeNode> nodes;
  int root = 0;
  int leaf_count = 0;
  int max_depth = 0;
  std::vector<int> leaf_permutation;  // tree leaf position -> input index

  int level_begin(int depth) const { return (1 << depth) - 1; }
  int level_count(int depth) const { return 1 << depth; }
};

// Moment-matched merge. Mixture weights p = w_a/(w_a+w_b); merged covariance
// comes back to (log_scale, rotation) via symmetric eigendecomposition with a
// right-handed eigenvector frame; opacity blends in sigma space and is
// re-logit; rgb blends raw. Returns the merged Gaussian and w_a + w_b.
std::pair<Gaussian3D, double> merge_pair(const Gaussian3D& a, double w_a,
                                         const Gaussian3D& b, double w_b);

// opacity times ellipsoid volume; used for merge weights and resampling.
double importance(const Gaussian3D& g);

// Leaf count must be a power of two (use resample_to_pow2 first). Leaves are
// paired by Morton order of their means.
GaussianTree build_tree(const GaussianSet& leaves);

GaussianSet slice_depth(const GaussianTree& tree, int depth);

// Shrinks by keeping the highest-importance Gaussians (input order preserved)
// or grows by splitting the highest-importance Gaussian along its major axis
// into two half-opacity children until the target count is reached.
GaussianSet resample_to_pow2(const GaussianSet& set, int target);

struct TokenSequence {
  Eigen::MatrixXd tokens;  // (N/2) x (2*row_width)
  std::vector<std::pair<int, int>> sibling_map;
};

// Rows are ordered so that (2i, 2i+1) are tree siblings; token i is their
// concatenation. Exact inverses; N must be even.
TokenSequence patchify(const Eigen::MatrixXd& rows);
Eigen::MatrixXd unpatchify(const TokenSequence& t);
Eigen::MatrixXd unpatchify_rows(const Eigen::MatrixXd& tokens);

void write_tree(const GaussianTree& tree, const std::string& path);
GaussianTree read_tree(const std::string& path);

}  // namespace splatflow
