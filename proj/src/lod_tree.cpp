#include "splatflow/lod_tree.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace splatflow {

namespace {

bool is_pow2(std::size_t n) { return n > 0 && (n & (n - 1)) == 0; }

std::uint64_t expand_bits21(std::uint64_t v) {
  v &= 0x1fffff;
  v = (v | (v << 32)) & 0x1f00000000ffffull;
  v = (v | (v << 16)) & 0x1f0000ff0000ffull;
  v = (v | (v << 8)) & 0x100f00f00f00f00full;
  v = (v | (v << 4)) & 0x10c30c30c30c30c3ull;
  v = (v | (v << 2)) & 0x1249249249249249ull;
  return v;
}

std::uint64_t morton3(double x, double y, double z) {
  const auto q = [](double v) {
    v = std::clamp(v, 0.0, 1.0);
    return static_cast<std::uint64_t>(v * 2097151.0);  // 2^21 - 1
  };
  return expand_bits21(q(x)) | (expand_bits21(q(y)) << 1) | (expand_bits21(q(z)) << 2);
}

// Leaf order: Morton code over the scene bounding box, ties by input index.
std::vector<int> morton_order(const GaussianSet& set) {
  Vec3 lo = set[0].mean, hi = set[0].mean;
  for (const auto& g : set.gaussians) {
    lo = lo.cwiseMin(g.mean);
    hi = hi.cwiseMax(g.mean);
  }
  const Vec3 extent = (hi - lo).cwiseMax(1e-12);

  std::vector<std::pair<std::uint64_t, int>> keyed(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    const Vec3 n = (set[i].mean - lo).cwiseQuotient(extent);
    keyed[i] = {morton3(n.x(), n.y(), n.z()), static_cast<int>(i)};
  }
  std::sort(keyed.begin(), keyed.end());
  std::vector<int> order(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) order[i] = keyed[i].second;
  return order;
}

}  // namespace

double importance(const Gaussian3D& g) {
  return sigmoid(g.logit_opacity) * std::exp(g.log_scale.sum());
}

std::pair<Gaussian3D, double> merge_pair(const Gaussian3D& a, double w_a,
                                         const Gaussian3D& b, double w_b) {
  const double w = w_a + w_b;
  if (!(w > 0.0)) throw std::invalid_argument("merge_pair: non-positive total weight");
  const double p = w_a / w;

  Gaussian3D m;
  m.mean = p * a.mean + (1.0 - p) * b.mean;

  const Vec3 da = a.mean - m.mean;
  const Vec3 db = b.mean - m.mean;
  const Mat3 cov = p * (covariance(a) + da * da.transpose()) +
                   (1.0 - p) * (covariance(b) + db * db.transpose());

  Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
  Vec3 evals = es.eigenvalues().cwiseMax(1e-12);
  Mat3 frame = es.eigenvectors();
  if (frame.determinant() < 0.0) frame.col(0) = -frame.col(0);

  m.log_scale = 0.5 * evals.array().log();
  m.rotation = rotmat_to_quat(frame);

  const double op = std::clamp(
      p * sigmoid(a.logit_opacity) + (1.0 - p) * sigmoid(b.logit_opacity), 1e-12,
      1.0 - 1e-12);
  m.logit_opacity = logit(op);
  m.rgb = p * a.rgb + (1.0 - p) * b.rgb;
  return {m, w};
}

GaussianTree build_tree(const GaussianSet& leaves) {
  if (!is_pow2(leaves.size()))
    throw std::invalid_argument("build_tree: leaf count " +
                                std::to_string(leaves.size()) +
                                " is not a power of two");
  GaussianTree tree;
  tree.leaf_count = static_cast<int>(leaves.size());
  tree.max_depth = 0;
  while ((1 << tree.max_depth) < tree.leaf_count) ++tree.max_depth;
  tree.nodes.resize(2 * static_cast<std::size_t>(tree.leaf_count) - 1);
  tree.root = 0;
  tree.leaf_permutation = leaves.size() == 1 ? std::vector<int>{0} : morton_order(leaves);

  const int leaf_begin = tree.level_begin(tree.max_depth);
  for (int j = 0; j < tree.leaf_count; ++j) {
    TreeNode& n = tree.nodes[static_cast<std::size_t>(leaf_begin + j)];
    n.gaussian = leaves[static_cast<std::size_t>(tree.leaf_permutation[j])];
    n.weight = importance(n.gaussian);
    n.depth = tree.max_depth;
  }
  for (int d = tree.max_depth - 1; d >= 0; --d) {
    const int begin = tree.level_begin(d);
    for (int j = 0; j < tree.level_count(d); ++j) {
      const int i = begin + j;
      TreeNode& n = tree.nodes[static_cast<std::size_t>(i)];
      n.left = 2 * i + 1;
      n.right = 2 * i + 2;
      n.depth = d;
      const TreeNode& l = tree.nodes[static_cast<std::size_t>(n.left)];
      const TreeNode& r = tree.nodes[static_cast<std::size_t>(n.right)];
      std::tie(n.gaussian, n.weight) = merge_pair(l.gaussian, l.weight, r.gaussian, r.weight);
    }
  }
  return tree;
}

GaussianSet slice_depth(const GaussianTree& tree, int depth) {
  if (depth < 0 || depth > tree.max_depth)
    throw std::invalid_argument("slice_depth: depth " + std::to_string(depth) +
                                " outside [0, " + std::to_string(tree.max_depth) + "]");
  GaussianSet out;
  out.gaussians.reserve(static_cast<std::size_t>(tree.level_count(depth)));
  const int begin = tree.level_begin(depth);
  for (int j = 0; j < tree.level_count(depth); ++j)
    out.gaussians.push_back(tree.nodes[static_cast<std::size_t>(begin + j)].gaussian);
  return out;
}

GaussianSet resample_to_pow2(const GaussianSet& set, int target) {
  if (set.empty()) throw std::invalid_argument("resample_to_pow2: empty set");
  if (target < 1) throw std::invalid_argument("resample_to_pow2: target < 1");

  const int n = static_cast<int>(set.size());
  if (target == n) return set;

  if (target < n) {
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> imp(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) imp[static_cast<std::size_t>(i)] = importance(set[static_cast<std::size_t>(i)]);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (imp[static_cast<std::size_t>(a)] != imp[static_cast<std::size_t>(b)])
        return imp[static_cast<std::size_t>(a)] > imp[static_cast<std::size_t>(b)];
      return a < b;
    });
    order.resize(static_cast<std::size_t>(target));
    std::sort(order.begin(), order.end());  // keep input order among survivors
    GaussianSet out;
    out.gaussians.reserve(order.size());
    for (int i : order) out.gaussians.push_back(set[static_cast<std::size_t>(i)]);
    return out;
  }

  GaussianSet out = set;
  while (static_cast<int>(out.size()) < target) {
    int best = 0;
    double best_imp = -1.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double imp = importance(out[i]);
      if (imp > best_imp) {
        best_imp = imp;
        best = static_cast<int>(i);
      }
    }
    Gaussian3D parent = out[static_cast<std::size_t>(best)];
    int axis = 0;
    for (int c = 1; c < 3; ++c)
      if (parent.log_scale(c) > parent.log_scale(axis)) axis = c;

    Vec4 q = parent.rotation;
    const double qn = q.norm();
    q = qn < 1e-12 ? Vec4(1, 0, 0, 0) : Vec4(q / qn);
    const Vec3 dir = quat_to_rotmat(q).col(axis);
    const double stddev = std::exp(parent.log_scale(axis));

    Gaussian3D child = parent;
    // shrinking the split axis to sqrt(3)/2 of the parent keeps the pair's
    // second moment equal to the parent's
    child.log_scale(axis) += 0.5 * std::log(0.75);
    child.logit_opacity =
        logit(std::clamp(0.5 * sigmoid(parent.logit_opacity), 1e-12, 1.0 - 1e-12));

    Gaussian3D lo = child, hi = child;
    lo.mean = parent.mean - 0.5 * stddev * dir;
    hi.mean = parent.mean + 0.5 * stddev * dir;
    out.gaussians[static_cast<std::size_t>(best)] = lo;
    out.gaussians.insert(out.gaussians.begin() + best + 1, hi);
  }
  return out;
}

TokenSequence patchify(const Eigen::MatrixXd& rows) {
  if (rows.rows() % 2 != 0)
    throw std::invalid_argument("patchify: odd row count " + std::to_string(rows.rows()));
  TokenSequence t;
  const Eigen::Index n = rows.rows() / 2, c = rows.cols();
  t.tokens.resize(n, 2 * c);
  t.sibling_map.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    t.tokens.block(i, 0, 1, c) = rows.row(2 * i);
    t.tokens.block(i, c, 1, c) = rows.row(2 * i + 1);
    t.sibling_map[static_cast<std::size_t>(i)] = {static_cast<int>(2 * i),
                                                  static_cast<int>(2 * i + 1)};
  }
  return t;
}

Eigen::MatrixXd unpatchify(const TokenSequence& t) { return unpatchify_rows(t.tokens); }

Eigen::MatrixXd unpatchify_rows(const Eigen::MatrixXd& tokens) {
  if (tokens.cols() % 2 != 0)
    throw std::invalid_argument("unpatchify: odd token width");
  const Eigen::Index n = tokens.rows(), c = tokens.cols() / 2;
  Eigen::MatrixXd rows(2 * n, c);
  for (Eigen::Index i = 0; i < n; ++i) {
    rows.row(2 * i) = tokens.block(i, 0, 1, c);
    rows.row(2 * i + 1) = tokens.block(i, c, 1, c);
  }
  return rows;
}

namespace {
constexpr char kTreeMagic[8] = {'S', 'F', 'T', 'R', 'E', 'E', '0', '1'};
}

void write_tree(const GaussianTree& tree, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_tree: cannot open " + path);
  out.write(kTreeMagic, 8);
  const std::uint32_t version = 1;
  out.write(reinterpret_cast<const char*>(&version), 4);
  const std::int32_t header[3] = {tree.leaf_count, tree.max_depth,
                                  static_cast<std::int32_t>(tree.nodes.size())};
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  for (const TreeNode& n : tree.nodes) {
    const ParamVector v = pack(n.gaussian);
    out.write(reinterpret_cast<const char*>(v.data()), 14 * sizeof(double));
    out.write(reinterpret_cast<const char*>(&n.weight), sizeof(double));
    const std::int32_t links[3] = {n.left, n.right, n.depth};
    out.write(reinterpret_cast<const char*>(links), sizeof(links));
  }
  out.write(reinterpret_cast<const char*>(tree.leaf_permutation.data()),
            static_cast<std::streamsize>(tree.leaf_permutation.size() * sizeof(int)));
  if (!out) throw std::runtime_error("write_tree: write failed for " + path);
}

GaussianTree read_tree(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_tree: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kTreeMagic, 8) != 0)
    throw std::runtime_error("read_tree: bad magic in " + path);
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  if (version != 1)
    throw std::runtime_error("read_tree: unsupported version " + std::to_string(version));
  std::int32_t header[3];
  in.read(reinterpret_cast<char*>(header), sizeof(header));

  GaussianTree tree;
  tree.leaf_count = header[0];
  tree.max_depth = header[1];
  tree.nodes.resize(static_cast<std::size_t>(header[2]));
  tree.root = 0;
  for (TreeNode& n : tree.nodes) {
    ParamVector v;
    in.read(reinterpret_cast<char*>(v.data()), 14 * sizeof(double));
    n.gaussian = unpack(v);
    in.read(reinterpret_cast<char*>(&n.weight), sizeof(double));
    std::int32_t links[3];
    in.read(reinterpret_cast<char*>(links), sizeof(links));
    n.left = links[0];
    n.right = links[1];
    n.depth = links[2];
  }
  tree.leaf_permutation.resize(static_cast<std::size_t>(tree.leaf_count));
  in.read(reinterpret_cast<char*>(tree.leaf_permutation.data()),
          static_cast<std::streamsize>(tree.leaf_permutation.size() * sizeof(int)));
  if (!in) throw std::runtime_error("read_tree: truncated file " + path);
  return tree;
}

}  // namespace splatflow
