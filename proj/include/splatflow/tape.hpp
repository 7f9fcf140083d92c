#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

#include "splatflow/threading.hpp"

namespace splatflow {

// Reverse-mode tape over dense double matrices. Nodes are created in
// topological order; backward() walks them in reverse. Scalars are 1x1.
// All reductions run in fixed index order, so results are bit-reproducible.
// attention() additionally accumulates its token-axis sums over the leading
// `gauss_len` keys in content-sorted order, which makes the forward pass
// bit-exactly equivariant under permutations of those tokens.
class Tape {
 public:
  using Mat = Eigen::MatrixXd;

  Tape() { tune_malloc_once(); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaves. `param` keeps a pointer to external storage (no copy) and is
  // reported by param_grads(); `input` copies.
  int input(Mat value);
  int param(const std::string& name, const Mat& value);

  int matmul(int a, int b);
  int add(int a, int b);
  int sub(int a, int b);
  int mul(int a, int b);          // elementwise
  int scale(int a, double c);
  int add_rowvec(int m, int v);   // v: 1 x cols, broadcast over rows
  int mul_rowvec(int m, int v);
  // x * (1 + s) + b with s, b broadcast row vectors (AdaLN modulation)
  int row_affine(int x, int s, int b);
  int rmsnorm_rows(int x, double eps = 1e-6);
  int gelu(int x);     // exact erf form
  int sigmoid(int x);
  int exp(int x);
  int concat_rows(const std::vector<int>& parts);
  int concat_cols(const std::vector<int>& parts);
  int slice_rows(int x, int r0, int nrows);
  int slice_cols(int x, int c0, int ncols);
  // softmax(scale * q k^T) v with content-sorted sums over the first
  // gauss_len tokens of the key/value axis
  int attention(int q, int k, int v, int gauss_len, double scale);
  int mean_sq(int a);  // scalar: mean of squared entries
  // custom node (e.g. a renderer loss): value plus an explicit backward
  int custom(Mat value, std::vector<int> parents,
             std::function<void(Tape&, const Mat& gout)> back);

  void backward(int node);

  const Mat& value(int i) const { return nodes_[static_cast<std::size_t>(i)].val(); }
  const Mat& grad(int i) const { return nodes_[static_cast<std::size_t>(i)].grad; }
  bool has_grad(int i) const { return nodes_[static_cast<std::size_t>(i)].grad.size() > 0; }
  void accumulate(int i, const Mat& g);

  // name -> gradient for every param leaf (zero matrices where untouched)
  std::vector<std::pair<std::string, Mat>> param_grads() const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat owned;
    const Mat* external = nullptr;
    Mat grad;
    std::function<void(Tape&, const Mat&)> back;
    std::string param_name;  // non-empty for param leaves
    const Mat& val() const { return external ? *external : owned; }
  };

  int push(Mat value, std::function<void(Tape&, const Mat&)> back);
  std::vector<Node> nodes_;
  bool consumed_once_ = false;
};

}  // namespace splatflow
