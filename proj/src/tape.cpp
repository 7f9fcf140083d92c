#include "splatflow/tape.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace splatflow {

namespace {
constexpr double kGeluC0 = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC1 = 0.044715;
}  // namespace

int Tape::push(Mat value, std::function<void(Tape&, const Mat&)> back) {
  Node n;
  n.owned = std::move(value);
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

int Tape::input(Mat value) { return push(std::move(value), nullptr); }

int Tape::param(const std::string& name, const Mat& value) {
  Node n;
  n.external = &value;
  n.param_name = name;
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::accumulate(int i, const Mat& g) {
  Node& n = nodes_[static_cast<std::size_t>(i)];
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

int Tape::matmul(int a, int b) {
  Mat out = value(a) * value(b);
  return push(std::move(out), [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g * t.value(b).transpose());
    t.accumulate(b, t.value(a).transpose() * g);
  });
}

int Tape::add(int a, int b) {
  Mat out = value(a) + value(b);
  return push(std::move(out), [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

int Tape::sub(int a, int b) {
  Mat out = value(a) - value(b);
  return push(std::move(out), [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

int Tape::mul(int a, int b) {
  Mat out = value(a).cwiseProduct(value(b));
  return push(std::move(out), [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g.cwiseProduct(t.value(b)));
    t.accumulate(b, g.cwiseProduct(t.value(a)));
  });
}

int Tape::scale(int a, double c) {
  Mat out = c * value(a);
  return push(std::move(out),
              [a, c](Tape& t, const Mat& g) { t.accumulate(a, c * g); });
}

int Tape::add_rowvec(int m, int v) {
  Mat out = value(m);
  out.rowwise() += value(v).row(0);
  return push(std::move(out), [m, v](Tape& t, const Mat& g) {
    t.accumulate(m, g);
    t.accumulate(v, g.colwise().sum());
  });
}

int Tape::mul_rowvec(int m, int v) {
  Mat out = value(m);
  out.array().rowwise() *= value(v).row(0).array();
  return push(std::move(out), [m, v](Tape& t, const Mat& g) {
    Mat gm = g;
    gm.array().rowwise() *= t.value(v).row(0).array();
    t.accumulate(m, gm);
    t.accumulate(v, g.cwiseProduct(t.value(m)).colwise().sum());
  });
}

int Tape::row_affine(int x, int s, int b) {
  Mat out = value(x);
  out.array().rowwise() *= (1.0 + value(s).row(0).array());
  out.rowwise() += value(b).row(0);
  return push(std::move(out), [x, s, b](Tape& t, const Mat& g) {
    Mat gx = g;
    gx.array().rowwise() *= (1.0 + t.value(s).row(0).array());
    t.accumulate(x, gx);
    t.accumulate(s, g.cwiseProduct(t.value(x)).colwise().sum());
    t.accumulate(b, g.colwise().sum());
  });
}

int Tape::rmsnorm_rows(int x, double eps) {
  const Mat& in = value(x);
  Eigen::VectorXd rms =
      (in.array().square().rowwise().mean() + eps).sqrt().matrix();
  Mat out = in.array().colwise() / rms.array();
  return push(std::move(out), [x, rms](Tape& t, const Mat& g) {
    const Mat& in = t.value(x);
    const double cols = static_cast<double>(in.cols());
    const Eigen::VectorXd dot = g.cwiseProduct(in).rowwise().sum();
    Mat gx = g.array().colwise() / rms.array();
    gx -= (in.array().colwise() * (dot.array() / (cols * rms.array().cube()))).matrix();
    t.accumulate(x, gx);
  });
}

// tanh form of GELU; vectorizes where erf does not
int Tape::gelu(int x) {
  const auto xa = value(x).array();
  Mat out = (0.5 * xa * (1.0 + (kGeluC0 * (xa + kGeluC1 * xa.cube())).tanh())).matrix();
  return push(std::move(out), [x](Tape& t, const Mat& g) {
    const auto xa = t.value(x).array();
    const auto th = (kGeluC0 * (xa + kGeluC1 * xa.cube())).tanh();
    const auto d = 0.5 * (1.0 + th) +
                   0.5 * xa * (1.0 - th.square()) * kGeluC0 *
                       (1.0 + 3.0 * kGeluC1 * xa.square());
    t.accumulate(x, (g.array() * d).matrix());
  });
}

int Tape::sigmoid(int x) {
  Mat out = (1.0 / (1.0 + (-value(x).array()).exp())).matrix();
  const int self_hint = static_cast<int>(nodes_.size());  // out node index
  return push(std::move(out), [x, self_hint](Tape& t, const Mat& g) {
    const auto s = t.value(self_hint).array();
    t.accumulate(x, (g.array() * s * (1.0 - s)).matrix());
  });
}

int Tape::exp(int x) {
  Mat out = value(x).array().exp();
  const int self_hint = static_cast<int>(nodes_.size());
  return push(std::move(out), [x, self_hint](Tape& t, const Mat& g) {
    t.accumulate(x, g.cwiseProduct(t.value(self_hint)));
  });
}

int Tape::concat_rows(const std::vector<int>& parts) {
  Eigen::Index rows = 0;
  const Eigen::Index cols = value(parts.front()).cols();
  for (int p : parts) rows += value(p).rows();
  Mat out(rows, cols);
  Eigen::Index r = 0;
  for (int p : parts) {
    out.middleRows(r, value(p).rows()) = value(p);
    r += value(p).rows();
  }
  return push(std::move(out), [parts](Tape& t, const Mat& g) {
    Eigen::Index r = 0;
    for (int p : parts) {
      const Eigen::Index n = t.value(p).rows();
      t.accumulate(p, g.middleRows(r, n));
      r += n;
    }
  });
}

int Tape::concat_cols(const std::vector<int>& parts) {
  Eigen::Index cols = 0;
  const Eigen::Index rows = value(parts.front()).rows();
  for (int p : parts) cols += value(p).cols();
  Mat out(rows, cols);
  Eigen::Index c = 0;
  for (int p : parts) {
    out.middleCols(c, value(p).cols()) = value(p);
    c += value(p).cols();
  }
  return push(std::move(out), [parts](Tape& t, const Mat& g) {
    Eigen::Index c = 0;
    for (int p : parts) {
      const Eigen::Index n = t.value(p).cols();
      t.accumulate(p, g.middleCols(c, n));
      c += n;
    }
  });
}

int Tape::slice_rows(int x, int r0, int nrows) {
  Mat out = value(x).middleRows(r0, nrows);
  return push(std::move(out), [x, r0, nrows](Tape& t, const Mat& g) {
    Mat gx = Mat::Zero(t.value(x).rows(), t.value(x).cols());
    gx.middleRows(r0, nrows) = g;
    t.accumulate(x, gx);
  });
}

int Tape::slice_cols(int x, int c0, int ncols) {
  Mat out = value(x).middleCols(c0, ncols);
  return push(std::move(out), [x, c0, ncols](Tape& t, const Mat& g) {
    Mat gx = Mat::Zero(t.value(x).rows(), t.value(x).cols());
    gx.middleCols(c0, ncols) = g;
    t.accumulate(x, gx);
  });
}

int Tape::attention(int q, int k, int v, int gauss_len, double scale) {
  const Mat& qm = value(q);
  const Mat& km = value(k);
  const Mat& vm = value(v);
  const Eigen::Index tcount = qm.rows();
  const Eigen::Index hd = vm.cols();
  if (km.rows() != tcount || vm.rows() != tcount || km.cols() != qm.cols())
    throw std::invalid_argument("attention: shape mismatch");
  if (gauss_len < 0 || gauss_len > tcount)
    throw std::invalid_argument("attention: bad gauss_len");

  Mat scores = scale * (qm * km.transpose());
  const Eigen::VectorXd row_max = scores.rowwise().maxCoeff();
  // exponentials computed matrix-wide; probs holds E until the division
  Mat probs = (scores.colwise() - row_max).array().exp().matrix();
  Mat out(tcount, hd);

  const Eigen::Index rest = tcount - gauss_len;
  std::vector<int> order(static_cast<std::size_t>(gauss_len));
  Eigen::RowVectorXd num(hd);
  for (Eigen::Index i = 0; i < tcount; ++i) {
    // Token-axis sums over the gauss block run in content order so that the
    // result is independent of how those tokens were arranged.
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int ja, int jb) {
      const double ea = probs(i, ja), eb = probs(i, jb);
      if (ea != eb) return ea > eb;
      for (Eigen::Index c = 0; c < hd; ++c)
        if (vm(ja, c) != vm(jb, c)) return vm(ja, c) > vm(jb, c);
      return false;
    });

    double z = 0.0;
    num.setZero();
    for (int j : order) {
      const double ej = probs(i, j);
      z += ej;
      num += ej * vm.row(j);
    }
    if (rest > 0) {
      z += probs.row(i).segment(gauss_len, rest).sum();
      num.noalias() += probs.row(i).segment(gauss_len, rest) * vm.middleRows(gauss_len, rest);
    }
    probs.row(i) /= z;
    out.row(i) = num / z;
  }

  return push(std::move(out), [q, k, v, scale, probs](Tape& t, const Mat& g) {
    const Mat& vm = t.value(v);
    const Mat dp = g * vm.transpose();
    t.accumulate(v, probs.transpose() * g);
    const Eigen::VectorXd rowdot = probs.cwiseProduct(dp).rowwise().sum();
    Mat ds = probs.cwiseProduct(dp - rowdot.replicate(1, dp.cols()));
    t.accumulate(q, scale * (ds * t.value(k)));
    t.accumulate(k, scale * (ds.transpose() * t.value(q)));
  });
}

int Tape::mean_sq(int a) {
  const Mat& in = value(a);
  Mat out(1, 1);
  out(0, 0) = in.squaredNorm() / static_cast<double>(in.size());
  return push(std::move(out), [a](Tape& t, const Mat& g) {
    const Mat& in = t.value(a);
    t.accumulate(a, (2.0 * g(0, 0) / static_cast<double>(in.size())) * in);
  });
}

int Tape::custom(Mat value, std::vector<int> parents,
                 std::function<void(Tape&, const Mat&)> back) {
  (void)parents;  // parents are captured by the closure; kept for clarity
  return push(std::move(value), std::move(back));
}

void Tape::backward(int node) {
  if (consumed_once_) throw std::logic_error("Tape: backward called twice");
  consumed_once_ = true;
  Node& out = nodes_[static_cast<std::size_t>(node)];
  out.grad = Mat::Ones(out.val().rows(), out.val().cols());
  for (int i = node; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.grad.size() == 0 || !n.back) continue;
    n.back(*this, n.grad);
  }
}

std::vector<std::pair<std::string, Tape::Mat>> Tape::param_grads() const {
  std::vector<std::pair<std::string, Mat>> out;
  for (const Node& n : nodes_) {
    if (n.param_name.empty()) continue;
    if (n.grad.size() > 0) {
      out.emplace_back(n.param_name, n.grad);
    } else {
      out.emplace_back(n.param_name, Mat::Zero(n.val().rows(), n.val().cols()));
    }
  }
  return out;
}

}  // namespace splatflow
