#include <doctest.h>

#include <functional>

#include "splatflow/rng.hpp"
#include "splatflow/tape.hpp"

using namespace splatflow;
using Mat = Eigen::MatrixXd;

namespace {

Mat randn(Rng& rng, int r, int c) {
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = rng.normal();
  return m;
}

// Finite-difference check of d(scalar graph)/d(each input), where the graph
// is rebuilt per evaluation by `build` from the given leaf values.
void gradcheck(std::vector<Mat> leaves,
               const std::function<int(Tape&, const std::vector<int>&)>& build,
               double tol = 1e-6) {
  Tape tape;
  std::vector<int> ids;
  for (auto& l : leaves) ids.push_back(tape.input(l));
  const int out = build(tape, ids);
  REQUIRE(tape.value(out).size() == 1);
  tape.backward(out);

  auto eval = [&](const std::vector<Mat>& vals) {
    Tape t2;
    std::vector<int> ids2;
    for (const auto& v : vals) ids2.push_back(t2.input(v));
    return t2.value(build(t2, ids2))(0, 0);
  };

  const double h = 1e-6;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    const Mat analytic = tape.has_grad(static_cast<int>(ids[li]))
                             ? tape.grad(ids[li])
                             : Mat::Zero(leaves[li].rows(), leaves[li].cols());
    for (Eigen::Index i = 0; i < leaves[li].rows(); ++i)
      for (Eigen::Index j = 0; j < leaves[li].cols(); ++j) {
        std::vector<Mat> vals = leaves;
        vals[li](i, j) += h;
        const double lp = eval(vals);
        vals[li](i, j) -= 2 * h;
        const double lm = eval(vals);
        const double fd = (lp - lm) / (2 * h);
        const double a = analytic(i, j);
        CHECK(std::abs(a - fd) <= tol * std::max(1.0, std::max(std::abs(a), std::abs(fd))));
      }
  }
}

}  // namespace

TEST_CASE("tape: matmul, add, sub, mul, scale gradients") {
  Rng rng(21);
  gradcheck({randn(rng, 3, 4), randn(rng, 4, 5)},
            [](Tape& t, const std::vector<int>& in) {
              return t.mean_sq(t.matmul(in[0], in[1]));
            });
  gradcheck({randn(rng, 3, 4), randn(rng, 3, 4)},
            [](Tape& t, const std::vector<int>& in) {
              return t.mean_sq(t.mul(t.add(in[0], in[1]), t.sub(in[0], in[1])));
            });
  gradcheck({randn(rng, 2, 3)}, [](Tape& t, const std::vector<int>& in) {
    return t.mean_sq(t.scale(in[0], -1.7));
  });
}

TEST_CASE("tape: broadcast and modulation gradients") {
  Rng rng(22);
  gradcheck({randn(rng, 4, 3), randn(rng, 1, 3)},
            [](Tape& t, const std::vector<int>& in) {
              return t.mean_sq(t.add_rowvec(in[0], in[1]));
            });
  gradcheck({randn(rng, 4, 3), randn(rng, 1, 3)},
            [](Tape& t, const std::vector<int>& in) {
              return t.mean_sq(t.mul_rowvec(in[0], in[1]));
            });
  gradcheck({randn(rng, 4, 3), randn(rng, 1, 3), randn(rng, 1, 3)},
            [](Tape& t, const std::vector<int>& in) {
              return t.mean_sq(t.row_affine(in[0], in[1], in[2]));
            });
}

TEST_CASE("tape: rmsnorm, gelu, sigmoid, exp gradients") {
  Rng rng(23);
  gradcheck({randn(rng, 4, 6)}, [](Tape& t, const std::vector<int>& in) {
    return t.mean_sq(t.rmsnorm_rows(in[0]));
  });
  gradcheck({randn(rng, 3, 5)}, [](Tape& t, const std::vector<int>& in) {
    return t.mean_sq(t.gelu(in[0]));
  });
  gradcheck({randn(rng, 3, 5)}, [](Tape& t, const std::vector<int>& in) {
    return t.mean_sq(t.sigmoid(in[0]));
  });
  gradcheck({randn(rng, 3, 5)}, [](Tape& t, const std::vector<int>& in) {
    return t.mean_sq(t.exp(in[0]));
  }, 1e-5);
}

TEST_CASE("tape: concat and slice gradients") {
  Rng rng(24);
  gradcheck({randn(rng, 2, 4), randn(rng, 3, 4)},
            [](Tape& t, const std::vector<int>& in) {
              const int cat = t.concat_rows({in[0], in[1]});
              return t.mean_sq(t.slice_rows(cat, 1, 3));
            });
  gradcheck({randn(rng, 3, 2), randn(rng, 3, 3)},
            [](Tape& t, const std::vector<int>& in) {
              const int cat = t.concat_cols({in[0], in[1]});
              return t.mean_sq(t.slice_cols(cat, 1, 3));
            });
}

TEST_CASE("tape: attention gradients") {
  Rng rng(25);
  gradcheck({randn(rng, 6, 4), randn(rng, 6, 4), randn(rng, 6, 4)},
            [](Tape& t, const std::vector<int>& in) {
              return t.mean_sq(t.attention(in[0], in[1], in[2], 3, 0.5));
            },
            1e-5);
}

TEST_CASE("tape: attention forward is bit-exactly equivariant under gauss permutation") {
  Rng rng(26);
  const int gl = 5, rest = 4, hd = 8;
  const Mat q = randn(rng, gl + rest, hd);
  const Mat k = randn(rng, gl + rest, hd);
  const Mat v = randn(rng, gl + rest, hd);

  Tape t1;
  const int o1 = t1.attention(t1.input(q), t1.input(k), t1.input(v), gl, 0.35);

  std::vector<int> perm{3, 0, 4, 2, 1};
  Mat qp = q, kp = k, vp = v;
  for (int i = 0; i < gl; ++i) {
    qp.row(i) = q.row(perm[static_cast<std::size_t>(i)]);
    kp.row(i) = k.row(perm[static_cast<std::size_t>(i)]);
    vp.row(i) = v.row(perm[static_cast<std::size_t>(i)]);
  }
  Tape t2;
  const int o2 = t2.attention(t2.input(qp), t2.input(kp), t2.input(vp), gl, 0.35);

  // permuted gauss rows move, the rest stay, all bit-exact
  for (int i = 0; i < gl; ++i)
    CHECK(t2.value(o2).row(i) == t1.value(o1).row(perm[static_cast<std::size_t>(i)]));
  for (int i = gl; i < gl + rest; ++i) CHECK(t2.value(o2).row(i) == t1.value(o1).row(i));
}

TEST_CASE("tape: duplicate tokens do not break the sorted accumulation") {
  Rng rng(27);
  Mat q = randn(rng, 6, 4), k = randn(rng, 6, 4), v = randn(rng, 6, 4);
  q.row(1) = q.row(0);
  k.row(1) = k.row(0);
  v.row(1) = v.row(0);  // identical gauss tokens
  Tape t;
  const int o = t.attention(t.input(q), t.input(k), t.input(v), 4, 0.5);
  CHECK(t.value(o).row(0) == t.value(o).row(1));
  CHECK(t.value(o).allFinite());
}

TEST_CASE("tape: linear layer on identity input passes the upstream gradient through") {
  Rng rng(28);
  const Mat w = randn(rng, 4, 4);
  Tape t;
  const int x = t.input(Mat::Identity(4, 4));
  const int wp = t.param("w", w);
  const int y = t.matmul(x, wp);
  t.backward(y);  // upstream gradient of ones
  CHECK(t.grad(wp) == Mat::Ones(4, 4));
}

TEST_CASE("tape: backward twice is an error") {
  Tape t;
  const int x = t.input(Mat::Ones(2, 2));
  const int y = t.mean_sq(x);
  t.backward(y);
  CHECK_THROWS_AS(t.backward(y), std::logic_error);
}

TEST_CASE("tape: param_grads reports zeros for untouched parameters") {
  Tape t;
  const Mat w = Mat::Ones(2, 3);
  t.param("unused", w);
  const int x = t.input(Mat::Ones(2, 2));
  t.backward(t.mean_sq(x));
  const auto grads = t.param_grads();
  REQUIRE(grads.size() == 1);
  CHECK(grads[0].first == "unused");
  CHECK(grads[0].second == Mat::Zero(2, 3));
}
