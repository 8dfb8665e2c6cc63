#include <gtest/gtest.h>

#include "grf/autodiff.hpp"
#include "oracles.hpp"

using namespace grf;

namespace {

// Checks d f / d leaf against central differences for every leaf entry.
void check_gradients(std::vector<Matrix> leaves, const std::function<ad::Var(ad::Tape&, std::vector<ad::Var>&)>& f) {
  auto value = [&](const std::vector<Matrix>& ls) {
    ad::Tape t;
    std::vector<ad::Var> vs;
    for (const Matrix& m : ls) vs.push_back(t.leaf(m));
    return f(t, vs).value()[0];
  };
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const Matrix& m : leaves) vars.push_back(tape.leaf(m));
  const ad::Var out = f(tape, vars);
  tape.backward(out);
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    const Matrix g = tape.grad(vars[l]);
    for (std::size_t i = 0; i < leaves[l].size(); ++i) {
      const double keep = leaves[l][i];
      leaves[l][i] = keep + 1e-6;
      const double fp = value(leaves);
      leaves[l][i] = keep - 1e-6;
      const double fm = value(leaves);
      leaves[l][i] = keep;
      const double fd = (fp - fm) / 2e-6;
      EXPECT_NEAR(g[i], fd, 1e-6 * std::max(1.0, std::abs(fd))) << "leaf " << l << " entry " << i;
    }
  }
}

}  // namespace

TEST(Autodiff, MatmulVariants) {
  Rng rng(1);
  const Matrix a = oracle::random_matrix(3, 4, rng), b = oracle::random_matrix(4, 2, rng),
               c = oracle::random_matrix(5, 2, rng), p = oracle::random_matrix(3, 3, rng);
  check_gradients({a, b, c}, [&](ad::Tape&, std::vector<ad::Var>& v) {
    const ad::Var ab = ad::matmul(v[0], v[1]);                  // 3 x 2
    const ad::Var abct = ad::matmul_nt(ab, v[2]);               // 3 x 5
    return ad::sum_squares(ad::lmul_const(p, abct));
  });
}

TEST(Autodiff, ElementwiseAndReductions) {
  Rng rng(2);
  const Matrix a = oracle::random_matrix(3, 4, rng), b = oracle::random_matrix(3, 4, rng),
               bias = oracle::random_matrix(1, 4, rng);
  check_gradients({a, b, bias}, [&](ad::Tape&, std::vector<ad::Var>& v) {
    const ad::Var pre = ad::add_row(ad::add(v[0], v[1]), v[2]);
    const ad::Var h = ad::hadamard(ad::elu(pre), ad::elu_prime(pre));
    const ad::Var s1 = ad::dot(h, v[0]);
    const ad::Var s2 = ad::sum_squares(h);
    const std::vector<std::pair<double, ad::Var>> terms{{0.5, s1}, {-1.5, s2}};
    return ad::linear_combination(terms, 3.0);
  });
}

TEST(Autodiff, ReusedNodesAccumulate) {
  ad::Tape t;
  const ad::Var x = t.leaf(Matrix{{2.0}});
  const ad::Var y = ad::hadamard(x, x);
  const ad::Var z = ad::add(y, x);
  t.backward(z);
  EXPECT_DOUBLE_EQ(t.grad(x)[0], 5.0);  // d(x^2 + x) = 2x + 1
  const ad::Var m = t.leaf(Matrix(2, 2));
  EXPECT_THROW(t.backward(m), ShapeError);
}
