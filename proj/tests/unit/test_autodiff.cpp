#include <gtest/gtest.h>

#include "fsqat/fsqat.hpp"
#include "oracles.hpp"

using namespace fsqat;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  return detail::random_matrix(r, c, rng);
}

void expect_near(const Matrix& a, const Matrix& b, double tol) {
  ASSERT_EQ(a.rows, b.rows);
  ASSERT_EQ(a.cols, b.cols);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.data[i], b.data[i], tol) << "index " << i;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Matrix m = Matrix::from_rows({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(dense::matmul(Matrix::identity(2), m), m);
}

TEST(Matmul, HandCheckedProduct) {
  const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  const Matrix b = Matrix::from_rows({{1}, {1}});
  EXPECT_EQ(dense::matmul(a, b), Matrix::from_rows({{3}, {7}}));
}

TEST(Matmul, ShapeMismatchIsReported) {
  try {
    dense::matmul(Matrix(2, 3), Matrix(2, 3));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("2x3"), std::string::npos);
  }
}

TEST(Matmul, ValueAndGradientsMatchLoopOracle) {
  const Matrix a = random_matrix(3, 4, 1), b = random_matrix(4, 2, 2);
  Tape t;
  Var va = t.leaf(a), vb = t.leaf(b);
  Var prod = matmul(va, vb);
  expect_near(t.value(prod), oracle::matmul(a, b), 1e-14);
  t.backward(sum(prod));
  // d sum(AB)/dA = 1 * B^T, d/dB = A^T * 1
  const Matrix ones_a(3, 2, 1.0);
  expect_near(t.grad(va), oracle::matmul(ones_a, oracle::transpose(b)), 1e-14);
  expect_near(t.grad(vb), oracle::matmul(oracle::transpose(a), ones_a), 1e-14);
}

TEST(Matmul, TransposedVariantsAgreeWithPlainProduct) {
  const Matrix a = random_matrix(3, 4, 3), b = random_matrix(5, 4, 4), c = random_matrix(3, 5, 5);
  expect_near(dense::matmul_nt(a, b), oracle::matmul(a, oracle::transpose(b)), 1e-14);
  expect_near(dense::matmul_tn(a, c), oracle::matmul(oracle::transpose(a), c), 1e-14);
}

TEST(RowSoftmax, UniformRow) {
  const Matrix s = row_softmax(Matrix::from_rows({{0, 0, 0}}));
  for (double v : s.data) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(RowSoftmax, LargeLogitsDoNotOverflow) {
  const Matrix s = row_softmax(Matrix::from_rows({{1000, 0}}));
  EXPECT_TRUE(s.all_finite());
  EXPECT_NEAR(s.data[0], 1.0, 1e-15);
  EXPECT_NEAR(s.data[1], 0.0, 1e-15);
}

TEST(RowSoftmax, KnownValues) {
  const Matrix s = row_softmax(Matrix::from_rows({{1, 2, 3}}));
  EXPECT_NEAR(s.data[0], 0.09003, 1e-5);
  EXPECT_NEAR(s.data[1], 0.24473, 1e-5);
  EXPECT_NEAR(s.data[2], 0.66524, 1e-5);
}

TEST(RowSoftmax, RowsSumToOne) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix s = row_softmax(detail::random_matrix(4, 7, rng, -20, 20));
    for (std::size_t i = 0; i < s.rows; ++i) {
      double z = 0.0;
      for (double v : s.row(i)) z += v;
      EXPECT_NEAR(z, 1.0, 1e-12);
    }
  }
}

TEST(RowSoftmax, MatchesDirectExponentials) {
  const Matrix a = random_matrix(3, 5, 12);
  expect_near(row_softmax(a), oracle::softmax_rows(a), 1e-15);
}

TEST(LayerNorm, ConstantRowGivesZeros) {
  const Matrix out = layer_norm(Matrix::from_rows({{5, 5, 5}}), Matrix(1, 3, 1.0), Matrix(1, 3));
  for (double v : out.data) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, TwoPointRowUsesPopulationVariance) {
  const Matrix out = layer_norm(Matrix::from_rows({{1, 3}}), Matrix(1, 2, 1.0), Matrix(1, 2));
  // variance 1, so the stabilizer only shifts the result by ~5e-6
  EXPECT_NEAR(out.data[0], -1.0, 1e-5);
  EXPECT_NEAR(out.data[1], 1.0, 1e-5);
}

TEST(LayerNorm, GainAndBiasSetOutputMoments) {
  const Matrix a = random_matrix(1, 16, 13);
  const Matrix out = layer_norm(a, Matrix(1, 16, 2.0), Matrix(1, 16, 1.0));
  double mean = 0.0, var = 0.0;
  for (double v : out.data) mean += v;
  mean /= 16.0;
  for (double v : out.data) var += (v - mean) * (v - mean);
  var /= 16.0;
  EXPECT_NEAR(mean, 1.0, 1e-9);
  EXPECT_NEAR(std::sqrt(var), 2.0, 1e-3);
}

TEST(LayerNorm, RowsAreStandardized) {
  Rng rng(14);
  const Matrix out = layer_norm(detail::random_matrix(6, 9, rng, -3, 3), Matrix(1, 9, 1.0), Matrix(1, 9));
  for (std::size_t i = 0; i < out.rows; ++i) {
    double mean = 0.0, var = 0.0;
    for (double v : out.row(i)) mean += v;
    mean /= 9.0;
    for (double v : out.row(i)) var += (v - mean) * (v - mean);
    EXPECT_NEAR(mean, 0.0, 1e-9);
    EXPECT_NEAR(var / 9.0, 1.0, 1e-3);
  }
}

TEST(LayerNorm, MatchesOracle) {
  const Matrix a = random_matrix(4, 6, 15), g = random_matrix(1, 6, 16), b = random_matrix(1, 6, 17);
  expect_near(layer_norm(a, g, b), oracle::normalize_rows(a, g, b), 1e-14);
}

TEST(Sigmoid, KnownValues) {
  EXPECT_EQ(sigmoid(0.0), 0.5);
  EXPECT_GT(sigmoid(-10000.0), 0.0);
  EXPECT_LT(sigmoid(10000.0), 1.0);
  EXPECT_NEAR(sigmoid(7.0711), 0.99915, 1e-5);
}

TEST(Sigmoid, ClampedRegionHasZeroGradient) {
  Tape t;
  Var x = t.leaf(Matrix::from_rows({{-100.0, 0.0, 100.0}}));
  t.backward(sum(sigmoid(x)));
  EXPECT_EQ(t.grad(x).data[0], 0.0);
  EXPECT_DOUBLE_EQ(t.grad(x).data[1], 0.25);
  EXPECT_EQ(t.grad(x).data[2], 0.0);
}

TEST(CosineRows, KnownValues) {
  const Matrix w = Matrix::from_rows({{1, 1}});
  EXPECT_NEAR(cosine_rows(Matrix::from_rows({{1, 1}}), w).data[0], 1.0, 1e-8);
  EXPECT_EQ(cosine_rows(Matrix::from_rows({{1, -1}}), w).data[0], 0.0);
  EXPECT_NEAR(cosine_rows(Matrix::from_rows({{1, 0}}), w).data[0], 0.70711, 1e-5);
}

TEST(CosineRows, ZeroRowIsStabilized) {
  const Matrix c = cosine_rows(Matrix(1, 3), Matrix::from_rows({{1, 2, 3}}));
  EXPECT_EQ(c.data[0], 0.0);
  Tape t;
  Var a = t.leaf(Matrix(2, 3));
  Var w = t.leaf(Matrix::from_rows({{1, 2, 3}}));
  t.backward(sum(cosine_rows(a, w)));
  EXPECT_TRUE(t.grad(a).all_finite());
  EXPECT_TRUE(t.grad(w).all_finite());
}

TEST(Backward, SumGivesOnes) {
  Tape t;
  Var w = t.leaf(random_matrix(3, 4, 20));
  t.backward(sum(w));
  for (double g : t.grad(w).data) EXPECT_EQ(g, 1.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  Tape t;
  Var w = t.leaf(Matrix(2, 2));
  EXPECT_THROW(t.backward(w), ShapeError);
}

TEST(Backward, RejectsSecondPassAndForeignNodes) {
  Tape t, other;
  Var w = t.leaf(Matrix(1, 1, 2.0));
  Var foreign = other.leaf(Matrix(1, 1));
  EXPECT_THROW(t.backward(foreign), std::invalid_argument);
  t.backward(sum(w));
  EXPECT_THROW(t.backward(sum(w)), std::logic_error);
}

TEST(Backward, GradientUnavailableBeforeBackward) {
  Tape t;
  Var w = t.leaf(Matrix(1, 1));
  EXPECT_THROW(t.grad(w), std::logic_error);
}

TEST(Backward, ConstantsReceiveNoGradient) {
  Tape t;
  Var c = t.constant(Matrix(1, 2, 1.0));
  Var w = t.leaf(Matrix(1, 2, 3.0));
  EXPECT_FALSE(t.requires_grad(c));
  t.backward(sum(add(c, w)));
  EXPECT_TRUE(t.grad(c).empty());
  EXPECT_EQ(t.grad(w).data[0], 1.0);
}

TEST(Backward, FanOutAccumulates) {
  Tape t;
  Var w = t.leaf(Matrix(1, 1, 3.0));
  t.backward(sum(add(scale(w, 2.0), matmul(w, w))));
  EXPECT_DOUBLE_EQ(t.grad(w).data[0], 2.0 + 6.0);
}

TEST(Primitives, AreBitDeterministic) {
  Rng r1(99), r2(99);
  auto c1 = random_composition(r1);
  auto c2 = random_composition(r2);
  auto run = [](const CompositionCase& c) {
    Tape t;
    std::vector<Var> leaves;
    for (const auto& p : c.point) leaves.push_back(t.leaf(p.value));
    Var l = c.loss(t, leaves);
    t.backward(l);
    std::vector<Matrix> out{t.value(l)};
    for (Var v : leaves) out.push_back(t.grad(v));
    return out;
  };
  EXPECT_EQ(run(c1), run(c2));
}

TEST(Primitives, FiniteInputsGiveFiniteOutputs) {
  Rng rng(7);
  for (int i = 0; i < 100; ++i) {
    auto c = random_composition(rng);
    Tape t;
    std::vector<Var> leaves;
    for (const auto& p : c.point) leaves.push_back(t.leaf(p.value));
    Var l = c.loss(t, leaves);
    for (std::size_t id = 0; id < t.size(); ++id) ASSERT_TRUE(t.value_at(id).all_finite());
    t.backward(l);
    for (Var v : leaves) ASSERT_TRUE(t.grad(v).all_finite());
  }
}
