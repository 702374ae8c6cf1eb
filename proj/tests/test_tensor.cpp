#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "cfsp/random.hpp"
#include "cfsp/tensor.hpp"

using namespace cfsp;

namespace {

template <Scalar T>
Matrix<T> random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix<T> m(r, c);
  for (auto& v : m.flat()) v = static_cast<T>(rng.uniform(-1.0, 1.0));
  return m;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Rng rng(1);
  const auto m = random_matrix<float>(3, 5, rng);
  EXPECT_EQ(matmul(MatrixF::identity(3), m), m);
}

TEST(Matmul, HandComputedProduct) {
  const MatrixF a(2, 2, std::vector<float>{1, 2, 3, 4});
  const MatrixF b(2, 1, std::vector<float>{5, 6});
  const auto c = matmul(a, b);
  ASSERT_EQ(c.rows(), 2u);
  ASSERT_EQ(c.cols(), 1u);
  EXPECT_EQ(c(0, 0), 17.0f);
  EXPECT_EQ(c(1, 0), 39.0f);
}

TEST(Matmul, ZeroAnnihilates) {
  Rng rng(2);
  const auto c = matmul(MatrixF(2, 3), random_matrix<float>(3, 4, rng));
  EXPECT_EQ(c, MatrixF(2, 4));
}

TEST(Matmul, DimensionMismatchThrowsShapeError) {
  try {
    (void)matmul(MatrixF(2, 3), MatrixF(4, 2));
    FAIL() << "expected a shape error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::shape);
  }
  EXPECT_THROW((void)matmul_bt(MatrixF(2, 3), MatrixF(2, 4)), Error);
  EXPECT_THROW((void)matmul_at(MatrixF(2, 3), MatrixF(3, 3)), Error);
}

TEST(Matmul, TransposedVariantsAgreeWithPlainProduct) {
  Rng rng(3);
  const auto a = random_matrix<double>(4, 6, rng);
  const auto b = random_matrix<double>(5, 6, rng);
  const auto want = matmul(a, transpose(b));
  const auto got = matmul_bt(a, b);
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got.flat()[i], want.flat()[i], 1e-12);
  const auto got_at = matmul_at(transpose(a), transpose(b));
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got_at.flat()[i], want.flat()[i], 1e-12);
}

TEST(Matmul, IdentityAndDistributivityOnRandomInstances) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = random_matrix<float>(8, 8, rng);
    const auto b = random_matrix<float>(8, 8, rng);
    const auto c = random_matrix<float>(8, 8, rng);
    const auto left = matmul(a, add(b, c));
    const auto right = add(matmul(a, b), matmul(a, c));
    for (std::size_t i = 0; i < left.size(); ++i) EXPECT_NEAR(left.flat()[i], right.flat()[i], 1e-5);
    const auto ai = matmul(a, MatrixF::identity(8));
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(ai.flat()[i], a.flat()[i], 1e-5);
  }
}

TEST(Kernels, PureAndBitReproducible) {
  Rng rng(5);
  const auto a = random_matrix<float>(7, 9, rng);
  const auto b = random_matrix<float>(9, 3, rng);
  const std::vector<float> gain(9, 1.5f);
  EXPECT_EQ(matmul(a, b), matmul(a, b));
  EXPECT_EQ(rms_norm(a, std::span<const float>(gain), 1e-5), rms_norm(a, std::span<const float>(gain), 1e-5));
  EXPECT_EQ(silu(a), silu(a));
  EXPECT_EQ(channel_l2_norms(a), channel_l2_norms(a));
}

TEST(Kernels, DoubleModeAgreesWithFloatMode) {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const auto a = random_matrix<float>(6, 10, rng);
    const auto b = random_matrix<float>(10, 4, rng);
    const auto cf = matmul(a, b);
    const auto cd = matmul(matrix_cast<double>(a), matrix_cast<double>(b));
    for (std::size_t i = 0; i < cf.size(); ++i) {
      const double ref = cd.flat()[i];
      EXPECT_LE(std::abs(cf.flat()[i] - ref), 1e-4 * std::max(1.0, std::abs(ref)));
    }
    const auto sf = silu(a);
    const auto sd = silu(matrix_cast<double>(a));
    for (std::size_t i = 0; i < sf.size(); ++i) EXPECT_NEAR(sf.flat()[i], sd.flat()[i], 1e-4);
  }
}

TEST(Silu, ScalarValues) {
  EXPECT_EQ(silu(0.0), 0.0);
  EXPECT_NEAR(silu(1.0), 1.0 / (1.0 + std::exp(-1.0)), 1e-12);
  EXPECT_NEAR(silu(1.0), 0.731059, 1e-6);
  EXPECT_NEAR(silu(20.0), 20.0, 1e-6);
}

TEST(Silu, GradientMatchesFiniteDifference) {
  for (double x : {-3.0, -0.5, 0.0, 0.7, 4.0}) {
    const double h = 1e-6;
    const double fd = (silu(x + h) - silu(x - h)) / (2 * h);
    EXPECT_NEAR(silu_grad(x), fd, 1e-8);
  }
}

TEST(RmsNorm, RowOfOnesIsFixed) {
  const MatrixD x(1, 5, std::vector<double>(5, 1.0));
  const std::vector<double> gain(5, 1.0);
  const auto y = rms_norm(x, std::span<const double>(gain), 1e-12);
  for (double v : y.flat()) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(RmsNorm, HandComputedRow) {
  const MatrixD x(1, 2, std::vector<double>{3, 4});
  const std::vector<double> gain{1, 1};
  const auto y = rms_norm(x, std::span<const double>(gain), 0.0);
  EXPECT_NEAR(y(0, 0), 3.0 / std::sqrt(12.5), 1e-12);
  EXPECT_NEAR(y(0, 1), 4.0 / std::sqrt(12.5), 1e-12);
  EXPECT_NEAR(y(0, 0), 0.8485, 1e-4);
  EXPECT_NEAR(y(0, 1), 1.1314, 1e-4);
}

TEST(RmsNorm, ZeroRowStaysZero) {
  const MatrixF x(2, 4);
  const std::vector<float> gain(4, 2.0f);
  const auto y = rms_norm(x, std::span<const float>(gain), 1e-5);
  for (float v : y.flat()) EXPECT_EQ(v, 0.0f);
}

TEST(CausalSoftmax, SingleEntry) {
  const auto p = causal_softmax_rows(MatrixD(1, 1, std::vector<double>{3.5}));
  EXPECT_EQ(p(0, 0), 1.0);
}

TEST(CausalSoftmax, EqualScoresGiveUniformPrefix) {
  const std::size_t t = 6;
  const auto p = causal_softmax_rows(MatrixD(t, t, std::vector<double>(t * t, 0.25)));
  for (std::size_t i = 0; i < t; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < t; ++j) {
      if (j <= i) {
        EXPECT_NEAR(p(i, j), 1.0 / static_cast<double>(i + 1), 1e-12);
      } else {
        EXPECT_EQ(p(i, j), 0.0);
      }
      sum += p(i, j);
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(CausalSoftmax, ShiftInvariant) {
  Rng rng(7);
  auto s = random_matrix<float>(5, 5, rng);
  auto shifted = s;
  for (auto& v : shifted.flat()) v += 1000.0f;
  // Shift the float inputs by an exactly representable amount so the test
  // measures the kernel, not the input rounding.
  for (std::size_t i = 0; i < s.size(); ++i) s.flat()[i] = shifted.flat()[i] - 1000.0f;
  const auto a = causal_softmax_rows(s);
  const auto b = causal_softmax_rows(shifted);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.flat()[i], b.flat()[i], 1e-6);
}

TEST(ChannelNorms, Examples) {
  EXPECT_EQ(channel_l2_norms(MatrixF(1, 2, std::vector<float>{3, 4})), (std::vector<double>{3, 4}));
  EXPECT_EQ(channel_l2_norms(MatrixF(2, 2, std::vector<float>{3, 0, 4, 0})), (std::vector<double>{5, 0}));
  EXPECT_EQ(channel_l2_norms(MatrixF(3, 4)), std::vector<double>(4, 0.0));
}

TEST(MacCounter, CountsProducts) {
  mac_counter = 0;
  (void)matmul(MatrixF(2, 3), MatrixF(3, 4));
  EXPECT_EQ(mac_counter, 24u);
  (void)matmul_bt(MatrixF(2, 3), MatrixF(5, 3));
  EXPECT_EQ(mac_counter, 24u + 30u);
}
