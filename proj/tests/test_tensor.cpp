#include <gtest/gtest.h>

#include <cmath>

#include "saliency/tensor.hpp"
#include "support.hpp"

using namespace saliency;

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), std::invalid_argument);
  EXPECT_NO_THROW(Tensor({2, 3}, std::vector<double>(6)));
}

TEST(Tensor, ReshapeKeepsStorage) {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor r = t.reshaped({3, 2});
  EXPECT_EQ(r.values(), t.values());
  EXPECT_THROW(t.reshaped({4, 2}), std::invalid_argument);
}

TEST(Tensor, ElementwiseShapeCheck) {
  Tensor a({2}, {1, 2}), b({2}, {3, 4}), c({3});
  EXPECT_EQ(elementwise(a, b, BinaryOp::Add).values(), (std::vector<double>{4, 6}));
  EXPECT_EQ(elementwise(a, b, BinaryOp::Mul).values(), (std::vector<double>{3, 8}));
  EXPECT_THROW(elementwise(a, c, BinaryOp::Add), std::invalid_argument);
}

TEST(Norms, SmallVector) {
  const std::vector<double> v{3, -4, 1};
  const Norms n = norms(v);
  EXPECT_DOUBLE_EQ(n.l2, std::sqrt(26.0));
  EXPECT_DOUBLE_EQ(n.maxabs, 4.0);
  EXPECT_DOUBLE_EQ(n.sum, 0.0);
  EXPECT_DOUBLE_EQ(n.possum, 4.0);
}

TEST(Norms, OuterProductFrobeniusIsProductOfNorms) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Tensor g = fixtures::random_tensor({5}, s), x = fixtures::random_tensor({7}, s + 100);
    double fro = 0.0;
    for (double a : g.data()) {
      for (double b : x.data()) fro += a * a * b * b;
    }
    EXPECT_NEAR(std::sqrt(fro), l2_norm(g.data()) * l2_norm(x.data()), 1e-12);
  }
}

TEST(Unfold, OneByOneIsReshape) {
  const Tensor x = fixtures::random_tensor({3, 4, 5}, 1);
  const Tensor u = unfold_patches(x, 1);
  EXPECT_EQ(u.shape(), (Shape{3, 20}));
  EXPECT_EQ(u.values(), x.values());
}

TEST(Unfold, CentreRowOfThreeByThreeIsTheInput) {
  const Tensor x = fixtures::random_tensor({1, 4, 4}, 2);
  const Tensor u = unfold_patches(x, 3);
  ASSERT_EQ(u.shape(), (Shape{9, 16}));
  for (std::size_t p = 0; p < 16; ++p) EXPECT_EQ(u[4 * 16 + p], x[p]);
}

TEST(Unfold, ZeroPaddingAtBorders) {
  const Tensor x({1, 3, 3}, 1.0);
  const Tensor u = unfold_patches(x, 3);
  // top-left location: kernel row 0 and kernel column 0 fall outside
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_EQ(u[(i * 3 + j) * 9 + 0], (i == 0 || j == 0) ? 0.0 : 1.0);
    }
  }
}

TEST(Unfold, MatmulMatchesDirectConvolution) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const std::size_t K = 2, Ko = 3, N = 3, H = 5, W = 4;
    const Tensor x = fixtures::random_tensor({K, H, W}, s);
    const Tensor w = fixtures::random_tensor({Ko, N * N * K}, s + 50);
    const Tensor y = matmul(w, unfold_patches(x, N));
    for (std::size_t o = 0; o < Ko; ++o) {
      for (std::size_t r = 0; r < H; ++r) {
        for (std::size_t c = 0; c < W; ++c) {
          double acc = 0.0;
          for (std::size_t k = 0; k < K; ++k) {
            for (int i = -1; i <= 1; ++i) {
              for (int j = -1; j <= 1; ++j) {
                const int rr = static_cast<int>(r) + i, cc = static_cast<int>(c) + j;
                if (rr < 0 || cc < 0 || rr >= static_cast<int>(H) || cc >= static_cast<int>(W)) continue;
                acc += w[o * N * N * K + (k * N + (i + 1)) * N + (j + 1)] *
                       x.at(k, static_cast<std::size_t>(rr), static_cast<std::size_t>(cc));
              }
            }
          }
          EXPECT_NEAR(y[o * H * W + r * W + c], acc, 1e-12);
        }
      }
    }
  }
}

TEST(Unfold, RejectsBadArguments) {
  EXPECT_THROW(unfold_patches(Tensor({4, 4}), 3), std::invalid_argument);
  EXPECT_THROW(unfold_patches(Tensor({1, 4, 4}), 2), std::invalid_argument);
  EXPECT_THROW(unfold_patches(Tensor({1, 4, 4}), 0), std::invalid_argument);
}

TEST(Matmul, ShapeCheck) {
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), std::invalid_argument);
  const Tensor a({2, 2}, {1, 2, 3, 4}), b({2, 1}, {1, 1});
  EXPECT_EQ(matmul(a, b).values(), (std::vector<double>{3, 7}));
}
