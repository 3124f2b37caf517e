#include <gtest/gtest.h>

#include <cmath>

#include "saliency/aggregate.hpp"
#include "support.hpp"

using namespace saliency;

namespace {

// Frobenius norm of (optionally positive-filtered) g_u x_u^T, formed explicitly.
double brute_norm(const ContribField& f, std::size_t u, bool positive) {
  const std::size_t HW = f.locations();
  double s = 0.0;
  for (std::size_t a = 0; a < f.grads.dim(0); ++a) {
    for (std::size_t b = 0; b < f.patches.dim(0); ++b) {
      double e = f.grads[a * HW + u] * f.patches[b * HW + u];
      if (positive) e = std::max(e, 0.0);
      s += e * e;
    }
  }
  return std::sqrt(s);
}

}  // namespace

TEST(Aggregate, VectorAggregators) {
  // one location, K = 3
  const ContribField f = vector_field(Tensor({3, 1, 1}, {3.0, -4.0, 1.0}));
  EXPECT_DOUBLE_EQ(aggregate(f, Aggregator::Sum).values[0], 0.0);
  EXPECT_DOUBLE_EQ(aggregate(f, Aggregator::MaxAbs).values[0], 4.0);
  EXPECT_DOUBLE_EQ(aggregate(f, Aggregator::Norm).values[0], std::sqrt(26.0));
  EXPECT_DOUBLE_EQ(aggregate(f, Aggregator::PosFilterNorm).values[0], std::sqrt(10.0));
  EXPECT_DOUBLE_EQ(aggregate(f, Aggregator::PosFilterSum).values[0], 4.0);
  EXPECT_TRUE(aggregate(f, Aggregator::Sum).is_signed);
  EXPECT_FALSE(aggregate(f, Aggregator::Norm).is_signed);
}

TEST(Aggregate, FactoredNormMatchesMaterialisedMatrix) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Tensor x = fixtures::random_tensor({3, 4, 5}, s), g = fixtures::random_tensor({2, 4, 5}, s + 20);
    const ContribField f = conv_field(x, g, s % 2 ? 3 : 1);
    const SaliencyMap n = aggregate(f, Aggregator::Norm), p = aggregate(f, Aggregator::PosFilterNorm);
    for (std::size_t u = 0; u < f.locations(); ++u) {
      EXPECT_NEAR(n.values[u], brute_norm(f, u, false), 1e-12);
      EXPECT_NEAR(p.values[u], brute_norm(f, u, true), 1e-12);
    }
  }
}

TEST(Aggregate, FactoredRejectsVectorAggregators) {
  const ContribField f = conv_field(Tensor({1, 2, 2}), Tensor({1, 2, 2}), 1);
  EXPECT_THROW(aggregate(f, Aggregator::Sum), std::invalid_argument);
  EXPECT_THROW(aggregate(f, Aggregator::MaxAbs), std::invalid_argument);
}

TEST(Methods, NamesRoundTrip) {
  for (Method m : kAllMethods) EXPECT_EQ(parse_method(to_string(m)), m);
  EXPECT_THROW(parse_method("guided"), std::invalid_argument);
}

TEST(Methods, SelectiveNormGradIsNonnegative) {
  const ModelGraph m = make_toy_model(3, 5);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Tensor x = fixtures::random_tensor(m.input_shape, s, 0.5);
    for (const char* l : {"relu1", "conv2", "relu3"}) {
      for (double v : method_saliency(m, x, s % 3, Method::SelectiveNormGrad, {l, Side::Output}).values) {
        EXPECT_GE(v, 0.0);
      }
    }
  }
}

TEST(Methods, CamClosedFormAtGapInput) {
  // with GAP then FC, the class-c LinearApprox map at the GAP input is
  // (1/HW) sum_k w_ck x_k
  const ModelGraph m = make_toy_model(3, 6);
  const Tensor x = fixtures::random_tensor(m.input_shape, 7, 0.5);
  const Tape t = forward_backward(m, x, ClassLogit{2});
  const Tensor& a = t.record("relu3").x_out;
  const Tensor& w = m.layer("fc").params[0];
  const std::size_t K = a.dim(0), HW = a.dim(1) * a.dim(2);
  const SaliencyMap la = saliency_from_tape(t, m, Method::LinearApprox, {"relu3", Side::Output});
  for (std::size_t u = 0; u < HW; ++u) {
    double cam = 0.0;
    for (std::size_t k = 0; k < K; ++k) cam += w[2 * K + k] * a[k * HW + u];
    EXPECT_NEAR(la.values[u], cam / static_cast<double>(HW), 1e-12);
  }
}

TEST(Methods, GradcamEqualsRectifiedLinearApproxAtGapInput) {
  const ModelGraph m = make_toy_model(2, 8);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Tape t = forward_backward(m, fixtures::random_tensor(m.input_shape, s, 0.5), ClassLogit{s % 2});
    const SaliencyMap gc = gradcam_from_tape(t, {"relu3", Side::Output});
    const SaliencyMap la = saliency_from_tape(t, m, Method::LinearApprox, {"relu3", Side::Output});
    for (std::size_t u = 0; u < gc.size(); ++u) EXPECT_NEAR(gc.values[u], std::max(la.values[u], 0.0), 1e-12);
  }
}

TEST(Methods, GradcamDiffersWhereGradientVaries) {
  // away from the GAP input g is not spatially constant, so averaging it
  // loses information and the two maps disagree
  const ModelGraph m = make_toy_model(2, 9);
  const Tape t = forward_backward(m, fixtures::random_tensor(m.input_shape, 1, 0.5), ClassLogit{0});
  const SaliencyMap gc = gradcam_from_tape(t, {"relu1", Side::Output});
  const SaliencyMap la = saliency_from_tape(t, m, Method::LinearApprox, {"relu1", Side::Output});
  double diff = 0.0;
  for (std::size_t u = 0; u < gc.size(); ++u) diff = std::max(diff, std::abs(gc.values[u] - std::max(la.values[u], 0.0)));
  EXPECT_GT(diff, 1e-6);
}

TEST(Methods, PresetsMatchExplicitPipelines) {
  const ModelGraph m = make_toy_model(2, 10);
  const Tensor x = fixtures::random_tensor(m.input_shape, 2, 0.5);
  const Tape t = forward_backward(m, x, ClassLogit{1});
  const AttachPoint at{"relu2", Side::Output};
  const auto& r = t.record("relu2");
  const SaliencyMap g = method_saliency(m, x, 1, Method::Gradient, at);
  const std::size_t K = r.g_out.dim(0), HW = g.size();
  for (std::size_t u = 0; u < HW; ++u) {
    double mx = 0.0, gn = 0.0, xn = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      mx = std::max(mx, std::abs(r.g_out[k * HW + u]));
      gn += r.g_out[k * HW + u] * r.g_out[k * HW + u];
      xn += r.x_out[k * HW + u] * r.x_out[k * HW + u];
    }
    EXPECT_EQ(g.values[u], mx);
    EXPECT_NEAR(method_saliency(m, x, 1, Method::NormGrad, at).values[u], std::sqrt(gn) * std::sqrt(xn), 1e-12);
  }
  EXPECT_THROW(method_saliency(m, x, 2, Method::Gradient, at), std::invalid_argument);
}
