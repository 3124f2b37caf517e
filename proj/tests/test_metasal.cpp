#include <gtest/gtest.h>

#include <cmath>

#include "saliency/eval.hpp"
#include "saliency/metasal.hpp"
#include "support.hpp"

using namespace saliency;

namespace {

double quad_loss(double theta) { return 0.5 * theta * theta; }

}  // namespace

TEST(Meta, ZeroEpsilonIsExact) {
  const ModelGraph m = make_toy_model(2, 1);
  const Tensor x = fixtures::random_tensor(m.input_shape, 2, 0.5);
  for (Method method : kAllMethods) {
    const AttachPoint at{method == Method::NormGradReal ? "conv2" : "relu2", Side::Output};
    EXPECT_EQ(meta_saliency(m, x, 1, method, at, {0.0, MetaDirection::Descent}).values,
              method_saliency(m, x, 1, method, at).values);
  }
}

TEST(Meta, TinyEpsilonIsContinuous) {
  const ModelGraph m = make_toy_model(2, 3);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Tensor x = fixtures::random_tensor(m.input_shape, s, 0.5);
    const AttachPoint at{"relu2", Side::Output};
    const SaliencyMap a = method_saliency(m, x, 0, Method::SelectiveNormGrad, at);
    const SaliencyMap b = meta_saliency(m, x, 0, Method::SelectiveNormGrad, at, {1e-6, MetaDirection::Descent});
    EXPECT_GT(spearman(a, b), 0.999);
  }
}

TEST(Meta, RejectsBadEpsilon) {
  const ModelGraph m = make_toy_model(2, 1);
  const Tensor x(m.input_shape);
  EXPECT_THROW(meta_step(m, x, 0, {-1e-3, MetaDirection::Descent}), std::invalid_argument);
  EXPECT_THROW(meta_step(m, x, 0, {std::nan(""), MetaDirection::Descent}), std::invalid_argument);
  EXPECT_THROW(meta_step(m, x, 5, {1e-3, MetaDirection::Descent}), std::invalid_argument);
}

TEST(Meta, AscentAndDescentAreSymmetric) {
  const ModelGraph m = make_toy_model(3, 4);
  const Tensor x = fixtures::random_tensor(m.input_shape, 5, 0.5);
  const ModelGraph d = meta_step(m, x, 2, {1e-3, MetaDirection::Descent});
  const ModelGraph a = meta_step(m, x, 2, {1e-3, MetaDirection::Ascent});
  for (std::size_t j = 0; j < m.layers.size(); ++j) {
    for (std::size_t p = 0; p < m.layers[j].params.size(); ++p) {
      for (std::size_t i = 0; i < m.layers[j].params[p].size(); ++i) {
        EXPECT_NEAR(d.layers[j].params[p][i] + a.layers[j].params[p][i],
                    2.0 * m.layers[j].params[p][i], 1e-15);
      }
    }
  }
}

TEST(Taylor, QuadraticClosedForm) {
  // l = theta^2 / 2 has gradient theta; the residual is eps^2 theta^2 / 2
  const double theta = 1.7;
  for (double eps : {0.1, 0.01, 0.001}) {
    const double moved = quad_loss(theta - eps * theta);
    const double linear = quad_loss(theta) - eps * theta * theta;
    EXPECT_NEAR(std::abs(moved - linear), eps * eps * theta * theta / 2.0, 1e-15);
  }
}

TEST(Taylor, ZeroEpsilonGivesZero) {
  const ModelGraph m = fixtures::smooth_net(0);
  EXPECT_EQ(taylor_residual(m, fixtures::random_tensor(m.input_shape, 1), 0, {0.0})[0], 0.0);
}

TEST(Taylor, SecondOrderOnSmoothNets) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const ModelGraph m = fixtures::smooth_net(s);
    const auto r = taylor_residual(m, fixtures::random_tensor(m.input_shape, 100 + s), s % 3,
                                   {1e-2, 5e-3, 2.5e-3, 1.25e-3});
    for (std::size_t k = 0; k + 1 < r.size(); ++k) {
      EXPECT_GE(r[k] / r[k + 1], 3.4);
      EXPECT_LE(r[k] / r[k + 1], 4.6);
    }
  }
}

TEST(Meta, HessianVectorCancellation) {
  // grad of L(theta) = l(theta - eps grad l(theta)) by central differences
  // matches grad l at the stepped parameters to relative error O(eps)
  const double eps = 1e-3, h = 1e-5;
  const ModelGraph m = fixtures::smooth_net(7);
  const Tensor x = fixtures::random_tensor(m.input_shape, 8);
  const std::size_t cls = 1;
  auto L = [&](const ModelGraph& theta) {
    const Tape t = forward_backward(theta, x, CrossEntropy{cls});
    return cross_entropy(forward(sgd_step(theta, t.param_grads, eps), x).logits, cls);
  };
  const Tape base = forward_backward(m, x, CrossEntropy{cls});
  const ModelGraph stepped = sgd_step(m, base.param_grads, eps);
  const ParamGrads at_step = forward_backward(stepped, x, CrossEntropy{cls}).param_grads;
  double diff = 0.0, scale = 0.0;
  ModelGraph probe = m;
  for (std::size_t j = 0; j < m.layers.size(); ++j) {
    for (std::size_t p = 0; p < m.layers[j].params.size(); ++p) {
      for (std::size_t i = 0; i < m.layers[j].params[p].size(); ++i) {
        double& v = probe.layers[j].params[p][i];
        const double keep = v;
        v = keep + h;
        const double up = L(probe);
        v = keep - h;
        const double down = L(probe);
        v = keep;
        const double fd = (up - down) / (2.0 * h);
        const double an = at_step.at(m.layers[j].name)[p][i];
        diff = std::max(diff, std::abs(fd - an));
        scale = std::max(scale, std::abs(fd));
      }
    }
  }
  EXPECT_LE(diff / scale, 10.0 * eps);
}
