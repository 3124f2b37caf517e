#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "saliency/gradcheck.hpp"
#include "saliency/nn.hpp"
#include "support.hpp"

using namespace saliency;

namespace {

ModelGraph fc_only(std::size_t in, std::size_t out, std::uint64_t seed) {
  ModelGraph m;
  m.input_shape = {in};
  m.num_classes = out;
  m.layers = {Layer::fully_connected("fc", in, out)};
  init_model(m, seed);
  m.validate();
  return m;
}

}  // namespace

TEST(Forward, ReluAndPool) {
  const Tensor x({1, 2, 2}, {-1.0, 2.0, 0.5, -3.0});
  EXPECT_EQ(layer_forward(Layer::relu("r"), x).values(), (std::vector<double>{0, 2, 0.5, 0}));
  EXPECT_EQ(layer_forward(Layer::maxpool("p"), x).values(), (std::vector<double>{2.0}));
  EXPECT_EQ(layer_forward(Layer::global_avg_pool("g"), x).values(), (std::vector<double>{-0.375}));
}

TEST(Forward, StraightLineOracle) {
  // conv(1x1, 1->1, w=2) -> bias(-1) -> relu -> gap -> fc(1->2)
  ModelGraph m;
  m.input_shape = {1, 2, 2};
  m.num_classes = 2;
  m.layers = {Layer::conv("c", 1, 1, 1), Layer::bias("b", 1), Layer::relu("r"),
              Layer::global_avg_pool("g"), Layer::fully_connected("fc", 1, 2)};
  m.layers[0].params[0][0] = 2.0;
  m.layers[1].params[0][0] = -1.0;
  m.layers[4].params[0] = Tensor({2, 1}, {1.0, -3.0});
  m.layers[4].params[1] = Tensor({2}, {0.5, 0.0});
  const Tensor x({1, 2, 2}, {0.0, 1.0, 2.0, 3.0});
  // 2x - 1 = -1, 1, 3, 5 -> relu 0, 1, 3, 5 -> mean 2.25
  const Tensor logits = forward(m, x).logits;
  EXPECT_DOUBLE_EQ(logits[0], 2.75);
  EXPECT_DOUBLE_EQ(logits[1], -6.75);
}

TEST(Forward, RejectsWrongInputShape) {
  const ModelGraph m = make_toy_model(2, 0);
  EXPECT_THROW(forward(m, Tensor({3, 16, 16})), std::invalid_argument);
}

TEST(Backward, LinearModelGradientIsWeightRow) {
  const ModelGraph m = fc_only(4, 3, 1);
  const Tensor x = fixtures::random_tensor({4}, 2);
  const Tape t = forward_backward(m, x, ClassLogit{2});
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(t.records[0].g_in[i], m.layers[0].params[0][2 * 4 + i]);
}

TEST(Backward, ZeroInputZeroConvGradient) {
  ModelGraph m;
  m.input_shape = {2, 4, 4};
  m.num_classes = 3;
  m.layers = {Layer::conv("c", 3, 2, 4), Layer::global_avg_pool("g"), Layer::fully_connected("fc", 4, 3)};
  init_model(m, 0);
  const Tape t = forward_backward(m, Tensor({2, 4, 4}), CrossEntropy{1});
  for (double v : t.param_grads.at("c")[0].data()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, FiniteDifferencesEveryLayerKind) {
  std::set<LayerKind> seen;
  for (std::uint64_t s = 0; s < 20; ++s) {
    for (const auto& net : gradcheck_nets(s)) {
      for (const auto& l : net.layers) seen.insert(l.kind);
    }
    const GradCheckReport r = gradcheck(s);
    EXPECT_LT(r.max_rel_err(), 1e-6) << "seed " << s;
  }
  EXPECT_EQ(seen.size(), 8u);
}

TEST(Backward, MissingObjectiveClassThrows) {
  const ModelGraph m = fc_only(2, 2, 0);
  EXPECT_THROW(forward_backward(m, Tensor({2}), ClassLogit{2}), std::invalid_argument);
}

TEST(Tape, ChainConsistency) {
  const ModelGraph m = make_toy_model(3, 4);
  const Tape t = forward_backward(m, fixtures::random_tensor(m.input_shape, 5), CrossEntropy{0});
  for (std::size_t j = 0; j + 1 < t.records.size(); ++j) {
    EXPECT_EQ(t.records[j].x_out, t.records[j + 1].x_in);
    EXPECT_EQ(t.records[j].g_out, t.records[j + 1].g_in);
  }
  for (const auto& r : t.records) {
    EXPECT_EQ(r.x_in.shape(), r.g_in.shape());
    EXPECT_EQ(r.x_out.shape(), r.g_out.shape());
  }
}

TEST(Tape, GradientAtGapInputIsSpatiallyConstant) {
  const ModelGraph m = make_toy_model(2, 7);
  const Tape t = forward_backward(m, fixtures::random_tensor(m.input_shape, 8), ClassLogit{1});
  const Tensor& g = t.record("relu3").g_out;
  const std::size_t HW = g.dim(1) * g.dim(2);
  for (std::size_t k = 0; k < g.dim(0); ++k) {
    for (std::size_t u = 1; u < HW; ++u) EXPECT_NEAR(g[k * HW + u], g[k * HW], 1e-12);
  }
}

TEST(Pool, TiesGoToFirstElement) {
  const Tensor x({1, 2, 2}, {1.0, 1.0, 1.0, 1.0});
  std::vector<Tensor> grads;
  const Tensor gi = layer_backward(Layer::maxpool("p"), x, Tensor({1, 1, 1}, {1.0}), grads);
  EXPECT_EQ(gi.values(), (std::vector<double>{1, 0, 0, 0}));
}

TEST(Relu, DerivativeAtZeroIsZero) {
  std::vector<Tensor> grads;
  const Tensor gi = layer_backward(Layer::relu("r"), Tensor({2}, {0.0, 1.0}), Tensor({2}, {1.0, 1.0}), grads);
  EXPECT_EQ(gi.values(), (std::vector<double>{0, 1}));
}

TEST(Sgd, ZeroRateAndZeroGradientAreNoOps) {
  const ModelGraph m = make_toy_model(2, 1);
  const Tape t = forward_backward(m, fixtures::random_tensor(m.input_shape, 2), CrossEntropy{0});
  EXPECT_EQ(sgd_step(m, t.param_grads, 0.0), m);
  ParamGrads zero = t.param_grads;
  for (auto& [name, ts] : zero) {
    for (auto& g : ts) g = Tensor::zeros_like(g);
  }
  EXPECT_EQ(sgd_step(m, zero, 1.0), m);
}

TEST(Sgd, SmallStepDecreasesConvexLoss) {
  const ModelGraph m = fc_only(3, 2, 9);
  const Tensor x = fixtures::random_tensor({3}, 10);
  const Tape t = forward_backward(m, x, CrossEntropy{1});
  const ModelGraph next = sgd_step(m, t.param_grads, 1e-2);
  EXPECT_LT(cross_entropy(forward(next, x).logits, 1), t.loss);
  EXPECT_NE(next, m);
}

TEST(Model, ValidateRejectsInconsistentGraphs) {
  ModelGraph m = make_toy_model(2, 0);
  m.num_classes = 3;
  EXPECT_THROW(m.validate(), std::invalid_argument);
  m = make_toy_model(2, 0);
  m.layers[2].name = "conv1";
  EXPECT_THROW(m.validate(), std::invalid_argument);
}

TEST(Model, IdentityConvPassesInputThrough) {
  const Tensor x = fixtures::random_tensor({3, 5, 5}, 3);
  for (std::size_t n : {1u, 3u, 5u}) EXPECT_EQ(layer_forward(identity_conv("id", 3, n), x), x);
}
