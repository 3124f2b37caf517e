#include <gtest/gtest.h>

#include <cmath>

#include "saliency/dataset.hpp"
#include "saliency/multilayer.hpp"
#include "support.hpp"

using namespace saliency;

namespace {

SaliencyMap make_map(std::size_t h, std::size_t w, std::vector<double> v, const std::string& layer = "l") {
  SaliencyMap m(h, w);
  m.values = std::move(v);
  m.layer = {layer, Side::Output};
  return m;
}

std::vector<AttachPoint> points(std::initializer_list<const char*> names) {
  std::vector<AttachPoint> out;
  for (const char* n : names) out.push_back({n, Side::Output});
  return out;
}

}  // namespace

TEST(Upsample, SameSizeIsIdentity) {
  const SaliencyMap m = make_map(2, 3, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(upsample(m, 2, 3).values, m.values);
}

TEST(Upsample, ConstantStaysConstant) {
  const SaliencyMap m = make_map(3, 3, std::vector<double>(9, 0.7));
  for (double v : upsample(m, 17, 11).values) EXPECT_EQ(v, 0.7);
}

TEST(Upsample, CentreOfCheckerboard) {
  const SaliencyMap m = make_map(2, 2, {0, 1, 1, 0});
  const SaliencyMap u = upsample(m, 3, 3);
  EXPECT_DOUBLE_EQ(u.at(1, 1), 0.5);
}

TEST(Upsample, PoolingGridAlignment) {
  // a 2x2 pooled cell maps back onto the centre of its 2x2 block
  const SaliencyMap m = make_map(2, 2, {0, 0, 0, 1});
  const SaliencyMap u = upsample(m, 4, 4);
  EXPECT_DOUBLE_EQ(u.at(3, 3), 1.0);
  EXPECT_DOUBLE_EQ(u.at(2, 2), 0.5625);
  EXPECT_DOUBLE_EQ(u.at(0, 0), 0.0);
}

TEST(Upsample, RejectsDownsampling) {
  EXPECT_THROW(upsample(make_map(4, 4, std::vector<double>(16)), 2, 8), std::invalid_argument);
}

TEST(Normalize, MinMaxAndConstant) {
  EXPECT_EQ(normalize_minmax(make_map(1, 3, {2, 4, 3})).values, (std::vector<double>{0, 1, 0.5}));
  EXPECT_EQ(normalize_minmax(make_map(1, 2, {5, 5})).values, (std::vector<double>{0, 0}));
}

TEST(Weights, LinearScheme) {
  const LayerWeights w = linear_interp_weights(points({"a", "b", "c", "d"}));
  const std::vector<double> expect{0.1, 0.2, 0.3, 0.4};
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(w.gamma[j].second, expect[j], 1e-15);
}

TEST(Weights, EmptyLayerListThrows) {
  EXPECT_THROW(uniform_weights({}), std::invalid_argument);
  const ModelGraph m = make_toy_model(2, 0);
  EXPECT_THROW(feature_spread_weights(m, {Tensor(m.input_shape), Tensor(m.input_shape)}, {}),
               std::invalid_argument);
}

TEST(Spread, HandExample) {
  EXPECT_DOUBLE_EQ(feature_spread({{1.0}, {3.0}}), 1.0);
}

TEST(Spread, IdenticalImagesFallBackToUniform) {
  const ModelGraph m = make_toy_model(2, 0);
  const Tensor x = fixtures::random_tensor(m.input_shape, 1, 0.3);
  const auto layers = points({"relu1", "relu2", "relu3"});
  const LayerWeights w = feature_spread_weights(m, {x, x, x}, layers);
  for (double r : w.raw) EXPECT_EQ(r, 0.0);
  for (const auto& [l, g] : w.gamma) EXPECT_DOUBLE_EQ(g, 1.0 / 3.0);
}

TEST(Spread, PositiveOnDistinctImages) {
  const ModelGraph m = make_toy_model(2, 3);
  const ShapesDataset ds = generate_shapes(10, 2, 4);
  const LayerWeights w = feature_spread_weights(m, ds.images, points({"relu1", "relu2", "relu3"}));
  for (double r : w.raw) EXPECT_GT(r, 0.0);
}

TEST(Probe, SeparableFeaturesAreLearned) {
  std::vector<std::vector<double>> f;
  std::vector<std::size_t> y;
  for (int i = 0; i < 40; ++i) {
    f.push_back({i % 2 ? 1.0 + 0.01 * i : -1.0 - 0.01 * i, 0.3});
    y.push_back(static_cast<std::size_t>(i % 2));
  }
  EXPECT_EQ(probe_accuracy(f, y, 2), 1.0);
}

TEST(Probe, RandomLabelsStayNearChance) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    std::mt19937_64 rng(s);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<std::vector<double>> f;
    std::vector<std::size_t> y;
    for (int i = 0; i < 200; ++i) {
      f.push_back({n(rng), n(rng)});
      y.push_back(static_cast<std::size_t>(i % 2));
    }
    const double acc = probe_accuracy(f, y, 2);
    EXPECT_GE(acc, 0.3);
    EXPECT_LE(acc, 0.7);
  }
}

TEST(Probe, SingleClassThrows) {
  EXPECT_THROW(probe_accuracy({{1.0}, {2.0}}, {0, 0}, 2), std::invalid_argument);
}

TEST(Combine, AdditiveAndProductOfIdenticalMaps) {
  const SaliencyMap a = make_map(2, 2, {0, 1, 2, 4}, "a"), b = make_map(2, 2, {0, 1, 2, 4}, "b");
  const auto layers = points({"a", "b"});
  const LayerWeights w = uniform_weights(layers);
  const CombinedMap add = combine({a, b}, w, CombineMode::Additive, 2, 2);
  const CombinedMap prod = combine({a, b}, w, CombineMode::Product, 2, 2);
  const std::vector<double> norm{0, 0.25, 0.5, 1};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(add.map.values[i], norm[i], 1e-15);
    EXPECT_NEAR(prod.map.values[i], norm[i], 1e-11);
  }
  EXPECT_EQ(add.provenance.size(), 2u);
}

TEST(Combine, ProductRejectsSignedMaps) {
  SaliencyMap a = make_map(1, 2, {-1, 1}, "a");
  a.is_signed = true;
  EXPECT_THROW(combine({a}, uniform_weights(points({"a"})), CombineMode::Product, 1, 2),
               std::invalid_argument);
  EXPECT_NO_THROW(combine({rectify(a)}, uniform_weights(points({"a"})), CombineMode::Product, 1, 2));
}

TEST(Combine, OutputInUnitInterval) {
  const ModelGraph m = make_toy_model(2, 5);
  const Tensor x = fixtures::random_tensor(m.input_shape, 6, 0.5);
  const auto layers = points({"relu1", "relu2", "relu3"});
  for (auto mode : {CombineMode::Additive, CombineMode::Product}) {
    const CombinedMap c =
        combined_saliency(m, x, 1, Method::LinearApprox, linear_interp_weights(layers), mode);
    EXPECT_EQ(c.map.height, 32u);
    for (double v : c.map.values) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Combine, MissingMapThrows) {
  EXPECT_THROW(combine({make_map(1, 1, {1}, "a")}, uniform_weights(points({"b"})),
                       CombineMode::Additive, 1, 1),
               std::invalid_argument);
}

TEST(Schemes, NamesRoundTrip) {
  for (auto s : {WeightScheme::FeatureSpread, WeightScheme::ProbeAccuracy, WeightScheme::LinearInterp,
                 WeightScheme::Uniform}) {
    EXPECT_EQ(parse_weight_scheme(to_string(s)), s);
  }
  EXPECT_EQ(parse_combine_mode("prod"), CombineMode::Product);
  EXPECT_THROW(parse_combine_mode("max"), std::invalid_argument);
}
