#pragma once

// Fixtures shared by the unit tests and the acceptance run.

#include <cstdint>
#include <random>

#include "saliency/saliency.hpp"

namespace saliency::fixtures {

// No ReLU or pooling, so the loss is a smooth (polynomial then softmax)
// function of the parameters.
inline ModelGraph smooth_net(std::uint64_t seed) {
  ModelGraph m;
  m.input_shape = {2, 6, 6};
  m.num_classes = 3;
  m.layers = {Layer::conv("conv1", 3, 2, 4), Layer::scaling("scale1", 4), Layer::bias("bias1", 4),
              Layer::conv("conv2", 3, 4, 4), Layer::global_avg_pool("gap"),
              Layer::fully_connected("fc", 4, 3)};
  init_model(m, seed);
  m.validate();
  return m;
}

inline Tensor random_tensor(const Shape& shape, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, sd);
  Tensor t(shape);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace saliency::fixtures
