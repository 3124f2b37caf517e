#pragma once

// Meta-saliency: take one inner SGD step of rate 2*epsilon on the
// cross-entropy at the explained class, then run any base method on the
// updated weights.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "saliency/aggregate.hpp"
#include "saliency/nn.hpp"

namespace saliency {

enum class MetaDirection { Descent, Ascent };

struct MetaConfig {
  double epsilon = 0.0;
  MetaDirection direction = MetaDirection::Descent;
};

inline double squared_norm(const ParamGrads& grads) {
  double s = 0.0;
  for (const auto& [name, ts] : grads) {
    for (const auto& t : ts) {
      for (double v : t.data()) s += v * v;
    }
  }
  return s;
}

// theta' = theta - 2 eps grad (descent) or theta + 2 eps grad (ascent).
inline ModelGraph meta_step(const ModelGraph& model, const Tensor& input,
                            std::size_t cls, const MetaConfig& cfg) {
  if (!std::isfinite(cfg.epsilon) || cfg.epsilon < 0.0) {
    throw std::invalid_argument("meta-saliency: epsilon must be finite and >= 0");
  }
  check_class(model, cls);
  if (cfg.epsilon == 0.0) return model;
  const Tape tape = forward_backward(model, input, CrossEntropy{cls});
  const double lr = 2.0 * cfg.epsilon;
  return sgd_step(model, tape.param_grads,
                  cfg.direction == MetaDirection::Descent ? lr : -lr);
}

inline SaliencyMap meta_saliency(const ModelGraph& model, const Tensor& input,
                                 std::size_t cls, Method method,
                                 const AttachPoint& attach, const MetaConfig& cfg) {
  if (cfg.epsilon == 0.0) {
    check_class(model, cls);
    return method_saliency(model, input, cls, method, attach);
  }
  return method_saliency(meta_step(model, input, cls, cfg), input, cls, method, attach);
}

// |l(theta - eps g) - (l(theta) - eps ||g||^2)| for each epsilon, with l the
// cross-entropy at `cls` and g its parameter gradient.
inline std::vector<double> taylor_residual(const ModelGraph& model,
                                           const Tensor& input, std::size_t cls,
                                           const std::vector<double>& epsilons) {
  check_class(model, cls);
  const Tape tape = forward_backward(model, input, CrossEntropy{cls});
  const double base = tape.loss;
  const double gg = squared_norm(tape.param_grads);
  std::vector<double> out;
  out.reserve(epsilons.size());
  for (double eps : epsilons) {
    if (eps == 0.0) {
      out.push_back(0.0);
      continue;
    }
    const ModelGraph stepped = sgd_step(model, tape.param_grads, eps);
    const double moved = cross_entropy(forward(stepped, input).logits, cls);
    out.push_back(std::abs(moved - (base - eps * gg)));
  }
  return out;
}

}  // namespace saliency
