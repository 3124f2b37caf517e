#pragma once

// Central finite-difference verification of the analytic gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "saliency/nn.hpp"

namespace saliency {

struct GradCheckEntry {
  std::string net;
  std::string layer;  // "input" for the input gradient
  std::size_t param = 0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  double step = 1e-5;
  std::vector<GradCheckEntry> entries;

  double max_rel_err() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.rel_err);
    return m;
  }
};

// Small random nets that together contain every layer kind. Biases and
// scales are perturbed away from their defaults so every path is exercised.
inline std::vector<ModelGraph> gradcheck_nets(std::uint64_t seed) {
  ModelGraph a;
  a.input_shape = {2, 6, 6};
  a.num_classes = 3;
  a.layers = {Layer::conv("conv1", 3, 2, 3),   Layer::bias("bias1", 3),
              Layer::scaling("scale1", 3),     Layer::relu("relu1"),
              Layer::maxpool("pool1"),         Layer::conv("conv2", 1, 3, 4),
              Layer::relu("relu2"),            Layer::global_avg_pool("gap"),
              Layer::fully_connected("fc", 4, 3)};
  ModelGraph b;
  b.input_shape = {1, 4, 4};
  b.num_classes = 2;
  b.layers = {Layer::conv("conv1", 3, 1, 2), Layer::relu("relu1"), Layer::maxpool("pool1"),
              Layer::flatten("flat"), Layer::fully_connected("fc", 8, 2)};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> jitter(0.0, 0.3);
  std::vector<ModelGraph> nets{a, b};
  for (auto& m : nets) {
    init_model(m, rng());
    for (auto& l : m.layers) {
      if (l.kind == LayerKind::Bias || l.kind == LayerKind::Scaling ||
          l.kind == LayerKind::FullyConnected) {
        for (double& v : l.params.back().data()) v += jitter(rng);
      }
    }
    m.validate();
  }
  return nets;
}

namespace detail {

// max |a - n| / max(|a|, |n|) over one tensor.
inline double tensor_rel_err(const Tensor& analytic, const std::vector<double>& numeric) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return scale > 0.0 ? diff / scale : diff;
}

}  // namespace detail

// Checks every parameter tensor and the input gradient of `model` under the
// cross-entropy loss at `label`.
inline std::vector<GradCheckEntry> gradcheck_model(const ModelGraph& model, const Tensor& input,
                                                   std::size_t label, const std::string& net,
                                                   double h = 1e-5) {
  const Tape tape = forward_backward(model, input, CrossEntropy{label});
  auto loss_at = [&](const ModelGraph& m, const Tensor& x) {
    return cross_entropy(forward(m, x).logits, label);
  };
  std::vector<GradCheckEntry> out;
  ModelGraph probe = model;
  for (std::size_t j = 0; j < model.layers.size(); ++j) {
    const Layer& l = model.layers[j];
    for (std::size_t p = 0; p < l.params.size(); ++p) {
      auto values = probe.layers[j].params[p].data();
      std::vector<double> numeric(values.size());
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double keep = values[i];
        values[i] = keep + h;
        const double up = loss_at(probe, input);
        values[i] = keep - h;
        const double down = loss_at(probe, input);
        values[i] = keep;
        numeric[i] = (up - down) / (2.0 * h);
      }
      out.push_back({net, l.name, p,
                     detail::tensor_rel_err(tape.param_grads.at(l.name)[p], numeric)});
    }
  }
  Tensor x = input;
  std::vector<double> numeric(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = loss_at(model, x);
    x[i] = keep - h;
    const double down = loss_at(model, x);
    x[i] = keep;
    numeric[i] = (up - down) / (2.0 * h);
  }
  out.push_back({net, "input", 0, detail::tensor_rel_err(tape.records.front().g_in, numeric)});
  return out;
}

inline GradCheckReport gradcheck(std::uint64_t seed, double h = 1e-5) {
  GradCheckReport report;
  report.step = h;
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> unit(0.0, 1.0);
  const auto nets = gradcheck_nets(seed);
  for (std::size_t n = 0; n < nets.size(); ++n) {
    Tensor x(nets[n].input_shape);
    for (double& v : x.data()) v = unit(rng);
    const std::size_t label = rng() % nets[n].num_classes;
    auto e = gradcheck_model(nets[n], x, label, "net" + std::to_string(n), h);
    report.entries.insert(report.entries.end(), e.begin(), e.end());
  }
  return report;
}

}  // namespace saliency
