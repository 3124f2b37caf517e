#pragma once

// Chain-topology CNN with a recording forward pass and exact reverse-mode
// gradients at every layer boundary.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <unordered_set>
#include <variant>
#include <vector>

#include "saliency/tensor.hpp"

namespace saliency {

enum class LayerKind {
  Conv,
  Bias,
  Scaling,
  ReLU,
  MaxPool,
  GlobalAvgPool,
  FullyConnected,
  Flatten,
};

inline std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Bias: return "bias";
    case LayerKind::Scaling: return "scaling";
    case LayerKind::ReLU: return "relu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::GlobalAvgPool: return "gap";
    case LayerKind::FullyConnected: return "fc";
    case LayerKind::Flatten: return "flatten";
  }
  return "?";
}

inline LayerKind layer_kind_from_string(std::string_view s) {
  for (auto k : {LayerKind::Conv, LayerKind::Bias, LayerKind::Scaling,
                 LayerKind::ReLU, LayerKind::MaxPool, LayerKind::GlobalAvgPool,
                 LayerKind::FullyConnected, LayerKind::Flatten}) {
    if (to_string(k) == s) return k;
  }
  throw std::invalid_argument("unknown layer kind '" + std::string(s) + "'");
}

// One layer of the chain. Parameter layout:
//   Conv:           {W}     W is K_out x (N*N*K_in), columns ordered as unfold_patches rows
//   Bias / Scaling: {b} / {alpha}, length K
//   FullyConnected: {W, b} W is out x in
struct Layer {
  LayerKind kind = LayerKind::ReLU;
  std::string name;
  std::size_t kernel = 0;  // Conv only; MaxPool window is fixed at 2
  std::size_t in = 0;      // Conv K_in, FC inputs, Bias/Scaling channels
  std::size_t out = 0;     // Conv K_out, FC outputs
  std::vector<Tensor> params;

  bool has_params() const noexcept { return !params.empty(); }

  // Number of inputs feeding one output unit; used for initialisation.
  std::size_t fan_in() const noexcept {
    switch (kind) {
      case LayerKind::Conv: return kernel * kernel * in;
      case LayerKind::FullyConnected: return in;
      default: return 1;
    }
  }

  static Layer conv(std::string name, std::size_t kernel, std::size_t k_in,
                    std::size_t k_out) {
    if (kernel == 0 || kernel % 2 == 0) {
      throw std::invalid_argument("conv '" + name + "': kernel must be odd");
    }
    Layer l{LayerKind::Conv, std::move(name), kernel, k_in, k_out, {}};
    l.params.emplace_back(Shape{k_out, kernel * kernel * k_in});
    return l;
  }
  static Layer bias(std::string name, std::size_t channels) {
    Layer l{LayerKind::Bias, std::move(name), 0, channels, channels, {}};
    l.params.emplace_back(Shape{channels}, 0.0);
    return l;
  }
  static Layer scaling(std::string name, std::size_t channels) {
    Layer l{LayerKind::Scaling, std::move(name), 0, channels, channels, {}};
    l.params.emplace_back(Shape{channels}, 1.0);
    return l;
  }
  static Layer relu(std::string name) {
    return Layer{LayerKind::ReLU, std::move(name), 0, 0, 0, {}};
  }
  static Layer maxpool(std::string name) {
    return Layer{LayerKind::MaxPool, std::move(name), 2, 0, 0, {}};
  }
  static Layer global_avg_pool(std::string name) {
    return Layer{LayerKind::GlobalAvgPool, std::move(name), 0, 0, 0, {}};
  }
  static Layer flatten(std::string name) {
    return Layer{LayerKind::Flatten, std::move(name), 0, 0, 0, {}};
  }
  static Layer fully_connected(std::string name, std::size_t in,
                               std::size_t out) {
    Layer l{LayerKind::FullyConnected, std::move(name), 0, in, out, {}};
    l.params.emplace_back(Shape{out, in});
    l.params.emplace_back(Shape{out});
    return l;
  }

  friend bool operator==(const Layer&, const Layer&) = default;
};

// Kronecker-delta N x N convolution: passes its input through unchanged.
inline Layer identity_conv(std::string name, std::size_t channels,
                           std::size_t kernel) {
  Layer l = Layer::conv(std::move(name), kernel, channels, channels);
  const std::size_t centre = (kernel / 2) * kernel + kernel / 2;
  const std::size_t cols = kernel * kernel * channels;
  for (std::size_t k = 0; k < channels; ++k) {
    l.params[0][k * cols + k * kernel * kernel + centre] = 1.0;
  }
  return l;
}

// Shape produced by `layer` when fed `in`; throws on incompatibility.
inline Shape layer_output_shape(const Layer& layer, const Shape& in) {
  auto fail = [&](const std::string& why) -> Shape {
    throw std::invalid_argument("layer '" + layer.name + "' (" +
                                std::string(to_string(layer.kind)) +
                                "): input " + shape_str(in) + " " + why);
  };
  switch (layer.kind) {
    case LayerKind::Conv:
      if (in.size() != 3 || in[0] != layer.in) return fail("needs K_in channels");
      return {layer.out, in[1], in[2]};
    case LayerKind::Bias:
    case LayerKind::Scaling:
      if (in.size() != 3 || in[0] != layer.in) return fail("channel mismatch");
      return in;
    case LayerKind::ReLU:
      return in;
    case LayerKind::MaxPool:
      if (in.size() != 3 || in[1] < 2 || in[2] < 2) return fail("too small to pool");
      return {in[0], in[1] / 2, in[2] / 2};
    case LayerKind::GlobalAvgPool:
      if (in.size() != 3) return fail("is not spatial");
      return {in[0]};
    case LayerKind::Flatten:
      return {shape_numel(in)};
    case LayerKind::FullyConnected:
      if (in.size() != 1 || in[0] != layer.in) return fail("has wrong length");
      return {layer.out};
  }
  return fail("unknown kind");
}

// L = head o layer_j o ... o layer_0, applied to a single image.
struct ModelGraph {
  Shape input_shape;
  std::size_t num_classes = 0;
  std::vector<Layer> layers;

  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].name == name) return i;
    }
    throw std::invalid_argument("no layer named '" + std::string(name) + "'");
  }
  bool contains(std::string_view name) const {
    for (const auto& l : layers) {
      if (l.name == name) return true;
    }
    return false;
  }
  const Layer& layer(std::string_view name) const { return layers[index_of(name)]; }

  // Activation shapes at every boundary: shapes[0] is the input,
  // shapes[j + 1] is the output of layer j.
  std::vector<Shape> boundary_shapes() const {
    std::vector<Shape> shapes{input_shape};
    for (const auto& l : layers) shapes.push_back(layer_output_shape(l, shapes.back()));
    return shapes;
  }

  void validate() const {
    std::unordered_set<std::string> names;
    for (const auto& l : layers) {
      if (l.name.empty()) throw std::invalid_argument("layer with empty name");
      if (!names.insert(l.name).second) {
        throw std::invalid_argument("duplicate layer name '" + l.name + "'");
      }
    }
    const auto shapes = boundary_shapes();
    if (shapes.back() != Shape{num_classes}) {
      throw std::invalid_argument("model output " + shape_str(shapes.back()) +
                                  " does not match num_classes " +
                                  std::to_string(num_classes));
    }
  }

  friend bool operator==(const ModelGraph&, const ModelGraph&) = default;
};

// Parameter gradients keyed by layer name, parallel to Layer::params.
using ParamGrads = std::map<std::string, std::vector<Tensor>>;

struct LayerRecord {
  Tensor x_in;
  Tensor x_out;
  Tensor g_in;   // dL/dx_in
  Tensor g_out;  // dL/dx_out
};

struct Tape {
  std::vector<std::string> names;
  std::vector<LayerRecord> records;
  ParamGrads param_grads;
  Tensor logits;
  double loss = 0.0;
  bool has_gradients = false;

  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) return i;
    }
    throw std::invalid_argument("tape has no layer named '" + std::string(name) + "'");
  }
  const LayerRecord& record(std::string_view name) const {
    return records[index_of(name)];
  }
};

// Differentiate the raw logit of one class.
struct ClassLogit {
  std::size_t cls = 0;
};
// Softmax cross-entropy against a label.
struct CrossEntropy {
  std::size_t label = 0;
};
using Objective = std::variant<ClassLogit, CrossEntropy>;

namespace detail {

inline Tensor conv_forward(const Layer& l, const Tensor& x) {
  const std::size_t Ki = l.in, Ko = l.out, N = l.kernel;
  const std::size_t H = x.dim(1), W = x.dim(2);
  const auto pad = static_cast<std::ptrdiff_t>(N / 2);
  const auto& w = l.params[0];
  const std::size_t cols = N * N * Ki;
  Tensor y({Ko, H, W});
  for (std::size_t ko = 0; ko < Ko; ++ko) {
    for (std::size_t ki = 0; ki < Ki; ++ki) {
      for (std::size_t i = 0; i < N; ++i) {
        const auto dy = static_cast<std::ptrdiff_t>(i) - pad;
        const std::size_t y0 = dy < 0 ? static_cast<std::size_t>(-dy) : 0;
        const std::size_t y1 = dy > 0 ? H - static_cast<std::size_t>(dy) : H;
        for (std::size_t j = 0; j < N; ++j) {
          const auto dx = static_cast<std::ptrdiff_t>(j) - pad;
          const std::size_t x0 = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
          const std::size_t x1 = dx > 0 ? W - static_cast<std::size_t>(dx) : W;
          const double wv = w[ko * cols + (ki * N + i) * N + j];
          for (std::size_t r = y0; r < y1; ++r) {
            double* orow = y.row(ko, r);
            const double* irow = x.row(ki, static_cast<std::size_t>(static_cast<std::ptrdiff_t>(r) + dy));
            for (std::size_t c = x0; c < x1; ++c) {
              orow[c] += wv * irow[static_cast<std::ptrdiff_t>(c) + dx];
            }
          }
        }
      }
    }
  }
  return y;
}

// Accumulates dW into `dw` and returns dL/dx.
inline Tensor conv_backward(const Layer& l, const Tensor& x, const Tensor& g,
                            Tensor& dw) {
  const std::size_t Ki = l.in, Ko = l.out, N = l.kernel;
  const std::size_t H = x.dim(1), W = x.dim(2);
  const auto pad = static_cast<std::ptrdiff_t>(N / 2);
  const auto& w = l.params[0];
  const std::size_t cols = N * N * Ki;
  Tensor dx(x.shape());
  for (std::size_t ko = 0; ko < Ko; ++ko) {
    for (std::size_t ki = 0; ki < Ki; ++ki) {
      for (std::size_t i = 0; i < N; ++i) {
        const auto oy = static_cast<std::ptrdiff_t>(i) - pad;
        const std::size_t y0 = oy < 0 ? static_cast<std::size_t>(-oy) : 0;
        const std::size_t y1 = oy > 0 ? H - static_cast<std::size_t>(oy) : H;
        for (std::size_t j = 0; j < N; ++j) {
          const auto ox = static_cast<std::ptrdiff_t>(j) - pad;
          const std::size_t x0 = ox < 0 ? static_cast<std::size_t>(-ox) : 0;
          const std::size_t x1 = ox > 0 ? W - static_cast<std::size_t>(ox) : W;
          const std::size_t widx = ko * cols + (ki * N + i) * N + j;
          const double wv = w[widx];
          double acc = 0.0;
          for (std::size_t r = y0; r < y1; ++r) {
            const double* grow = g.row(ko, r);
            const auto sr = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(r) + oy);
            const double* irow = x.row(ki, sr);
            double* drow = dx.row(ki, sr);
            for (std::size_t c = x0; c < x1; ++c) {
              const auto sc = static_cast<std::ptrdiff_t>(c) + ox;
              acc += grow[c] * irow[sc];
              drow[sc] += wv * grow[c];
            }
          }
          dw[widx] += acc;
        }
      }
    }
  }
  return dx;
}

// Index within the input of the first maximal element of each 2x2 window.
inline std::size_t pool_argmax(const Tensor& x, std::size_t k, std::size_t oy,
                               std::size_t ox) {
  const std::size_t W = x.dim(2);
  std::size_t best = (k * x.dim(1) + 2 * oy) * W + 2 * ox;
  double best_v = x[best];
  for (std::size_t dy = 0; dy < 2; ++dy) {
    for (std::size_t dx = 0; dx < 2; ++dx) {
      const std::size_t idx = (k * x.dim(1) + 2 * oy + dy) * W + 2 * ox + dx;
      if (x[idx] > best_v) {
        best_v = x[idx];
        best = idx;
      }
    }
  }
  return best;
}

}  // namespace detail

inline Tensor layer_forward(const Layer& l, const Tensor& x) {
  const Shape out_shape = layer_output_shape(l, x.shape());
  switch (l.kind) {
    case LayerKind::Conv:
      return detail::conv_forward(l, x);
    case LayerKind::Bias:
    case LayerKind::Scaling: {
      Tensor y = x;
      const std::size_t HW = x.dim(1) * x.dim(2);
      const auto& p = l.params[0];
      for (std::size_t k = 0; k < l.in; ++k) {
        for (std::size_t u = 0; u < HW; ++u) {
          double& v = y[k * HW + u];
          v = l.kind == LayerKind::Bias ? v + p[k] : p[k] * v;
        }
      }
      return y;
    }
    case LayerKind::ReLU: {
      Tensor y = x;
      for (double& v : y.data()) v = v > 0.0 ? v : 0.0;
      return y;
    }
    case LayerKind::MaxPool: {
      Tensor y(out_shape);
      for (std::size_t k = 0; k < out_shape[0]; ++k) {
        for (std::size_t oy = 0; oy < out_shape[1]; ++oy) {
          for (std::size_t ox = 0; ox < out_shape[2]; ++ox) {
            y.at(k, oy, ox) = x[detail::pool_argmax(x, k, oy, ox)];
          }
        }
      }
      return y;
    }
    case LayerKind::GlobalAvgPool: {
      Tensor y(out_shape);
      const std::size_t HW = x.dim(1) * x.dim(2);
      for (std::size_t k = 0; k < out_shape[0]; ++k) {
        double s = 0.0;
        for (std::size_t u = 0; u < HW; ++u) s += x[k * HW + u];
        y[k] = s / static_cast<double>(HW);
      }
      return y;
    }
    case LayerKind::Flatten:
      return x.reshaped(out_shape);
    case LayerKind::FullyConnected: {
      Tensor y = l.params[1];
      const auto& w = l.params[0];
      for (std::size_t o = 0; o < l.out; ++o) {
        double s = 0.0;
        for (std::size_t i = 0; i < l.in; ++i) s += w[o * l.in + i] * x[i];
        y[o] += s;
      }
      return y;
    }
  }
  throw std::logic_error("layer_forward: unhandled kind");
}

// Returns dL/dx and fills `grads` (sized like l.params) for parameterised layers.
inline Tensor layer_backward(const Layer& l, const Tensor& x, const Tensor& g,
                             std::vector<Tensor>& grads) {
  grads.clear();
  for (const auto& p : l.params) grads.push_back(Tensor::zeros_like(p));
  switch (l.kind) {
    case LayerKind::Conv:
      return detail::conv_backward(l, x, g, grads[0]);
    case LayerKind::Bias:
    case LayerKind::Scaling: {
      const std::size_t HW = x.dim(1) * x.dim(2);
      const auto& p = l.params[0];
      Tensor dx = g;
      for (std::size_t k = 0; k < l.in; ++k) {
        double acc = 0.0;
        for (std::size_t u = 0; u < HW; ++u) {
          const std::size_t idx = k * HW + u;
          if (l.kind == LayerKind::Bias) {
            acc += g[idx];
          } else {
            acc += g[idx] * x[idx];
            dx[idx] = p[k] * g[idx];
          }
        }
        grads[0][k] = acc;
      }
      return dx;
    }
    case LayerKind::ReLU: {
      Tensor dx = g;
      for (std::size_t i = 0; i < dx.size(); ++i) {
        if (!(x[i] > 0.0)) dx[i] = 0.0;
      }
      return dx;
    }
    case LayerKind::MaxPool: {
      Tensor dx(x.shape());
      for (std::size_t k = 0; k < g.dim(0); ++k) {
        for (std::size_t oy = 0; oy < g.dim(1); ++oy) {
          for (std::size_t ox = 0; ox < g.dim(2); ++ox) {
            dx[detail::pool_argmax(x, k, oy, ox)] += g.at(k, oy, ox);
          }
        }
      }
      return dx;
    }
    case LayerKind::GlobalAvgPool: {
      Tensor dx(x.shape());
      const std::size_t HW = x.dim(1) * x.dim(2);
      for (std::size_t k = 0; k < x.dim(0); ++k) {
        const double v = g[k] / static_cast<double>(HW);
        for (std::size_t u = 0; u < HW; ++u) dx[k * HW + u] = v;
      }
      return dx;
    }
    case LayerKind::Flatten:
      return g.reshaped(x.shape());
    case LayerKind::FullyConnected: {
      Tensor dx(x.shape());
      const auto& w = l.params[0];
      for (std::size_t o = 0; o < l.out; ++o) {
        const double go = g[o];
        for (std::size_t i = 0; i < l.in; ++i) {
          grads[0][o * l.in + i] = go * x[i];
          dx[i] += w[o * l.in + i] * go;
        }
        grads[1][o] = go;
      }
      return dx;
    }
  }
  throw std::logic_error("layer_backward: unhandled kind");
}

inline Tape forward(const ModelGraph& model, const Tensor& input) {
  if (input.shape() != model.input_shape) {
    throw std::invalid_argument("forward: input " + shape_str(input.shape()) +
                                " does not match model input " +
                                shape_str(model.input_shape));
  }
  Tape tape;
  tape.names.reserve(model.layers.size());
  tape.records.reserve(model.layers.size());
  Tensor x = input;
  for (const auto& layer : model.layers) {
    LayerRecord rec;
    rec.x_in = x;
    rec.x_out = layer_forward(layer, x);
    x = rec.x_out;
    tape.names.push_back(layer.name);
    tape.records.push_back(std::move(rec));
  }
  tape.logits = std::move(x);
  return tape;
}

inline double log_sum_exp(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline double cross_entropy(const Tensor& logits, std::size_t label) {
  return log_sum_exp(logits.data()) - logits[label];
}

// Objective value and its gradient w.r.t. the logits.
inline std::pair<double, Tensor> objective_and_grad(const Tensor& logits,
                                                    const Objective& objective) {
  Tensor g = Tensor::zeros_like(logits);
  return std::visit(
      [&](const auto& obj) -> std::pair<double, Tensor> {
        using T = std::decay_t<decltype(obj)>;
        if constexpr (std::is_same_v<T, ClassLogit>) {
          if (obj.cls >= logits.size()) {
            throw std::invalid_argument("class index " + std::to_string(obj.cls) +
                                        " out of range");
          }
          g[obj.cls] = 1.0;
          return {logits[obj.cls], std::move(g)};
        } else {
          if (obj.label >= logits.size()) {
            throw std::invalid_argument("label " + std::to_string(obj.label) +
                                        " out of range");
          }
          const double lse = log_sum_exp(logits.data());
          for (std::size_t i = 0; i < logits.size(); ++i) {
            g[i] = std::exp(logits[i] - lse);
          }
          g[obj.label] -= 1.0;
          return {lse - logits[obj.label], std::move(g)};
        }
      },
      objective);
}

inline Tape backward(Tape tape, const ModelGraph& model,
                     const Objective& objective) {
  if (tape.records.size() != model.layers.size()) {
    throw std::logic_error("backward: tape was not produced by this model");
  }
  auto [loss, g] = objective_and_grad(tape.logits, objective);
  tape.loss = loss;
  tape.param_grads.clear();
  for (std::size_t j = model.layers.size(); j-- > 0;) {
    const Layer& layer = model.layers[j];
    LayerRecord& rec = tape.records[j];
    rec.g_out = g;
    std::vector<Tensor> grads;
    rec.g_in = layer_backward(layer, rec.x_in, rec.g_out, grads);
    if (!grads.empty()) tape.param_grads[layer.name] = std::move(grads);
    g = rec.g_in;
  }
  tape.has_gradients = true;
  return tape;
}

inline Tape forward_backward(const ModelGraph& model, const Tensor& input,
                             const Objective& objective) {
  return backward(forward(model, input), model, objective);
}

// theta' = theta - lr * grad for every parameter named in `grads`; returns a
// new model.
inline ModelGraph sgd_step(const ModelGraph& model, const ParamGrads& grads,
                           double lr) {
  ModelGraph next = model;
  if (lr == 0.0) return next;
  for (auto& layer : next.layers) {
    auto it = grads.find(layer.name);
    if (it == grads.end()) continue;
    if (it->second.size() != layer.params.size()) {
      throw std::invalid_argument("sgd_step: gradient count mismatch for '" +
                                  layer.name + "'");
    }
    for (std::size_t p = 0; p < layer.params.size(); ++p) {
      require_same_shape(layer.params[p], it->second[p], "sgd_step");
      auto dst = layer.params[p].data();
      auto src = it->second[p].data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] -= lr * src[i];
    }
  }
  return next;
}

// He-normal weights, zero biases, unit scales.
inline void init_layer(Layer& layer, std::mt19937_64& rng) {
  switch (layer.kind) {
    case LayerKind::Conv:
    case LayerKind::FullyConnected: {
      std::normal_distribution<double> dist(
          0.0, std::sqrt(2.0 / static_cast<double>(layer.fan_in())));
      for (double& v : layer.params[0].data()) v = dist(rng);
      if (layer.params.size() > 1) {
        for (double& v : layer.params[1].data()) v = 0.0;
      }
      break;
    }
    case LayerKind::Bias:
      for (double& v : layer.params[0].data()) v = 0.0;
      break;
    case LayerKind::Scaling:
      for (double& v : layer.params[0].data()) v = 1.0;
      break;
    default:
      break;
  }
}

inline void init_model(ModelGraph& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& layer : model.layers) init_layer(layer, rng);
}

// Three conv stages with bias/ReLU, a scaling layer before the last ReLU,
// then global average pooling and a linear classifier.
inline ModelGraph make_toy_model(std::size_t num_classes, std::uint64_t seed,
                                 std::size_t channels = 3,
                                 std::size_t image_size = 32) {
  ModelGraph m;
  m.input_shape = {channels, image_size, image_size};
  m.num_classes = num_classes;
  m.layers = {
      Layer::conv("conv1", 3, channels, 8),  Layer::bias("bias1", 8),
      Layer::relu("relu1"),                  Layer::maxpool("pool1"),
      Layer::conv("conv2", 3, 8, 16),        Layer::bias("bias2", 16),
      Layer::relu("relu2"),                  Layer::maxpool("pool2"),
      Layer::conv("conv3", 3, 16, 16),       Layer::scaling("scale3", 16),
      Layer::bias("bias3", 16),              Layer::relu("relu3"),
      Layer::global_avg_pool("gap"),         Layer::fully_connected("fc", 16, num_classes),
  };
  init_model(m, seed);
  m.validate();
  return m;
}

inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

inline std::size_t argmin(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] < v[best]) best = i;
  }
  return best;
}

}  // namespace saliency
