#pragma once

// Combining saliency maps taken at several layers into a single map at input
// resolution, with per-layer weights from one of four schemes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "saliency/aggregate.hpp"
#include "saliency/extract.hpp"
#include "saliency/nn.hpp"

namespace saliency {

// Bilinear resampling on pixel centres: target pixel t samples source
// coordinate (t + 0.5) * src / dst - 0.5, clamped to the border. Only
// upsampling is allowed.
inline SaliencyMap upsample(const SaliencyMap& map, std::size_t height,
                            std::size_t width) {
  if (height < map.height || width < map.width) {
    throw std::invalid_argument("upsample: target " + std::to_string(height) +
                                "x" + std::to_string(width) +
                                " is smaller than source " +
                                std::to_string(map.height) + "x" +
                                std::to_string(map.width));
  }
  if (map.height == 0 || map.width == 0) {
    throw std::invalid_argument("upsample: empty map");
  }
  if (height == map.height && width == map.width) return map;

  auto coord = [](std::size_t dst, std::size_t src_n, std::size_t dst_n) {
    const double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(src_n) /
                         static_cast<double>(dst_n) - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(src_n - 1));
  };

  SaliencyMap out = map;
  out.height = height;
  out.width = width;
  out.values.assign(height * width, 0.0);
  for (std::size_t r = 0; r < height; ++r) {
    const double sy = coord(r, map.height, height);
    const auto y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, map.height - 1);
    const double ty = sy - static_cast<double>(y0);
    for (std::size_t c = 0; c < width; ++c) {
      const double sx = coord(c, map.width, width);
      const auto x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, map.width - 1);
      const double tx = sx - static_cast<double>(x0);
      const double a = map.at(y0, x0), b = map.at(y0, x1);
      const double cc = map.at(y1, x0), d = map.at(y1, x1);
      const double top = a + tx * (b - a);
      const double bottom = cc + tx * (d - cc);
      out.at(r, c) = top + ty * (bottom - top);
    }
  }
  return out;
}

// (v - min) / (max - min); a constant map becomes all zeros.
inline SaliencyMap normalize_minmax(const SaliencyMap& map) {
  SaliencyMap out = map;
  if (map.values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(map.values.begin(), map.values.end());
  const double lo_v = *lo, range = *hi - *lo;
  for (double& v : out.values) v = range > 0.0 ? (v - lo_v) / range : 0.0;
  out.is_signed = false;
  return out;
}

// Positive part; turns a signed map into a nonnegative one.
inline SaliencyMap rectify(const SaliencyMap& map) {
  SaliencyMap out = map;
  for (double& v : out.values) v = std::max(v, 0.0);
  out.is_signed = false;
  return out;
}

enum class WeightScheme { FeatureSpread, ProbeAccuracy, LinearInterp, Uniform };

inline std::string_view to_string(WeightScheme s) {
  switch (s) {
    case WeightScheme::FeatureSpread: return "spread";
    case WeightScheme::ProbeAccuracy: return "accuracy";
    case WeightScheme::LinearInterp: return "linear";
    case WeightScheme::Uniform: return "uniform";
  }
  return "?";
}

inline WeightScheme parse_weight_scheme(std::string_view s) {
  for (auto w : {WeightScheme::FeatureSpread, WeightScheme::ProbeAccuracy,
                 WeightScheme::LinearInterp, WeightScheme::Uniform}) {
    if (to_string(w) == s) return w;
  }
  throw std::invalid_argument("unknown weighting scheme '" + std::string(s) + "'");
}

// Normalised per-layer weights in network order, keyed by attach label.
struct LayerWeights {
  WeightScheme scheme = WeightScheme::Uniform;
  std::vector<std::pair<std::string, double>> gamma;
  std::vector<double> raw;  // scores before normalisation

  double weight(std::string_view label) const {
    for (const auto& [name, g] : gamma) {
      if (name == label) return g;
    }
    throw std::invalid_argument("no weight for layer '" + std::string(label) + "'");
  }
};

inline LayerWeights normalized_weights(const std::vector<AttachPoint>& layers,
                                       std::vector<double> scores,
                                       WeightScheme scheme) {
  if (layers.empty()) throw std::invalid_argument("weights: empty layer list");
  LayerWeights w;
  w.scheme = scheme;
  w.raw = scores;
  double total = 0.0;
  for (double s : scores) {
    if (!(s >= 0.0) || !std::isfinite(s)) {
      throw std::invalid_argument("weights: layer scores must be finite and nonnegative");
    }
    total += s;
  }
  const double J = static_cast<double>(layers.size());
  for (std::size_t j = 0; j < layers.size(); ++j) {
    // All-zero scores fall back to uniform weights.
    w.gamma.emplace_back(layers[j].label(), total > 0.0 ? scores[j] / total : 1.0 / J);
  }
  return w;
}

inline LayerWeights uniform_weights(const std::vector<AttachPoint>& layers) {
  return normalized_weights(layers, std::vector<double>(layers.size(), 1.0),
                            WeightScheme::Uniform);
}

// gamma_j = j / J before normalisation, j = 1..J in network order.
inline LayerWeights linear_interp_weights(const std::vector<AttachPoint>& layers) {
  std::vector<double> s;
  for (std::size_t j = 1; j <= layers.size(); ++j) {
    s.push_back(static_cast<double>(j) / static_cast<double>(layers.size()));
  }
  return normalized_weights(layers, std::move(s), WeightScheme::LinearInterp);
}

// Spatial mean of the activation at each attach point, one vector per layer.
inline std::vector<std::vector<double>> pooled_activations(
    const ModelGraph& model, const Tensor& image,
    const std::vector<AttachPoint>& layers) {
  const Tape tape = forward(model, image);
  std::vector<std::vector<double>> out;
  for (const auto& a : layers) {
    const LayerRecord& rec = tape.record(a.layer);
    const Tensor& x = a.side == Side::Output ? rec.x_out : rec.x_in;
    detail::require_spatial(x, a.label());
    const std::size_t K = x.dim(0), HW = x.dim(1) * x.dim(2);
    std::vector<double> mean(K, 0.0);
    for (std::size_t k = 0; k < K; ++k) {
      double s = 0.0;
      for (std::size_t u = 0; u < HW; ++u) s += x[k * HW + u];
      mean[k] = s / static_cast<double>(HW);
    }
    out.push_back(std::move(mean));
  }
  return out;
}

// Mean absolute deviation of per-image pooled features from their mean,
// averaged over channels: (1/M) sum_i ||xbar_i - xbar_mu||_1 / K with
// xbar_mu = (1/M) sum_i |xbar_i|.
inline double feature_spread(const std::vector<std::vector<double>>& means) {
  const std::size_t M = means.size();
  if (M < 2) throw std::invalid_argument("feature_spread: need at least 2 images");
  const std::size_t K = means.front().size();
  // Mean taken relative to the first image so that identical inputs give
  // exactly zero spread.
  std::vector<double> mu(K, 0.0);
  for (const auto& m : means) {
    for (std::size_t k = 0; k < K; ++k) mu[k] += std::abs(m[k]) - std::abs(means[0][k]);
  }
  for (std::size_t k = 0; k < K; ++k) mu[k] = std::abs(means[0][k]) + mu[k] / static_cast<double>(M);
  double total = 0.0;
  for (const auto& m : means) {
    double l1 = 0.0;
    for (std::size_t k = 0; k < K; ++k) l1 += std::abs(m[k] - mu[k]);
    total += l1 / static_cast<double>(K);
  }
  return total / static_cast<double>(M);
}

inline LayerWeights feature_spread_weights(const ModelGraph& model,
                                           const std::vector<Tensor>& images,
                                           const std::vector<AttachPoint>& layers) {
  if (layers.empty()) throw std::invalid_argument("feature_spread_weights: empty layer list");
  if (images.size() < 2) throw std::invalid_argument("feature_spread_weights: need M >= 2");
  std::vector<std::vector<std::vector<double>>> per_layer(layers.size());
  for (const auto& img : images) {
    auto pooled = pooled_activations(model, img, layers);
    for (std::size_t j = 0; j < layers.size(); ++j) per_layer[j].push_back(std::move(pooled[j]));
  }
  std::vector<double> scores;
  for (const auto& means : per_layer) scores.push_back(feature_spread(means));
  return normalized_weights(layers, std::move(scores), WeightScheme::FeatureSpread);
}

struct ProbeConfig {
  std::size_t iterations = 200;
  double learning_rate = 0.1;
};

// Multinomial logistic regression on standardised features, full-batch
// gradient descent from zero; returns top-1 accuracy on the training sample.
inline double probe_accuracy(const std::vector<std::vector<double>>& features,
                             const std::vector<std::size_t>& labels,
                             std::size_t num_classes, const ProbeConfig& cfg = {}) {
  const std::size_t M = features.size();
  if (M == 0 || labels.size() != M) {
    throw std::invalid_argument("probe_accuracy: features and labels disagree");
  }
  std::vector<bool> present(num_classes, false);
  for (auto y : labels) {
    if (y >= num_classes) throw std::invalid_argument("probe_accuracy: label out of range");
    present[y] = true;
  }
  if (std::count(present.begin(), present.end(), true) < 2) {
    throw std::invalid_argument("probe_accuracy: need at least two classes");
  }
  const std::size_t D = features.front().size();
  std::vector<double> mean(D, 0.0), sd(D, 0.0);
  for (const auto& f : features) {
    for (std::size_t d = 0; d < D; ++d) mean[d] += f[d];
  }
  for (double& m : mean) m /= static_cast<double>(M);
  for (const auto& f : features) {
    for (std::size_t d = 0; d < D; ++d) sd[d] += (f[d] - mean[d]) * (f[d] - mean[d]);
  }
  for (double& s : sd) s = std::sqrt(s / static_cast<double>(M));
  std::vector<std::vector<double>> z(M, std::vector<double>(D, 0.0));
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t d = 0; d < D; ++d) {
      z[i][d] = sd[d] > 0.0 ? (features[i][d] - mean[d]) / sd[d] : 0.0;
    }
  }

  const std::size_t C = num_classes;
  std::vector<double> w(C * D, 0.0), b(C, 0.0);
  std::vector<double> gw(C * D), gb(C), logits(C);
  auto score = [&](std::size_t i) {
    for (std::size_t c = 0; c < C; ++c) {
      logits[c] = b[c] + dot({w.data() + c * D, D}, z[i]);
    }
  };
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (std::size_t i = 0; i < M; ++i) {
      score(i);
      const double lse = log_sum_exp(logits);
      for (std::size_t c = 0; c < C; ++c) {
        const double r = std::exp(logits[c] - lse) - (c == labels[i] ? 1.0 : 0.0);
        gb[c] += r;
        for (std::size_t d = 0; d < D; ++d) gw[c * D + d] += r * z[i][d];
      }
    }
    const double step = cfg.learning_rate / static_cast<double>(M);
    for (std::size_t k = 0; k < w.size(); ++k) w[k] -= step * gw[k];
    for (std::size_t c = 0; c < C; ++c) b[c] -= step * gb[c];
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < M; ++i) {
    score(i);
    if (argmax(logits) == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(M);
}

inline LayerWeights probe_accuracy_weights(const ModelGraph& model,
                                           const std::vector<Tensor>& images,
                                           const std::vector<std::size_t>& labels,
                                           const std::vector<AttachPoint>& layers,
                                           const ProbeConfig& cfg = {}) {
  if (layers.empty()) throw std::invalid_argument("probe_accuracy_weights: empty layer list");
  if (images.size() != labels.size()) {
    throw std::invalid_argument("probe_accuracy_weights: images and labels disagree");
  }
  std::vector<std::vector<std::vector<double>>> per_layer(layers.size());
  for (const auto& img : images) {
    auto pooled = pooled_activations(model, img, layers);
    for (std::size_t j = 0; j < layers.size(); ++j) per_layer[j].push_back(std::move(pooled[j]));
  }
  std::vector<double> scores;
  for (const auto& feats : per_layer) {
    scores.push_back(probe_accuracy(feats, labels, model.num_classes, cfg));
  }
  return normalized_weights(layers, std::move(scores), WeightScheme::ProbeAccuracy);
}

enum class CombineMode { Additive, Product };

inline std::string_view to_string(CombineMode m) {
  return m == CombineMode::Additive ? "add" : "prod";
}

inline CombineMode parse_combine_mode(std::string_view s) {
  if (s == "add" || s == "additive") return CombineMode::Additive;
  if (s == "prod" || s == "product") return CombineMode::Product;
  throw std::invalid_argument("unknown combination mode '" + std::string(s) + "'");
}

struct CombinedMap {
  SaliencyMap map;
  CombineMode mode = CombineMode::Additive;
  std::vector<std::pair<std::string, double>> provenance;
};

inline constexpr double kProductFloor = 1e-12;

// Each source map is upsampled to height x width and min-max normalised,
// then merged as sum_j gamma_j m_j or prod_j (m_j + floor)^gamma_j.
inline CombinedMap combine(const std::vector<SaliencyMap>& maps,
                           const LayerWeights& weights, CombineMode mode,
                           std::size_t height, std::size_t width) {
  if (maps.size() != weights.gamma.size()) {
    throw std::invalid_argument("combine: " + std::to_string(maps.size()) +
                                " maps for " + std::to_string(weights.gamma.size()) +
                                " weighted layers");
  }
  CombinedMap out;
  out.mode = mode;
  out.map = SaliencyMap(height, width, mode == CombineMode::Additive ? 0.0 : 1.0);
  for (const auto& [label, gamma] : weights.gamma) {
    auto it = std::find_if(maps.begin(), maps.end(),
                           [&](const SaliencyMap& m) { return m.layer.label() == label; });
    if (it == maps.end()) {
      throw std::invalid_argument("combine: no map for weighted layer '" + label + "'");
    }
    if (mode == CombineMode::Product &&
        (it->is_signed || std::any_of(it->values.begin(), it->values.end(),
                                      [](double v) { return v < 0.0; }))) {
      throw std::invalid_argument("combine: signed map '" + label +
                                  "' cannot be used in product mode");
    }
    const SaliencyMap m = normalize_minmax(upsample(*it, height, width));
    for (std::size_t i = 0; i < m.values.size(); ++i) {
      if (mode == CombineMode::Additive) {
        out.map.values[i] += gamma * m.values[i];
      } else {
        out.map.values[i] *= std::pow(m.values[i] + kProductFloor, gamma);
      }
    }
    out.provenance.emplace_back(label, gamma);
  }
  for (double& v : out.map.values) v = std::clamp(v, 0.0, 1.0);
  out.map.input_id = maps.front().input_id;
  out.map.layer = AttachPoint{"combined", Side::Output};
  return out;
}

// Weights for `scheme`; the data-driven schemes score layers on `images`.
inline LayerWeights scheme_weights(WeightScheme scheme, const ModelGraph& model,
                                   const std::vector<Tensor>& images,
                                   const std::vector<std::size_t>& labels,
                                   const std::vector<AttachPoint>& layers) {
  switch (scheme) {
    case WeightScheme::FeatureSpread: return feature_spread_weights(model, images, layers);
    case WeightScheme::ProbeAccuracy: return probe_accuracy_weights(model, images, labels, layers);
    case WeightScheme::LinearInterp: return linear_interp_weights(layers);
    case WeightScheme::Uniform: return uniform_weights(layers);
  }
  throw std::invalid_argument("unknown weighting scheme");
}

// One map per layer from a single forward-backward pass. Signed maps are
// rectified when `rectify_signed` is set, as product combination requires.
inline std::vector<SaliencyMap> layer_maps(const ModelGraph& model, const Tensor& image,
                                           std::size_t cls, Method method,
                                           const std::vector<AttachPoint>& layers,
                                           bool rectify_signed) {
  check_class(model, cls);
  const Tape tape = forward_backward(model, image, ClassLogit{cls});
  std::vector<SaliencyMap> maps;
  for (const auto& a : layers) {
    SaliencyMap m = saliency_from_tape(tape, model, method, a);
    maps.push_back(rectify_signed && m.is_signed ? rectify(m) : std::move(m));
  }
  return maps;
}

inline CombinedMap combined_saliency(const ModelGraph& model, const Tensor& image,
                                     std::size_t cls, Method method,
                                     const LayerWeights& weights, CombineMode mode) {
  std::vector<AttachPoint> layers;
  for (const auto& [label, g] : weights.gamma) layers.push_back(parse_attach(label));
  return combine(layer_maps(model, image, cls, method, layers, mode == CombineMode::Product),
                 weights, mode, image.dim(1), image.dim(2));
}

}  // namespace saliency
