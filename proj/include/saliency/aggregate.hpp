#pragma once

// Aggregation phase: collapse each location's contribution to a scalar, plus
// the named method presets built from (identity kind, aggregator) pairs.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "saliency/extract.hpp"
#include "saliency/nn.hpp"

namespace saliency {

enum class Aggregator { Sum, MaxAbs, Norm, PosFilterNorm, PosFilterSum };

struct SaliencyMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;
  AttachPoint layer;
  std::string input_id;
  bool is_signed = false;

  SaliencyMap() = default;
  SaliencyMap(std::size_t h, std::size_t w, double fill = 0.0)
      : height(h), width(w), values(h * w, fill) {}

  double& at(std::size_t r, std::size_t c) { return values[r * width + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
  std::size_t size() const noexcept { return values.size(); }
};

inline SaliencyMap aggregate(const ContribField& field, Aggregator agg) {
  const std::size_t HW = field.locations();
  SaliencyMap map(field.height, field.width);
  map.is_signed = agg == Aggregator::Sum;

  if (field.form == ContribField::Form::Factored) {
    const std::size_t Kp = field.grads.dim(0), P = field.patches.dim(0);
    const auto g = field.grads.data();
    const auto x = field.patches.data();
    if (agg == Aggregator::Norm) {
      // ||g x^T||_F = ||g|| ||x||
      for (std::size_t u = 0; u < HW; ++u) {
        double gg = 0.0, xx = 0.0;
        for (std::size_t a = 0; a < Kp; ++a) gg += g[a * HW + u] * g[a * HW + u];
        for (std::size_t b = 0; b < P; ++b) xx += x[b * HW + u] * x[b * HW + u];
        map.values[u] = std::sqrt(gg) * std::sqrt(xx);
      }
      return map;
    }
    if (agg == Aggregator::PosFilterNorm) {
      // (g_a x_b)_+ is nonzero only where the signs agree, so
      // ||(g x^T)_+||_F^2 = |g+|^2 |x+|^2 + |g-|^2 |x-|^2.
      for (std::size_t u = 0; u < HW; ++u) {
        double gp = 0.0, gn = 0.0, xp = 0.0, xn = 0.0;
        for (std::size_t a = 0; a < Kp; ++a) {
          const double v = g[a * HW + u];
          (v > 0.0 ? gp : gn) += v * v;
        }
        for (std::size_t b = 0; b < P; ++b) {
          const double v = x[b * HW + u];
          (v > 0.0 ? xp : xn) += v * v;
        }
        map.values[u] = std::sqrt(gp * xp + gn * xn);
      }
      return map;
    }
    throw std::invalid_argument(
        "aggregate: only Norm and PosFilterNorm apply to matrix contributions");
  }

  const std::size_t K = field.vectors.dim(0);
  const auto v = field.vectors.data();
  for (std::size_t u = 0; u < HW; ++u) {
    double acc = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double c = v[k * HW + u];
      switch (agg) {
        case Aggregator::Sum: acc += c; break;
        case Aggregator::MaxAbs: acc = std::max(acc, std::abs(c)); break;
        case Aggregator::Norm: acc += c * c; break;
        case Aggregator::PosFilterNorm: if (c > 0.0) acc += c * c; break;
        case Aggregator::PosFilterSum: if (c > 0.0) acc += c; break;
      }
    }
    if (agg == Aggregator::Norm || agg == Aggregator::PosFilterNorm) acc = std::sqrt(acc);
    map.values[u] = acc;
  }
  return map;
}

enum class Method {
  Gradient,           // bias identity, maxabs
  GradientSum,        // bias identity, sum
  LinearApprox,       // scaling identity, sum
  SelectiveNormGrad,  // scaling identity, positive filter + norm
  NormGrad,           // 1x1 conv identity, norm
  NormGradReal,       // the attached conv layer itself, norm
  GradCAM,
};

inline constexpr std::array<Method, 7> kAllMethods = {
    Method::Gradient,          Method::GradientSum, Method::LinearApprox,
    Method::SelectiveNormGrad, Method::NormGrad,    Method::NormGradReal,
    Method::GradCAM};

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::Gradient: return "gradient";
    case Method::GradientSum: return "gradient-sum";
    case Method::LinearApprox: return "linear-approx";
    case Method::SelectiveNormGrad: return "selective-normgrad";
    case Method::NormGrad: return "normgrad";
    case Method::NormGradReal: return "normgrad-real";
    case Method::GradCAM: return "gradcam";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  for (Method m : kAllMethods) {
    if (to_string(m) == s) return m;
  }
  throw std::invalid_argument("unknown method '" + std::string(s) + "'");
}

struct Preset {
  IdentityKind kind;
  Aggregator aggregator;
};

inline Preset preset_of(Method m) {
  switch (m) {
    case Method::Gradient: return {IdentityKind::bias(), Aggregator::MaxAbs};
    case Method::GradientSum: return {IdentityKind::bias(), Aggregator::Sum};
    case Method::LinearApprox: return {IdentityKind::scaling(), Aggregator::Sum};
    case Method::SelectiveNormGrad: return {IdentityKind::scaling(), Aggregator::PosFilterNorm};
    case Method::NormGrad: return {IdentityKind::conv_identity(1), Aggregator::Norm};
    case Method::NormGradReal: return {IdentityKind::real_conv(), Aggregator::Norm};
    case Method::GradCAM: break;
  }
  throw std::invalid_argument("gradcam has no (identity, aggregator) preset");
}

// map_u = (sum_k gbar_k x_{u,k})_+ with gbar the spatial mean of g at the
// attach point.
inline SaliencyMap gradcam_from_tape(const Tape& tape, const AttachPoint& attach) {
  const auto [x, g] = attach_tensors(tape, attach);
  detail::require_spatial(x, attach.label());
  const std::size_t K = x.dim(0), H = x.dim(1), W = x.dim(2), HW = H * W;
  std::vector<double> gbar(K, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    double s = 0.0;
    for (std::size_t u = 0; u < HW; ++u) s += g[k * HW + u];
    gbar[k] = s / static_cast<double>(HW);
  }
  SaliencyMap map(H, W);
  for (std::size_t u = 0; u < HW; ++u) {
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += gbar[k] * x[k * HW + u];
    map.values[u] = std::max(s, 0.0);
  }
  map.layer = attach;
  return map;
}

// Saliency from an already differentiated tape.
inline SaliencyMap saliency_from_tape(const Tape& tape, const ModelGraph& model,
                                      Method method, const AttachPoint& attach) {
  if (method == Method::GradCAM) return gradcam_from_tape(tape, attach);
  const Preset p = preset_of(method);
  SaliencyMap map = aggregate(spatial_contributions(tape, model, attach, p.kind),
                              p.aggregator);
  map.layer = attach;
  return map;
}

inline void check_class(const ModelGraph& model, std::size_t cls) {
  if (cls >= model.num_classes) {
    throw std::invalid_argument("class " + std::to_string(cls) +
                                " out of range for " +
                                std::to_string(model.num_classes) + " classes");
  }
}

inline SaliencyMap method_saliency(const ModelGraph& model, const Tensor& input,
                                   std::size_t cls, Method method,
                                   const AttachPoint& attach) {
  check_class(model, cls);
  const Tape tape = forward_backward(model, input, ClassLogit{cls});
  return saliency_from_tape(tape, model, method, attach);
}

inline SaliencyMap gradcam(const ModelGraph& model, const Tensor& input,
                           std::size_t cls, const AttachPoint& attach) {
  return method_saliency(model, input, cls, Method::GradCAM, attach);
}

}  // namespace saliency
