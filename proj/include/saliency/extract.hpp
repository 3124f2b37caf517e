#pragma once

// Extraction phase: per-location contributions to the weight gradient of a
// real layer, or of a virtual identity layer attached at a chosen point.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

#include "saliency/nn.hpp"
#include "saliency/tensor.hpp"

namespace saliency {

enum class Side { Input, Output };

// Where a virtual identity sits. Output: directly after `layer`, seeing its
// x_out and g_out. Input: directly before `layer`, seeing its x_in and g_in.
struct AttachPoint {
  std::string layer;
  Side side = Side::Output;

  std::string label() const {
    return side == Side::Output ? layer : layer + "@in";
  }
  friend bool operator==(const AttachPoint&, const AttachPoint&) = default;
};

inline AttachPoint parse_attach(std::string_view text) {
  constexpr std::string_view suffix = "@in";
  if (text.size() > suffix.size() && text.ends_with(suffix)) {
    return {std::string(text.substr(0, text.size() - suffix.size())), Side::Input};
  }
  return {std::string(text), Side::Output};
}

struct IdentityKind {
  enum class Tag { Bias, Scaling, ConvIdentity, RealConv };
  Tag tag = Tag::Bias;
  std::size_t kernel = 1;  // ConvIdentity only

  static IdentityKind bias() { return {Tag::Bias, 1}; }
  static IdentityKind scaling() { return {Tag::Scaling, 1}; }
  static IdentityKind conv_identity(std::size_t n) { return {Tag::ConvIdentity, n}; }
  static IdentityKind real_conv() { return {Tag::RealConv, 0}; }

  friend bool operator==(const IdentityKind&, const IdentityKind&) = default;
};

// Per-location contributions over an H x W grid.
//   Vector:   `vectors` is K x H x W; location u owns the K-vector at u.
//   Factored: location u owns the outer product g_u x_u^T, kept as its two
//             factors: column u of `grads` (K' x HW) and of `patches`
//             (N*N*K x HW). The product is never formed.
struct ContribField {
  enum class Form { Vector, Factored };
  Form form = Form::Vector;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t kernel = 0;
  Tensor vectors;
  Tensor grads;
  Tensor patches;

  std::size_t locations() const noexcept { return height * width; }
};

inline ContribField vector_field(Tensor v) {
  if (v.rank() != 3) {
    throw std::invalid_argument("vector_field: expected K x H x W, got " +
                                shape_str(v.shape()));
  }
  ContribField f;
  f.form = ContribField::Form::Vector;
  f.height = v.dim(1);
  f.width = v.dim(2);
  f.vectors = std::move(v);
  return f;
}

// Contributions of an N x N convolution whose input is `x` and whose output
// gradient is `g`.
inline ContribField conv_field(const Tensor& x, const Tensor& g,
                               std::size_t kernel) {
  if (x.rank() != 3 || g.rank() != 3 || x.dim(1) != g.dim(1) ||
      x.dim(2) != g.dim(2)) {
    throw std::invalid_argument("conv_field: spatial mismatch " +
                                shape_str(x.shape()) + " vs " +
                                shape_str(g.shape()));
  }
  ContribField f;
  f.form = ContribField::Form::Factored;
  f.height = x.dim(1);
  f.width = x.dim(2);
  f.kernel = kernel;
  f.grads = g.reshaped({g.dim(0), f.locations()});
  f.patches = unfold_patches(x, kernel);
  return f;
}

namespace detail {

inline const LayerRecord& checked_record(const Tape& tape,
                                         std::string_view layer) {
  const LayerRecord& rec = tape.record(layer);
  if (!tape.has_gradients) {
    throw std::logic_error("no gradients recorded on tape; run backward first");
  }
  return rec;
}

inline void require_spatial(const Tensor& t, std::string_view where) {
  if (t.rank() != 3) {
    throw std::invalid_argument("attach point '" + std::string(where) +
                                "' is not spatial: " + shape_str(t.shape()));
  }
}

}  // namespace detail

// Activation and gradient seen by a virtual identity at `attach`.
inline std::pair<const Tensor&, const Tensor&> attach_tensors(
    const Tape& tape, const AttachPoint& attach) {
  const LayerRecord& rec = detail::checked_record(tape, attach.layer);
  if (attach.side == Side::Output) return {rec.x_out, rec.g_out};
  return {rec.x_in, rec.g_in};
}

// Contributions of a real Conv, Bias or Scaling layer to its own parameter
// gradient: Conv g_u x_{u,NxN}^T, Bias g_u, Scaling g_u * x_in_u.
inline ContribField real_layer_contributions(const Tape& tape,
                                             const ModelGraph& model,
                                             std::string_view layer_name) {
  const Layer& layer = model.layer(layer_name);
  const LayerRecord& rec = detail::checked_record(tape, layer_name);
  switch (layer.kind) {
    case LayerKind::Conv:
      return conv_field(rec.x_in, rec.g_out, layer.kernel);
    case LayerKind::Bias:
      return vector_field(rec.g_out);
    case LayerKind::Scaling:
      return vector_field(elementwise(rec.g_out, rec.x_in, BinaryOp::Mul));
    default:
      throw std::invalid_argument("layer '" + layer.name +
                                  "' has no spatially shared parameters");
  }
}

inline ContribField spatial_contributions(const Tape& tape,
                                          const ModelGraph& model,
                                          const AttachPoint& attach,
                                          IdentityKind kind) {
  if (kind.tag == IdentityKind::Tag::RealConv) {
    if (model.layer(attach.layer).kind != LayerKind::Conv) {
      throw std::invalid_argument("RealConv requires a conv layer, '" +
                                  attach.layer + "' is " +
                                  std::string(to_string(model.layer(attach.layer).kind)));
    }
    return real_layer_contributions(tape, model, attach.layer);
  }
  const auto [x, g] = attach_tensors(tape, attach);
  detail::require_spatial(x, attach.label());
  switch (kind.tag) {
    case IdentityKind::Tag::Bias:
      return vector_field(g);
    case IdentityKind::Tag::Scaling:
      return vector_field(elementwise(g, x, BinaryOp::Mul));
    case IdentityKind::Tag::ConvIdentity:
      return conv_field(x, g, kind.kernel);
    case IdentityKind::Tag::RealConv:
      break;
  }
  throw std::logic_error("spatial_contributions: unhandled kind");
}

// Sum of a field over all locations, in parameter layout: K for vector
// fields, K' x (N*N*K) for factored ones.
inline Tensor sum_contributions(const ContribField& field) {
  const std::size_t HW = field.locations();
  if (field.form == ContribField::Form::Vector) {
    const std::size_t K = field.vectors.dim(0);
    Tensor s({K});
    for (std::size_t k = 0; k < K; ++k) {
      double acc = 0.0;
      for (std::size_t u = 0; u < HW; ++u) acc += field.vectors[k * HW + u];
      s[k] = acc;
    }
    return s;
  }
  const std::size_t Kp = field.grads.dim(0), P = field.patches.dim(0);
  Tensor s({Kp, P});
  for (std::size_t a = 0; a < Kp; ++a) {
    const double* g = field.grads.data().data() + a * HW;
    for (std::size_t b = 0; b < P; ++b) {
      const double* x = field.patches.data().data() + b * HW;
      double acc = 0.0;
      for (std::size_t u = 0; u < HW; ++u) acc += g[u] * x[u];
      s[a * P + b] = acc;
    }
  }
  return s;
}

// max_i |sum_i - grad_i| / max_i |grad_i|, or 0 when both sides vanish.
inline double contribution_sum_check(const ContribField& field, const Tape& tape,
                                     const ModelGraph& model,
                                     std::string_view layer_name) {
  const Layer& layer = model.layer(layer_name);
  const bool factored = field.form == ContribField::Form::Factored;
  const bool ok =
      (layer.kind == LayerKind::Conv && factored && field.kernel == layer.kernel &&
       field.grads.dim(0) == layer.out &&
       field.patches.dim(0) == layer.kernel * layer.kernel * layer.in) ||
      ((layer.kind == LayerKind::Bias || layer.kind == LayerKind::Scaling) &&
       !factored && field.vectors.dim(0) == layer.in);
  if (!ok) {
    throw std::invalid_argument("contribution_sum_check: field does not match layer '" +
                                layer.name + "'");
  }
  auto it = tape.param_grads.find(layer.name);
  if (it == tape.param_grads.end()) {
    throw std::logic_error("no parameter gradient recorded for '" + layer.name + "'");
  }
  const Tensor summed = sum_contributions(field);
  const auto ref = it->second[0].data();
  const auto got = summed.data();
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    diff = std::max(diff, std::abs(got[i] - ref[i]));
    scale = std::max(scale, std::abs(ref[i]));
  }
  if (scale == 0.0) return diff == 0.0 ? 0.0 : diff;
  return diff / scale;
}

}  // namespace saliency
