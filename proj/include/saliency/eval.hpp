#pragma once

// Evaluation: rank correlation, class sensitivity, the pointing game,
// cascading weight randomisation and the identity-trick study.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "saliency/aggregate.hpp"
#include "saliency/dataset.hpp"
#include "saliency/metasal.hpp"
#include "saliency/multilayer.hpp"
#include "saliency/nn.hpp"

namespace saliency {

// Ranks starting at 1; tied values share the average of their ranks.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

// Spearman's rho; 0 when either map is constant.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("spearman: size mismatch");
  if (a.size() < 2) return 0.0;
  return pearson(average_ranks(a), average_ranks(b));
}

inline double spearman(const SaliencyMap& a, const SaliencyMap& b) {
  if (a.height != b.height || a.width != b.width) {
    throw std::invalid_argument("spearman: map dimensions differ");
  }
  return spearman(a.values, b.values);
}

struct EvalRecord {
  std::string image_id;
  std::size_t cls = 0;
  std::string tag;  // layer, cascade step, ...
  double value = 0.0;
};

struct EvalReport {
  std::string metric;
  std::vector<EvalRecord> records;
  double mean = 0.0;
  double stddev = 0.0;
  std::map<std::size_t, double> per_class;  // per-class mean of record values
  double score = 0.0;                       // mean of per_class

  // Recomputes every aggregate from `records`.
  void summarize() {
    mean = stddev = score = 0.0;
    per_class.clear();
    if (records.empty()) return;
    std::map<std::size_t, std::pair<double, std::size_t>> acc;
    for (const auto& r : records) {
      mean += r.value;
      auto& [s, n] = acc[r.cls];
      s += r.value;
      ++n;
    }
    mean /= static_cast<double>(records.size());
    for (const auto& r : records) stddev += (r.value - mean) * (r.value - mean);
    stddev = std::sqrt(stddev / static_cast<double>(records.size()));
    for (const auto& [cls, sn] : acc) {
      per_class[cls] = sn.first / static_cast<double>(sn.second);
      score += per_class[cls];
    }
    score /= static_cast<double>(per_class.size());
  }
};

using SaliencyFn = std::function<SaliencyMap(const ModelGraph&, const Tensor&, std::size_t)>;

inline SaliencyFn method_fn(Method method, AttachPoint attach,
                            std::optional<MetaConfig> meta = std::nullopt) {
  return [method, attach = std::move(attach), meta](const ModelGraph& m, const Tensor& x,
                                                    std::size_t cls) {
    return meta ? meta_saliency(m, x, cls, method, attach, *meta)
                : method_saliency(m, x, cls, method, attach);
  };
}

inline SaliencyMap to_input_resolution(const SaliencyMap& map, const Tensor& image) {
  return upsample(map, image.dim(1), image.dim(2));
}

// Per image: Spearman between the maps for the highest- and lowest-logit
// classes, both upsampled to input resolution.
inline EvalReport class_sensitivity(const ModelGraph& model, const std::vector<Tensor>& images,
                                    const std::vector<std::string>& ids, const SaliencyFn& fn) {
  if (model.num_classes < 2) throw std::invalid_argument("class_sensitivity: need >= 2 classes");
  EvalReport report;
  report.metric = "class_sensitivity";
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Tensor logits = forward(model, images[i]).logits;
    const std::size_t hi = argmax(logits.data()), lo = argmin(logits.data());
    const SaliencyMap a = to_input_resolution(fn(model, images[i], hi), images[i]);
    const SaliencyMap b = to_input_resolution(fn(model, images[i], lo), images[i]);
    report.records.push_back({i < ids.size() ? ids[i] : image_id_for(i), hi, "", spearman(a, b)});
  }
  report.summarize();
  return report;
}

inline EvalReport class_sensitivity(const ModelGraph& model, const std::vector<Tensor>& images,
                                    const std::vector<std::string>& ids, Method method,
                                    const AttachPoint& attach,
                                    std::optional<MetaConfig> meta = std::nullopt) {
  return class_sensitivity(model, images, ids, method_fn(method, attach, meta));
}

// Chebyshev distance from (row, col) to the nearest pixel of `box`.
inline int chebyshev_distance(int row, int col, const Box& box) {
  const int dr = std::max({box.top - row, 0, row - box.bottom});
  const int dc = std::max({box.left - col, 0, col - box.right});
  return std::max(dr, dc);
}

// First maximal element in row-major order.
inline std::pair<int, int> map_argmax(const SaliencyMap& map) {
  const auto it = std::max_element(map.values.begin(), map.values.end());
  const auto idx = static_cast<std::size_t>(it - map.values.begin());
  return {static_cast<int>(idx / map.width), static_cast<int>(idx % map.width)};
}

inline bool pointing_hit(const SaliencyMap& map, const Annotation& ann, int tolerance) {
  const auto [r, c] = map_argmax(map);
  return std::any_of(ann.boxes.begin(), ann.boxes.end(),
                     [&](const Box& b) { return chebyshev_distance(r, c, b) <= tolerance; });
}

inline constexpr int kPointingTolerance = 15;

// Hit when the map's maximum lies within `tolerance` pixels of a ground-truth
// box; `score` is the mean of per-class hit rates.
inline EvalReport pointing_game(const std::vector<std::pair<SaliencyMap, Annotation>>& items,
                                int tolerance = kPointingTolerance) {
  if (items.empty()) throw std::invalid_argument("pointing_game: no maps");
  EvalReport report;
  report.metric = "pointing_game";
  for (const auto& [map, ann] : items) {
    if (map.values.empty()) throw std::invalid_argument("pointing_game: empty map");
    report.records.push_back({ann.image_id, ann.cls, map.layer.label(),
                              pointing_hit(map, ann, tolerance) ? 1.0 : 0.0});
  }
  report.summarize();
  return report;
}

// Redraws every parameter of the layers from the output back to and
// including `from_layer` as N(0, 1/fan_in). An empty name changes nothing.
inline ModelGraph cascading_randomize(const ModelGraph& model, const std::string& from_layer,
                                      std::uint64_t seed) {
  ModelGraph out = model;
  if (from_layer.empty()) return out;
  const std::size_t stop = model.index_of(from_layer);
  std::mt19937_64 rng(seed);
  for (std::size_t j = out.layers.size(); j-- > stop;) {
    Layer& l = out.layers[j];
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(l.fan_in())));
    for (auto& p : l.params) {
      for (double& v : p.data()) v = dist(rng);
    }
  }
  return out;
}

// Parameterised layers from the output towards the input: the order in which
// the cascade reaches them.
inline std::vector<std::string> cascade_order(const ModelGraph& model) {
  std::vector<std::string> names;
  for (std::size_t j = model.layers.size(); j-- > 0;) {
    if (model.layers[j].has_params()) names.push_back(model.layers[j].name);
  }
  return names;
}

// For each cascade step, Spearman between maps of the trained model and of
// the model randomised down to that step, w.r.t. each image's label. Record
// tags name the deepest randomised layer.
inline EvalReport cascading_sweep(const ModelGraph& model, const ShapesDataset& data,
                                  const SaliencyFn& fn, std::uint64_t seed) {
  EvalReport report;
  report.metric = "cascading_randomization";
  std::vector<SaliencyMap> base;
  for (std::size_t i = 0; i < data.size(); ++i) {
    base.push_back(to_input_resolution(fn(model, data.images[i], data.labels[i]), data.images[i]));
  }
  for (const auto& name : cascade_order(model)) {
    const ModelGraph randomized = cascading_randomize(model, name, seed);
    for (std::size_t i = 0; i < data.size(); ++i) {
      const SaliencyMap m =
          to_input_resolution(fn(randomized, data.images[i], data.labels[i]), data.images[i]);
      report.records.push_back(
          {data.annotations[i].image_id, data.labels[i], name, spearman(base[i], m)});
    }
  }
  report.summarize();
  return report;
}

// Mean record value per tag, in first-appearance order.
inline std::vector<std::pair<std::string, double>> mean_by_tag(const EvalReport& report) {
  std::vector<std::pair<std::string, double>> out;
  std::vector<std::size_t> counts;
  for (const auto& r : report.records) {
    auto it = std::find_if(out.begin(), out.end(), [&](const auto& p) { return p.first == r.tag; });
    if (it == out.end()) {
      out.emplace_back(r.tag, 0.0);
      counts.push_back(0);
      it = out.end() - 1;
    }
    it->second += r.value;
    ++counts[static_cast<std::size_t>(it - out.begin())];
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i].second /= static_cast<double>(counts[i]);
  return out;
}

struct IdentityLayerSummary {
  std::string layer;
  std::size_t kernel = 0;
  double mean_rho = 0.0;
  double pointing_identity = 0.0;
  double pointing_real = 0.0;

  double pointing_diff() const { return std::abs(pointing_identity - pointing_real); }
};

struct IdentityStudy {
  EvalReport correlations;  // one record per (layer, image)
  std::vector<IdentityLayerSummary> layers;
};

// Compares NormGrad through an N x N virtual identity after each conv layer
// (x_out, g_out) against NormGrad of the conv itself (x_in unfolded, g_out).
inline IdentityStudy identity_trick_study(const ModelGraph& model, const ShapesDataset& data,
                                          const std::vector<std::string>& conv_layers,
                                          int tolerance) {
  for (const auto& name : conv_layers) {
    if (model.layer(name).kind != LayerKind::Conv) {
      throw std::invalid_argument("identity_trick_study: '" + name + "' is not a conv layer");
    }
  }
  IdentityStudy study;
  study.correlations.metric = "identity_trick";
  std::vector<std::vector<std::pair<SaliencyMap, Annotation>>> with_id(conv_layers.size()),
      real(conv_layers.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Tape tape = forward_backward(model, data.images[i], ClassLogit{data.labels[i]});
    for (std::size_t j = 0; j < conv_layers.size(); ++j) {
      const Layer& conv = model.layer(conv_layers[j]);
      const AttachPoint at{conv.name, Side::Output};
      SaliencyMap a = aggregate(
          spatial_contributions(tape, model, at, IdentityKind::conv_identity(conv.kernel)),
          Aggregator::Norm);
      SaliencyMap b = aggregate(spatial_contributions(tape, model, at, IdentityKind::real_conv()),
                                Aggregator::Norm);
      a.layer = b.layer = at;
      a = to_input_resolution(a, data.images[i]);
      b = to_input_resolution(b, data.images[i]);
      study.correlations.records.push_back(
          {data.annotations[i].image_id, data.labels[i], conv.name, spearman(a, b)});
      with_id[j].emplace_back(std::move(a), data.annotations[i]);
      real[j].emplace_back(std::move(b), data.annotations[i]);
    }
  }
  study.correlations.summarize();
  const auto means = mean_by_tag(study.correlations);
  for (std::size_t j = 0; j < conv_layers.size(); ++j) {
    IdentityLayerSummary s;
    s.layer = conv_layers[j];
    s.kernel = model.layer(conv_layers[j]).kernel;
    s.mean_rho = data.size() ? means[j].second : 0.0;
    if (data.size()) {
      s.pointing_identity = pointing_game(with_id[j], tolerance).score;
      s.pointing_real = pointing_game(real[j], tolerance).score;
    }
    study.layers.push_back(s);
  }
  return study;
}

}  // namespace saliency
