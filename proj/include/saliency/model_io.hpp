#pragma once

// Model files and the toy training loop.
//
// File layout:
//   u64 little-endian   header length in bytes
//   header              JSON architecture description
//   payload             every parameter tensor in layer order, as raw
//                       little-endian IEEE-754 doubles

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "saliency/dataset.hpp"
#include "saliency/nn.hpp"

namespace saliency {

inline constexpr int kModelFormatVersion = 1;

enum class ModelIoErrc {
  Io,
  BadHeader,
  VersionMismatch,
  ShapeMismatch,
  TruncatedPayload,
  TrailingData,
};

inline const char* to_string(ModelIoErrc e) {
  switch (e) {
    case ModelIoErrc::Io: return "io";
    case ModelIoErrc::BadHeader: return "bad-header";
    case ModelIoErrc::VersionMismatch: return "version-mismatch";
    case ModelIoErrc::ShapeMismatch: return "shape-mismatch";
    case ModelIoErrc::TruncatedPayload: return "truncated-payload";
    case ModelIoErrc::TrailingData: return "trailing-data";
  }
  return "?";
}

class ModelIoError : public std::runtime_error {
 public:
  ModelIoError(ModelIoErrc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
  ModelIoErrc code() const noexcept { return code_; }

 private:
  ModelIoErrc code_;
};

static_assert(std::endian::native == std::endian::little,
              "model files are written in host byte order");

inline nlohmann::json model_header(const ModelGraph& model) {
  nlohmann::json h;
  h["format"] = "saliency-model";
  h["version"] = kModelFormatVersion;
  h["num_classes"] = model.num_classes;
  h["input_shape"] = model.input_shape;
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : model.layers) {
    nlohmann::json j;
    j["name"] = l.name;
    j["kind"] = std::string(to_string(l.kind));
    j["kernel"] = l.kernel;
    j["in"] = l.in;
    j["out"] = l.out;
    nlohmann::json shapes = nlohmann::json::array();
    for (const auto& p : l.params) shapes.push_back(p.shape());
    j["params"] = std::move(shapes);
    layers.push_back(std::move(j));
  }
  h["layers"] = std::move(layers);
  return h;
}

inline std::vector<char> serialize_model(const ModelGraph& model) {
  const std::string header = model_header(model).dump();
  std::size_t total = 8 + header.size();
  for (const auto& l : model.layers) {
    for (const auto& p : l.params) total += p.size() * sizeof(double);
  }
  std::vector<char> bytes(total);
  const std::uint64_t len = header.size();
  std::memcpy(bytes.data(), &len, 8);
  std::memcpy(bytes.data() + 8, header.data(), header.size());
  std::size_t offset = 8 + header.size();
  for (const auto& l : model.layers) {
    for (const auto& p : l.params) {
      std::memcpy(bytes.data() + offset, p.data().data(), p.size() * sizeof(double));
      offset += p.size() * sizeof(double);
    }
  }
  return bytes;
}

inline void save_model(const ModelGraph& model, const std::filesystem::path& path) {
  const auto bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ModelIoError(ModelIoErrc::Io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ModelIoError(ModelIoErrc::Io, "write failed for " + path.string());
}

inline ModelGraph deserialize_model(const std::vector<char>& bytes) {
  if (bytes.size() < 8) throw ModelIoError(ModelIoErrc::BadHeader, "file shorter than length prefix");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data(), 8);
  if (len > bytes.size() - 8) throw ModelIoError(ModelIoErrc::BadHeader, "header length exceeds file");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(len));
  } catch (const nlohmann::json::exception& e) {
    throw ModelIoError(ModelIoErrc::BadHeader, e.what());
  }
  if (!h.contains("version")) throw ModelIoError(ModelIoErrc::BadHeader, "missing version");
  if (h.value("format", "") != "saliency-model") {
    throw ModelIoError(ModelIoErrc::BadHeader, "not a saliency model file");
  }
  if (h["version"] != kModelFormatVersion) {
    throw ModelIoError(ModelIoErrc::VersionMismatch,
                       "file version " + h["version"].dump() + ", expected " +
                           std::to_string(kModelFormatVersion));
  }

  ModelGraph model;
  std::size_t offset = 8 + len;
  try {
    model.num_classes = h.at("num_classes").get<std::size_t>();
    model.input_shape = h.at("input_shape").get<Shape>();
    for (const auto& j : h.at("layers")) {
      const auto kind = layer_kind_from_string(j.at("kind").get<std::string>());
      const auto name = j.at("name").get<std::string>();
      const auto kernel = j.at("kernel").get<std::size_t>();
      const auto in = j.at("in").get<std::size_t>();
      const auto out = j.at("out").get<std::size_t>();
      Layer l;
      switch (kind) {
        case LayerKind::Conv: l = Layer::conv(name, kernel, in, out); break;
        case LayerKind::Bias: l = Layer::bias(name, in); break;
        case LayerKind::Scaling: l = Layer::scaling(name, in); break;
        case LayerKind::ReLU: l = Layer::relu(name); break;
        case LayerKind::MaxPool: l = Layer::maxpool(name); break;
        case LayerKind::GlobalAvgPool: l = Layer::global_avg_pool(name); break;
        case LayerKind::Flatten: l = Layer::flatten(name); break;
        case LayerKind::FullyConnected: l = Layer::fully_connected(name, in, out); break;
      }
      const auto declared = j.at("params").get<std::vector<Shape>>();
      if (declared.size() != l.params.size()) {
        throw ModelIoError(ModelIoErrc::ShapeMismatch,
                           "layer '" + name + "' declares " + std::to_string(declared.size()) +
                               " parameter tensors, expected " + std::to_string(l.params.size()));
      }
      for (std::size_t p = 0; p < declared.size(); ++p) {
        if (declared[p] != l.params[p].shape()) {
          throw ModelIoError(ModelIoErrc::ShapeMismatch,
                             "layer '" + name + "' parameter " + std::to_string(p) + " is " +
                                 shape_str(declared[p]) + ", architecture implies " +
                                 shape_str(l.params[p].shape()));
        }
        const std::size_t nbytes = l.params[p].size() * sizeof(double);
        if (bytes.size() - offset < nbytes) {
          throw ModelIoError(ModelIoErrc::TruncatedPayload,
                             "payload ends inside layer '" + name + "'");
        }
        std::memcpy(l.params[p].data().data(), bytes.data() + offset, nbytes);
        offset += nbytes;
      }
      model.layers.push_back(std::move(l));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ModelIoError(ModelIoErrc::BadHeader, e.what());
  } catch (const std::invalid_argument& e) {
    throw ModelIoError(ModelIoErrc::ShapeMismatch, e.what());
  }
  if (offset != bytes.size()) {
    throw ModelIoError(ModelIoErrc::TrailingData,
                       std::to_string(bytes.size() - offset) + " unexpected trailing bytes");
  }
  try {
    model.validate();
  } catch (const std::invalid_argument& e) {
    throw ModelIoError(ModelIoErrc::ShapeMismatch, e.what());
  }
  return model;
}

inline ModelGraph load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelIoError(ModelIoErrc::Io, "cannot read " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainResult {
  ModelGraph model;
  std::vector<double> loss_curve;  // mean cross-entropy per epoch
};

// Plain per-sample SGD on cross-entropy; the visiting order is reshuffled
// each epoch from `seed`.
inline TrainResult train_toy(const ModelGraph& model, const ShapesDataset& data,
                             std::size_t epochs, double lr, std::uint64_t seed) {
  if (model.num_classes != data.num_classes) {
    throw std::invalid_argument("train_toy: model has " + std::to_string(model.num_classes) +
                                " outputs, dataset has " + std::to_string(data.num_classes) +
                                " classes");
  }
  if (data.size() == 0) throw std::invalid_argument("train_toy: empty dataset");
  TrainResult result{model, {}};
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t i : order) {
      Tape tape = forward_backward(result.model, data.images[i], CrossEntropy{data.labels[i]});
      if (!std::isfinite(tape.loss)) {
        throw TrainingError("train_toy: loss diverged in epoch " + std::to_string(e));
      }
      total += tape.loss;
      if (lr != 0.0) result.model = sgd_step(result.model, tape.param_grads, lr);
    }
    result.loss_curve.push_back(total / static_cast<double>(data.size()));
  }
  return result;
}

inline double accuracy(const ModelGraph& model, const ShapesDataset& data) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (argmax(forward(model, data.images[i]).logits.data()) == data.labels[i]) ++correct;
  }
  return data.size() ? static_cast<double>(correct) / static_cast<double>(data.size()) : 0.0;
}

struct ToyConfig {
  std::size_t num_classes = 2;
  std::size_t images = 512;
  std::size_t epochs = 30;
  double lr = 0.05;
  std::uint64_t seed = 0;
};

// Generates the training set, initialises the toy network and trains it, all
// from the one seed.
inline TrainResult train_reference(const ToyConfig& cfg) {
  const ShapesDataset data = generate_shapes(cfg.images, cfg.num_classes, cfg.seed);
  return train_toy(make_toy_model(cfg.num_classes, cfg.seed), data, cfg.epochs, cfg.lr,
                   cfg.seed);
}

}  // namespace saliency
