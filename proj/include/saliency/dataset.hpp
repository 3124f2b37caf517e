#pragma once

// Synthetic shapes dataset: each image holds one target shape of its class
// plus distractor shapes, with exact bounding-box annotations.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "saliency/image_io.hpp"
#include "saliency/tensor.hpp"

namespace saliency {

// Inclusive pixel rectangle.
struct Box {
  int top = 0;
  int left = 0;
  int bottom = 0;
  int right = 0;

  int area() const noexcept { return (bottom - top + 1) * (right - left + 1); }
  friend bool operator==(const Box&, const Box&) = default;
};

struct Annotation {
  std::string image_id;
  std::size_t cls = 0;
  std::vector<Box> boxes;

  friend bool operator==(const Annotation&, const Annotation&) = default;
};

struct ShapesDataset {
  std::size_t num_classes = 0;
  std::uint64_t seed = 0;
  std::vector<Tensor> images;
  std::vector<std::size_t> labels;
  std::vector<Annotation> annotations;

  std::size_t size() const noexcept { return images.size(); }
  friend bool operator==(const ShapesDataset&, const ShapesDataset&) = default;
};

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ShapeKind { Square, Circle, Triangle, Cross };

inline constexpr std::size_t kMaxClasses = 8;

// Class c is shape (c mod 4) drawn in colour c.
inline ShapeKind class_shape(std::size_t cls) { return static_cast<ShapeKind>(cls % 4); }

inline const std::array<std::array<double, 3>, kMaxClasses>& class_palette() {
  static constexpr std::array<std::array<double, 3>, kMaxClasses> p = {{
      {0.9, 0.15, 0.15}, {0.15, 0.85, 0.2}, {0.2, 0.35, 0.95}, {0.95, 0.9, 0.15},
      {0.9, 0.2, 0.85},  {0.15, 0.9, 0.9},  {0.95, 0.55, 0.1}, {0.95, 0.95, 0.95}}};
  return p;
}

// Distractors borrow another class's shape but are painted in this neutral
// colour, which no class uses.
inline constexpr std::array<double, 3> kDistractorColor = {0.55, 0.55, 0.55};

struct ShapesConfig {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t min_shape = 6;
  std::size_t max_shape = 10;
  std::size_t max_distractors = 2;
  double background = 0.1;
  double noise = 0.05;
};

namespace detail {

inline bool shape_covers(ShapeKind kind, std::size_t s, std::size_t r, std::size_t c) {
  const double centre = (static_cast<double>(s) - 1.0) / 2.0;
  const double dr = static_cast<double>(r) - centre, dc = static_cast<double>(c) - centre;
  switch (kind) {
    case ShapeKind::Square:
      return true;
    case ShapeKind::Circle: {
      const double rad = static_cast<double>(s) / 2.0;
      return dr * dr + dc * dc <= rad * rad;
    }
    case ShapeKind::Triangle:
      // apex at the top row, base spanning the bottom row
      return std::abs(dc) <= static_cast<double>(r) / 2.0 + 0.5;
    case ShapeKind::Cross: {
      const double half = std::max(1.0, static_cast<double>(s) / 6.0);
      return std::abs(dr) <= half || std::abs(dc) <= half;
    }
  }
  return false;
}

inline double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

inline bool overlaps(const Box& a, const Box& b, int margin) {
  return !(a.right + margin < b.left || b.right + margin < a.left ||
           a.bottom + margin < b.top || b.bottom + margin < a.top);
}

}  // namespace detail

inline std::string image_id_for(std::size_t index) {
  std::ostringstream oss;
  oss << std::setw(5) << std::setfill('0') << index;
  return oss.str();
}

// Pixel values are multiples of 1/255 so the dataset survives an 8-bit
// export unchanged.
inline ShapesDataset generate_shapes(std::size_t num_images, std::size_t num_classes,
                                     std::uint64_t seed, const ShapesConfig& cfg = {}) {
  if (num_classes < 2 || num_classes > kMaxClasses) {
    throw std::invalid_argument("generate_shapes: num_classes must be in [2, 8]");
  }
  if (cfg.channels != 1 && cfg.channels != 3) {
    throw std::invalid_argument("generate_shapes: channels must be 1 or 3");
  }
  if (cfg.max_shape > cfg.image_size || cfg.min_shape < 3 || cfg.min_shape > cfg.max_shape) {
    throw std::invalid_argument("generate_shapes: bad shape size range");
  }
  ShapesDataset ds;
  ds.num_classes = num_classes;
  ds.seed = seed;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> noise(-cfg.noise, cfg.noise);
  std::uniform_int_distribution<std::size_t> size_dist(cfg.min_shape, cfg.max_shape);
  std::uniform_int_distribution<std::size_t> distractor_count(1, cfg.max_distractors);
  const std::size_t S = cfg.image_size;

  for (std::size_t n = 0; n < num_images; ++n) {
    const std::size_t label = n % num_classes;
    Tensor img({cfg.channels, S, S});
    for (double& v : img.data()) v = cfg.background + noise(rng);

    std::vector<std::size_t> shapes{label};
    const std::size_t nd = distractor_count(rng);
    std::uniform_int_distribution<std::size_t> other(1, num_classes - 1);
    for (std::size_t d = 0; d < nd; ++d) shapes.push_back((label + other(rng)) % num_classes);

    std::vector<Box> placed;
    Annotation ann{image_id_for(n), label, {}};
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      const std::size_t s = size_dist(rng);
      std::uniform_int_distribution<int> pos(0, static_cast<int>(S - s));
      Box box;
      bool ok = false;
      for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
        box.top = pos(rng);
        box.left = pos(rng);
        box.bottom = box.top + static_cast<int>(s) - 1;
        box.right = box.left + static_cast<int>(s) - 1;
        ok = std::none_of(placed.begin(), placed.end(),
                          [&](const Box& b) { return detail::overlaps(box, b, 1); });
      }
      if (!ok) {
        throw GenerationError("generate_shapes: cannot place shape " + std::to_string(i) +
                              " in image " + std::to_string(n) + " without overlap");
      }
      placed.push_back(box);

      const ShapeKind kind = class_shape(shapes[i]);
      const auto& rgb = i == 0 ? class_palette()[label] : kDistractorColor;
      Box tight{box.bottom, box.right, box.top, box.left};
      for (std::size_t r = 0; r < s; ++r) {
        for (std::size_t c = 0; c < s; ++c) {
          if (!detail::shape_covers(kind, s, r, c)) continue;
          const std::size_t y = static_cast<std::size_t>(box.top) + r;
          const std::size_t x = static_cast<std::size_t>(box.left) + c;
          if (cfg.channels == 3) {
            for (std::size_t k = 0; k < 3; ++k) img.at(k, y, x) = rgb[k];
          } else {
            img.at(0, y, x) = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
          }
          tight.top = std::min(tight.top, static_cast<int>(y));
          tight.left = std::min(tight.left, static_cast<int>(x));
          tight.bottom = std::max(tight.bottom, static_cast<int>(y));
          tight.right = std::max(tight.right, static_cast<int>(x));
        }
      }
      if (i == 0) ann.boxes.push_back(tight);
    }
    for (double& v : img.data()) v = detail::quantize(v);
    ds.images.push_back(std::move(img));
    ds.labels.push_back(label);
    ds.annotations.push_back(std::move(ann));
  }
  return ds;
}

// <dir>/index.json plus one PPM (or PGM) per image under <dir>/images.
inline void export_dataset(const ShapesDataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  nlohmann::json index;
  index["format"] = "shapes-dataset";
  index["version"] = 1;
  index["num_classes"] = ds.num_classes;
  index["seed"] = ds.seed;
  nlohmann::json items = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& ann = ds.annotations[i];
    const std::string file =
        "images/" + ann.image_id + (ds.images[i].dim(0) == 1 ? ".pgm" : ".ppm");
    write_pnm(dir / file, ds.images[i]);
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& b : ann.boxes) boxes.push_back({b.top, b.left, b.bottom, b.right});
    items.push_back({{"id", ann.image_id}, {"file", file}, {"label", ds.labels[i]},
                     {"boxes", boxes}});
  }
  index["images"] = std::move(items);
  std::ofstream out(dir / "index.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "index.json").string());
  out << index.dump(1) << '\n';
}

inline ShapesDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "index.json");
  if (!in) throw std::runtime_error("cannot read " + (dir / "index.json").string());
  const nlohmann::json index = nlohmann::json::parse(in);
  if (index.value("format", "") != "shapes-dataset" || index.value("version", 0) != 1) {
    throw std::runtime_error((dir / "index.json").string() + ": unsupported dataset format");
  }
  ShapesDataset ds;
  ds.num_classes = index.at("num_classes").get<std::size_t>();
  ds.seed = index.at("seed").get<std::uint64_t>();
  for (const auto& item : index.at("images")) {
    Annotation ann;
    ann.image_id = item.at("id").get<std::string>();
    ann.cls = item.at("label").get<std::size_t>();
    for (const auto& b : item.at("boxes")) {
      ann.boxes.push_back({b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>(),
                           b.at(3).get<int>()});
    }
    ds.images.push_back(read_pnm(dir / item.at("file").get<std::string>()));
    ds.labels.push_back(ann.cls);
    ds.annotations.push_back(std::move(ann));
  }
  return ds;
}

}  // namespace saliency
