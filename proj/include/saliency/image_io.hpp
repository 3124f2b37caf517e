#pragma once

// Portable graymap/pixmap (P5/P6, 8-bit) reading and writing, heatmap
// rendering and CSV grids.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

#include "saliency/aggregate.hpp"
#include "saliency/tensor.hpp"

namespace saliency {

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// Writes a 1- or 3-channel tensor with values in [0, 1].
inline void write_pnm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
    throw std::invalid_argument("write_pnm: need a 1 or 3 channel image, got " +
                                shape_str(image.shape()));
  }
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << (C == 1 ? "P5" : "P6") << '\n' << W << ' ' << H << "\n255\n";
  std::vector<char> bytes(C * H * W);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      for (std::size_t c = 0; c < C; ++c) {
        bytes[(y * W + x) * C + c] = static_cast<char>(to_byte(image.at(c, y, x)));
      }
    }
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Tensor read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P5" && magic != "P6") {
    throw std::runtime_error(path.string() + ": not a binary PGM/PPM file");
  }
  auto next_int = [&]() {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string skip;
      std::getline(in, skip);
      in >> std::ws;
    }
    long v = -1;
    in >> v;
    if (!in || v <= 0) throw std::runtime_error(path.string() + ": bad header");
    return static_cast<std::size_t>(v);
  };
  const std::size_t W = next_int(), H = next_int(), maxval = next_int();
  if (maxval != 255) throw std::runtime_error(path.string() + ": only 8-bit images supported");
  in.get();
  const std::size_t C = magic == "P5" ? 1 : 3;
  std::vector<unsigned char> bytes(C * H * W);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw std::runtime_error(path.string() + ": truncated pixel data");
  }
  Tensor img({C, H, W});
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      for (std::size_t c = 0; c < C; ++c) {
        img.at(c, y, x) = bytes[(y * W + x) * C + c] / 255.0;
      }
    }
  }
  return img;
}

// Piecewise-linear blue -> cyan -> yellow -> red lookup, 256 entries.
inline const std::array<std::array<std::uint8_t, 3>, 256>& heat_colormap() {
  static const auto table = [] {
    std::array<std::array<std::uint8_t, 3>, 256> t{};
    constexpr std::array<std::array<double, 3>, 5> stops = {{
        {0.0, 0.0, 0.5}, {0.0, 0.5, 1.0}, {0.5, 1.0, 0.5}, {1.0, 0.8, 0.0}, {0.6, 0.0, 0.0}}};
    for (std::size_t i = 0; i < 256; ++i) {
      const double pos = static_cast<double>(i) / 255.0 * 4.0;
      const auto lo = std::min<std::size_t>(static_cast<std::size_t>(pos), 3);
      const double f = pos - static_cast<double>(lo);
      for (std::size_t c = 0; c < 3; ++c) {
        t[i][c] = to_byte(stops[lo][c] + f * (stops[lo + 1][c] - stops[lo][c]));
      }
    }
    return t;
  }();
  return table;
}

// Min-max normalised heatmap; grayscale PGM, or colour PPM when `color`.
inline void write_heatmap(const std::filesystem::path& path, const SaliencyMap& map,
                          bool color) {
  double lo = 0.0, hi = 0.0;
  if (!map.values.empty()) {
    const auto [a, b] = std::minmax_element(map.values.begin(), map.values.end());
    lo = *a;
    hi = *b;
  }
  const double range = hi - lo;
  Tensor img({color ? 3u : 1u, map.height, map.width});
  const auto& lut = heat_colormap();
  for (std::size_t r = 0; r < map.height; ++r) {
    for (std::size_t c = 0; c < map.width; ++c) {
      const double v = range > 0.0 ? (map.at(r, c) - lo) / range : 0.0;
      if (!color) {
        img.at(0, r, c) = v;
      } else {
        const auto& rgb = lut[to_byte(v)];
        for (std::size_t k = 0; k < 3; ++k) img.at(k, r, c) = rgb[k] / 255.0;
      }
    }
  }
  write_pnm(path, img);
}

// Shortest round-trip decimal form.
inline std::string format_double(double v) {
  std::array<char, 32> buf{};
  auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

inline void write_map_csv(const std::filesystem::path& path, const SaliencyMap& map) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (std::size_t r = 0; r < map.height; ++r) {
    for (std::size_t c = 0; c < map.width; ++c) {
      if (c) out << ',';
      out << format_double(map.at(r, c));
    }
    out << '\n';
  }
}

inline SaliencyMap read_map_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  SaliencyMap map;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::size_t cols = 0;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      double v = 0.0;
      auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (res.ec != std::errc{}) throw std::runtime_error(path.string() + ": bad number");
      map.values.push_back(v);
      ++cols;
    }
    if (map.height == 0) map.width = cols;
    if (cols != map.width) throw std::runtime_error(path.string() + ": ragged grid");
    ++map.height;
  }
  return map;
}

}  // namespace saliency
