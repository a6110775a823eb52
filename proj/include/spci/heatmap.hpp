// SPDX-License-Identifier: Apache-2.0
//
// Attention maps as binary 8-bit graymaps ("P5\n<w> <h>\n255\n" + raster).
// Values in (0,1) map to round(v * 255).
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "spci/tensor.hpp"

namespace spci {

struct Heatmap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

inline std::uint8_t to_gray(double v) {
  const double s = std::round(v * 255.0);
  return static_cast<std::uint8_t>(s < 0.0 ? 0.0 : (s > 255.0 ? 255.0 : s));
}

// One channel plane of a spatial attention map (w_p or a w_c channel).
template <typename T>
Heatmap heatmap_plane(const Tensor<T>& w, std::size_t n, std::size_t c) {
  Heatmap m{w.w(), w.h(), {}};
  m.pixels.reserve(w.plane());
  for (std::size_t i = 0; i < w.h(); ++i)
    for (std::size_t j = 0; j < w.w(); ++j) m.pixels.push_back(to_gray(w.at(n, c, i, j)));
  return m;
}

// Channel weights [N,C,1,1] as a 1xC strip (height 1, width C).
template <typename T>
Heatmap heatmap_strip(const Tensor<T>& w, std::size_t n) {
  Heatmap m{w.c(), 1, {}};
  for (std::size_t c = 0; c < w.c(); ++c) m.pixels.push_back(to_gray(w.at(n, c, 0, 0)));
  return m;
}

inline std::string encode_pgm(const Heatmap& m) {
  std::string out = "P5\n" + std::to_string(m.width) + " " + std::to_string(m.height) + "\n255\n";
  out.append(m.pixels.begin(), m.pixels.end());
  return out;
}

inline void write_pgm(const std::filesystem::path& path, const Heatmap& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  const std::string bytes = encode_pgm(m);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed for " + path.string());
}

}  // namespace spci
