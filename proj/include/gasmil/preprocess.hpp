/*
 * Copyright 2026 The gasmil Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Tissue detection and tiling on plain RGB rasters.
//
// The low-magnification view is converted to HSV, hue and saturation are
// quantized to 256 bins and thresholded (Otsu per channel, or a fixed
// normalized level), the two masks are ANDed and dilated, and the mask is
// mapped onto the full-resolution grid to pick tiles.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gasmil/errors.hpp"

namespace gasmil {

struct RasterImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> data;  // RGB, row-major

  RasterImage() = default;
  RasterImage(std::size_t w, std::size_t h, std::array<std::uint8_t, 3> fill = {255, 255, 255})
      : width(w), height(h), data(w * h * 3) {
    for (std::size_t i = 0; i < w * h; ++i) std::copy(fill.begin(), fill.end(), data.begin() + 3 * i);
  }

  void validate() const {
    if (data.size() != width * height * 3)
      throw DimensionError("raster image: " + std::to_string(data.size()) + " bytes for " + std::to_string(width) +
                           "x" + std::to_string(height) + " RGB");
  }

  std::uint8_t* pixel(std::size_t x, std::size_t y) noexcept { return data.data() + 3 * (y * width + x); }
  const std::uint8_t* pixel(std::size_t x, std::size_t y) const noexcept { return data.data() + 3 * (y * width + x); }

  void set(std::size_t x, std::size_t y, std::array<std::uint8_t, 3> rgb) noexcept {
    std::copy(rgb.begin(), rgb.end(), pixel(x, y));
  }

  friend bool operator==(const RasterImage&, const RasterImage&) = default;
};

// ---------------------------------------------------------------------------
// Binary PPM (P6, maxval 255)

inline RasterImage decode_ppm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > (1u << 24)) throw FormatError(std::string("PPM ") + what + " too large", start);
    }
    if (pos == start) throw FormatError(std::string("PPM: expected ") + what, start);
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw FormatError("not a binary PPM (P6)", 0);
  pos = 2;
  RasterImage img;
  img.width = number("width");
  img.height = number("height");
  const std::size_t maxval_at = pos;
  if (number("maxval") != 255) throw FormatError("only maxval 255 is supported", maxval_at);
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError("PPM: missing separator", pos);
  ++pos;
  const std::size_t need = img.width * img.height * 3;
  if (bytes.size() - pos < need) throw FormatError("truncated PPM pixel data", bytes.size());
  img.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                  bytes.begin() + static_cast<std::ptrdiff_t>(pos + need));
  return img;
}

inline std::vector<std::uint8_t> encode_ppm(const RasterImage& img) {
  img.validate();
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.data.begin(), img.data.end());
  return out;
}

inline RasterImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParameterError("cannot open image " + path.string());
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_ppm(bytes);
}

inline void write_ppm(const std::filesystem::path& path, const RasterImage& img) {
  const auto bytes = encode_ppm(img);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ParameterError("cannot write image " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline RasterImage crop(const RasterImage& img, std::size_t x0, std::size_t y0, std::size_t w, std::size_t h) {
  if (x0 + w > img.width || y0 + h > img.height) throw DimensionError("crop outside image bounds");
  RasterImage out(w, h);
  for (std::size_t y = 0; y < h; ++y)
    std::copy(img.pixel(x0, y0 + y), img.pixel(x0, y0 + y) + 3 * w, out.pixel(0, y));
  return out;
}

/// Box-filter downsample by an integer factor; edge blocks average what
/// they cover.
inline RasterImage downsample(const RasterImage& img, std::size_t factor) {
  if (factor == 0) throw ParameterError("downsample factor must be positive");
  if (factor == 1) return img;
  const std::size_t w = (img.width + factor - 1) / factor;
  const std::size_t h = (img.height + factor - 1) / factor;
  RasterImage out(w, h);
  for (std::size_t by = 0; by < h; ++by)
    for (std::size_t bx = 0; bx < w; ++bx) {
      std::array<std::size_t, 3> sum{};
      std::size_t count = 0;
      for (std::size_t y = by * factor; y < std::min(img.height, (by + 1) * factor); ++y)
        for (std::size_t x = bx * factor; x < std::min(img.width, (bx + 1) * factor); ++x, ++count)
          for (int c = 0; c < 3; ++c) sum[c] += img.pixel(x, y)[c];
      for (int c = 0; c < 3; ++c) out.pixel(bx, by)[c] = static_cast<std::uint8_t>((sum[c] + count / 2) / count);
    }
  return out;
}

// ---------------------------------------------------------------------------
// HSV

struct HsvPlanes {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> h, s, v;  // each in [0, 1]; h in [0, 1)
};

/// Hexcone conversion. Achromatic pixels get H = S = 0 (black also S = 0).
inline std::array<double, 3> rgb_to_hsv(std::uint8_t r8, std::uint8_t g8, std::uint8_t b8) {
  const double r = r8 / 255.0, g = g8 / 255.0, b = b8 / 255.0;
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double delta = mx - mn;
  double h = 0.0;
  if (delta > 0.0) {
    if (mx == r) h = (g - b) / delta;
    else if (mx == g) h = 2.0 + (b - r) / delta;
    else h = 4.0 + (r - g) / delta;
    h /= 6.0;
    if (h < 0.0) h += 1.0;
    if (h >= 1.0) h -= 1.0;
  }
  const double s = mx > 0.0 ? delta / mx : 0.0;
  return {h, s, mx};
}

inline HsvPlanes rgb_to_hsv(const RasterImage& img) {
  img.validate();
  HsvPlanes out{img.width, img.height, {}, {}, {}};
  const std::size_t n = img.width * img.height;
  out.h.resize(n);
  out.s.resize(n);
  out.v.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto hsv = rgb_to_hsv(img.data[3 * i], img.data[3 * i + 1], img.data[3 * i + 2]);
    out.h[i] = hsv[0];
    out.s[i] = hsv[1];
    out.v[i] = hsv[2];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Otsu

using Histogram = std::array<std::uint64_t, 256>;

/// Bin of a [0, 1] value in a 256-bin histogram.
inline std::size_t to_bin(double v) {
  return static_cast<std::size_t>(std::clamp(std::lround(v * 255.0), 0L, 255L));
}

inline Histogram histogram_of(std::span<const double> values) {
  Histogram h{};
  for (double v : values) ++h[to_bin(v)];
  return h;
}

/// Thrown by otsu_threshold when the histogram occupies a single bin.
class DegenerateHistogramError : public ParameterError {
 public:
  DegenerateHistogramError(const std::string& what, std::size_t bin) : ParameterError(what), bin_(bin) {}
  std::size_t bin() const noexcept { return bin_; }

 private:
  std::size_t bin_;
};

/// Otsu's between-class variance for the split {0..t} | {t+1..255}, in the
/// form (N*S0 - N0*S)^2 / (N0*N1), proportional to w0*w1*(mu0-mu1)^2. The
/// sums are exact integers so equal splits compare equal.
inline double otsu_between_class_score(std::uint64_t total, std::uint64_t total_sum, std::uint64_t below,
                                       std::uint64_t below_sum) {
  const std::uint64_t above = total - below;
  if (below == 0 || above == 0) return 0.0;
  const __int128 diff = static_cast<__int128>(total) * below_sum - static_cast<__int128>(below) * total_sum;
  const double d = static_cast<double>(diff);
  return d * d / (static_cast<double>(below) * static_cast<double>(above));
}

/// Bin t maximizing between-class variance, splitting {0..t} from the rest;
/// ties go to the lowest bin.
inline std::size_t otsu_threshold(const Histogram& hist) {
  std::uint64_t total = 0, total_sum = 0;
  std::size_t occupied = 0, last = 0;
  for (std::size_t i = 0; i < 256; ++i) {
    total += hist[i];
    total_sum += hist[i] * i;
    if (hist[i] != 0) {
      ++occupied;
      last = i;
    }
  }
  if (total == 0) throw ParameterError("otsu_threshold: empty histogram");
  if (occupied == 1)
    throw DegenerateHistogramError("otsu_threshold: all mass in bin " + std::to_string(last) + "; no threshold exists",
                                   last);
  std::uint64_t below = 0, below_sum = 0;
  double best = -1.0;
  std::size_t best_bin = 0;
  for (std::size_t t = 0; t < 256; ++t) {
    below += hist[t];
    below_sum += hist[t] * t;
    const double score = otsu_between_class_score(total, total_sum, below, below_sum);
    if (score > best) {
      best = score;
      best_bin = t;
    }
  }
  return best_bin;
}

// ---------------------------------------------------------------------------
// Tissue mask

struct TissueMask {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> bits;  // 0 or 1, row-major
  std::size_t scale_factor = 16;   // full-resolution pixels per mask pixel

  bool at(std::size_t x, std::size_t y) const noexcept { return bits[y * width + x] != 0; }
  std::size_t count() const noexcept { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }

  friend bool operator==(const TissueMask&, const TissueMask&) = default;
};

enum class ThresholdMode { kOtsu, kFixed };

struct TissueMaskOptions {
  ThresholdMode mode = ThresholdMode::kOtsu;
  /// Normalized level for both channels in fixed mode.
  double fixed_threshold = 0.6;
  std::size_t dilation_radius = 1;
  std::size_t scale_factor = 16;
};

/// Square-element binary dilation of the given radius.
inline std::vector<std::uint8_t> dilate(std::span<const std::uint8_t> bits, std::size_t width, std::size_t height,
                                        std::size_t radius) {
  std::vector<std::uint8_t> out(bits.begin(), bits.end());
  if (radius == 0) return out;
  // Separable: horizontal pass then vertical pass.
  std::vector<std::uint8_t> tmp(bits.size(), 0);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t lo = x >= radius ? x - radius : 0;
      const std::size_t hi = std::min(width - 1, x + radius);
      for (std::size_t k = lo; k <= hi; ++k)
        if (bits[y * width + k]) {
          tmp[y * width + x] = 1;
          break;
        }
    }
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t lo = y >= radius ? y - radius : 0;
      const std::size_t hi = std::min(height - 1, y + radius);
      std::uint8_t v = 0;
      for (std::size_t k = lo; k <= hi && !v; ++k) v = tmp[k * width + x];
      out[y * width + x] = v;
    }
  return out;
}

/// Per-channel level in bin units: pixels pass when their bin exceeds it.
/// A hue or saturation channel with all mass in bin 0 carries no signal;
/// its level is 255 so nothing passes. Any other single-bin histogram has
/// no meaningful split and raises DegenerateHistogramError.
inline std::size_t channel_threshold(std::span<const double> channel, const TissueMaskOptions& opt) {
  if (opt.mode == ThresholdMode::kFixed) return to_bin(opt.fixed_threshold);
  try {
    return otsu_threshold(histogram_of(channel));
  } catch (const DegenerateHistogramError& e) {
    if (e.bin() == 0) return 255;
    throw;
  }
}

/// mask = (H > t_H) AND (S > t_S), then dilation.
inline TissueMask tissue_mask(const RasterImage& img, const TissueMaskOptions& opt = {}) {
  if (opt.scale_factor < 1) throw ParameterError("tissue_mask: scale factor must be at least 1");
  if (img.width == 0 || img.height == 0) throw ParameterError("tissue_mask: empty image");
  const HsvPlanes hsv = rgb_to_hsv(img);
  const std::size_t t_h = channel_threshold(hsv.h, opt);
  const std::size_t t_s = channel_threshold(hsv.s, opt);
  TissueMask mask{img.width, img.height, std::vector<std::uint8_t>(img.width * img.height, 0), opt.scale_factor};
  for (std::size_t i = 0; i < mask.bits.size(); ++i)
    mask.bits[i] = to_bin(hsv.h[i]) > t_h && to_bin(hsv.s[i]) > t_s;
  mask.bits = dilate(mask.bits, mask.width, mask.height, opt.dilation_radius);
  return mask;
}

// ---------------------------------------------------------------------------
// Tiling

struct TileGrid {
  std::size_t tile_size = 224;
  double coverage_threshold = 0.5;
  std::vector<std::pair<std::size_t, std::size_t>> coords;  // full-resolution top-left (x, y)
};

/// Fraction of a full-resolution tile covered by mask pixels.
inline double tile_coverage(const TissueMask& mask, std::size_t x0, std::size_t y0, std::size_t tile) {
  const std::size_t sc = mask.scale_factor;
  std::uint64_t covered = 0;
  const std::size_t mx_end = std::min(mask.width, (x0 + tile + sc - 1) / sc);
  const std::size_t my_end = std::min(mask.height, (y0 + tile + sc - 1) / sc);
  for (std::size_t my = y0 / sc; my < my_end; ++my) {
    const std::size_t oy = std::min((my + 1) * sc, y0 + tile) - std::max(my * sc, y0);
    for (std::size_t mx = x0 / sc; mx < mx_end; ++mx) {
      if (!mask.at(mx, my)) continue;
      const std::size_t ox = std::min((mx + 1) * sc, x0 + tile) - std::max(mx * sc, x0);
      covered += ox * oy;
    }
  }
  return static_cast<double>(covered) / static_cast<double>(tile * tile);
}

/// Non-overlapping row-major grid over the full-resolution extent (the mask
/// extent times its scale unless given); keeps tiles with coverage at or
/// above the threshold.
inline TileGrid tile_coords(const TissueMask& mask, std::size_t tile_size = 224, double coverage_threshold = 0.5,
                            std::optional<std::pair<std::size_t, std::size_t>> full_extent = std::nullopt) {
  if (tile_size < 1) throw ParameterError("tile_coords: tile size must be at least 1");
  const std::size_t full_w = full_extent ? full_extent->first : mask.width * mask.scale_factor;
  const std::size_t full_h = full_extent ? full_extent->second : mask.height * mask.scale_factor;
  TileGrid grid{tile_size, coverage_threshold, {}};
  for (std::size_t y = 0; y + tile_size <= full_h; y += tile_size)
    for (std::size_t x = 0; x + tile_size <= full_w; x += tile_size)
      if (tile_coverage(mask, x, y, tile_size) >= coverage_threshold) grid.coords.emplace_back(x, y);
  return grid;
}

}  // namespace gasmil
