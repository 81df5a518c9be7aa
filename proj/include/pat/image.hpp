#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "pat/errors.hpp"

namespace pat {

/// Corner-aligned bilinear resample of a square intensity image. Output pixel
/// (r, c) samples the source at (r, c) * (src_side-1) / (dst_side-1), so the
/// four corners map exactly onto the source corners and constant images stay
/// constant.
inline std::vector<double> bilinear_resize(std::span<const double> src, std::size_t src_side,
                                           std::size_t dst_side) {
  require_shape(src.size() == src_side * src_side, "bilinear_resize: bad source size");
  require_shape(src_side >= 2 && dst_side >= 2, "bilinear_resize: sides must be >= 2");
  std::vector<double> dst(dst_side * dst_side);
  const double scale = static_cast<double>(src_side - 1) / static_cast<double>(dst_side - 1);
  for (std::size_t r = 0; r < dst_side; ++r) {
    const double sr = static_cast<double>(r) * scale;
    std::size_t r0 = static_cast<std::size_t>(sr);
    if (r0 >= src_side - 1) r0 = src_side - 2;
    const double fr = sr - static_cast<double>(r0);
    for (std::size_t c = 0; c < dst_side; ++c) {
      const double sc = static_cast<double>(c) * scale;
      std::size_t c0 = static_cast<std::size_t>(sc);
      if (c0 >= src_side - 1) c0 = src_side - 2;
      const double fc = sc - static_cast<double>(c0);
      const double a = src[r0 * src_side + c0];
      const double b = src[r0 * src_side + c0 + 1];
      const double d = src[(r0 + 1) * src_side + c0];
      const double e = src[(r0 + 1) * src_side + c0 + 1];
      dst[r * dst_side + c] = a * (1.0 - fr) * (1.0 - fc) + b * (1.0 - fr) * fc +
                              d * fr * (1.0 - fc) + e * fr * fc;
    }
  }
  return dst;
}

/// Copies the quadrant (which: 0=TL, 1=TR, 2=BL, 3=BR) of a square image.
inline std::vector<double> crop_quadrant(std::span<const double> image, std::size_t side, int which) {
  require_shape(side % 2 == 0, "crop_quadrant: image side must be even");
  require_shape(image.size() == side * side, "crop_quadrant: bad image size");
  const std::size_t half = side / 2;
  const std::size_t row0 = (which / 2) * half;
  const std::size_t col0 = (which % 2) * half;
  std::vector<double> out(half * half);
  for (std::size_t r = 0; r < half; ++r)
    for (std::size_t c = 0; c < half; ++c) out[r * half + c] = image[(row0 + r) * side + col0 + c];
  return out;
}

}  // namespace pat
