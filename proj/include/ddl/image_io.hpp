#pragma once

// Uncompressed PGM (1 channel) / PPM (3 channels) output and CSV formatting.

#include "ddl/core.hpp"
#include "ddl/patch_ops.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

namespace ddl {

/// Writes a channel-major image with values in [0, 1] (clamped) as binary
/// PGM or PPM.
inline void write_pnm(const std::string& path, const Vec& pixels, const GridGeometry& shape) {
  require(shape.channels == 1 || shape.channels == 3, ErrorCode::invalid_argument,
          "write_pnm: only 1 or 3 channels are supported");
  require(pixels.size() == shape.size(), ErrorCode::dimension_mismatch,
          "write_pnm: pixel count does not match " + shape.str());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(bool(out), ErrorCode::io, "cannot write " + path);
  out << (shape.channels == 1 ? "P5" : "P6") << "\n"
      << shape.width << " " << shape.height << "\n255\n";
  const Index cells = shape.cells();
  for (Index p = 0; p < cells; ++p)
    for (Index c = 0; c < shape.channels; ++c) {
      const double v = std::clamp(pixels[c * cells + p], 0.0, 1.0);
      out.put(char(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
  require(bool(out), ErrorCode::io, "write failed: " + path);
}

/// Shortest decimal that round-trips a double.
inline std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  const std::string longest = os.str();
  for (int prec = 6; prec < 17; ++prec) {
    std::ostringstream t;
    t << std::setprecision(prec) << v;
    if (std::stod(t.str()) == v) return t.str();
  }
  return longest;
}

}  // namespace ddl
