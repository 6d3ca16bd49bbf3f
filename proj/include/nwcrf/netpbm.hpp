#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "nwcrf/loss_metrics.hpp"

namespace nwcrf {

// Binary netpbm IO: 8-bit P6 color images in, 16-bit P5 depth maps out.
// Depth encodes at a fixed number of units per meter (256 by default);
// sample value 0 marks a pixel without a measurement.

constexpr double kDepthUnitsPerMeter = 256.0;

namespace detail {

inline int next_pnm_token(std::istream& in, std::string& token) {
  token.clear();
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (std::isspace(c)) {
      if (!token.empty()) return 0;
    } else {
      token.push_back(static_cast<char>(c));
    }
    c = in.get();
  }
  return token.empty() ? -1 : 0;
}

inline int64_t pnm_int(std::istream& in, const std::string& path) {
  std::string tok;
  if (next_pnm_token(in, tok) != 0) throw FormatError(path + ": truncated netpbm header");
  try {
    return std::stoll(tok);
  } catch (const std::exception&) {
    throw FormatError(path + ": bad netpbm header token `" + tok + "`");
  }
}

}  // namespace detail

inline Tensor read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open image " + path);
  char m0 = static_cast<char>(in.get()), m1 = static_cast<char>(in.get());
  if (m0 != 'P' || m1 != '6') throw FormatError(path + ": not a binary PPM (P6)");
  int64_t w = detail::pnm_int(in, path);
  int64_t h = detail::pnm_int(in, path);
  int64_t maxval = detail::pnm_int(in, path);
  if (w <= 0 || h <= 0) throw FormatError(path + ": bad extents");
  if (maxval != 255) throw FormatError(path + ": expected 8-bit PPM (maxval 255)");
  std::vector<char> raw(static_cast<size_t>(h * w * 3));
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size()))
    throw FormatError(path + ": truncated pixel data");
  Tensor img({h, w, 3});
  for (int64_t i = 0; i < h * w * 3; ++i)
    img[i] = static_cast<double>(static_cast<uint8_t>(raw[static_cast<size_t>(i)])) / 255.0;
  return img;
}

inline void write_ppm(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.extent(2) != 3)
    throw ShapeError("write_ppm: image extents " + extents_str(image.extents()));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out << "P6\n" << image.extent(1) << " " << image.extent(0) << "\n255\n";
  std::vector<char> raw(static_cast<size_t>(image.numel()));
  for (int64_t i = 0; i < image.numel(); ++i) {
    double v = std::round(std::min(1.0, std::max(0.0, image[i])) * 255.0);
    raw[static_cast<size_t>(i)] = static_cast<char>(static_cast<uint8_t>(v));
  }
  out.write(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!out) throw FormatError("short write to " + path);
}

// Writes depth as 16-bit P5 (big-endian samples per the netpbm spec).
// Invalid pixels encode as 0. Returns the number of saturated pixels.
inline int64_t write_pgm16(const std::string& path, const Tensor& depth, const Tensor* valid,
                           double units_per_meter = kDepthUnitsPerMeter) {
  if (depth.rank() != 2) throw ShapeError("write_pgm16: depth extents " + extents_str(depth.extents()));
  if (valid) require_same_extents(depth, *valid, "write_pgm16");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out << "P5\n" << depth.extent(1) << " " << depth.extent(0) << "\n65535\n";
  std::vector<char> raw(static_cast<size_t>(depth.numel() * 2));
  int64_t saturated = 0;
  for (int64_t i = 0; i < depth.numel(); ++i) {
    uint16_t code = 0;
    if (!valid || (*valid)[i] != 0.0) {
      double scaled = std::round(depth[i] * units_per_meter);
      if (scaled > 65535.0) {
        scaled = 65535.0;
        ++saturated;
      }
      if (scaled < 1.0) scaled = 1.0;  // keep valid pixels distinguishable from "no data"
      code = static_cast<uint16_t>(scaled);
    }
    raw[static_cast<size_t>(2 * i)] = static_cast<char>((code >> 8) & 0xff);
    raw[static_cast<size_t>(2 * i + 1)] = static_cast<char>(code & 0xff);
  }
  out.write(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!out) throw FormatError("short write to " + path);
  return saturated;
}

// Writes the sidecar recording the encoding scale next to a depth map.
inline void write_depth_scale_sidecar(const std::string& pgm_path,
                                      double units_per_meter = kDepthUnitsPerMeter) {
  std::string path = pgm_path + ".txt";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out << "units_per_meter = " << static_cast<int64_t>(units_per_meter) << "\n";
}

// Reads a 16-bit P5 depth map; value 0 means "no measurement".
inline std::pair<Tensor, Tensor> read_pgm16(const std::string& path,
                                            double units_per_meter = kDepthUnitsPerMeter) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open depth map " + path);
  char m0 = static_cast<char>(in.get()), m1 = static_cast<char>(in.get());
  if (m0 != 'P' || m1 != '5') throw FormatError(path + ": not a binary PGM (P5)");
  int64_t w = detail::pnm_int(in, path);
  int64_t h = detail::pnm_int(in, path);
  int64_t maxval = detail::pnm_int(in, path);
  if (w <= 0 || h <= 0) throw FormatError(path + ": bad extents");
  if (maxval != 65535) throw FormatError(path + ": expected 16-bit PGM (maxval 65535)");
  std::vector<char> raw(static_cast<size_t>(h * w * 2));
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size()))
    throw FormatError(path + ": truncated pixel data");
  Tensor depth({h, w});
  Tensor valid({h, w});
  for (int64_t i = 0; i < h * w; ++i) {
    uint16_t code = static_cast<uint16_t>(
        (static_cast<uint8_t>(raw[static_cast<size_t>(2 * i)]) << 8) |
        static_cast<uint8_t>(raw[static_cast<size_t>(2 * i + 1)]));
    if (code != 0) {
      depth[i] = static_cast<double>(code) / units_per_meter;
      valid[i] = 1.0;
    }
  }
  return {std::move(depth), std::move(valid)};
}

}  // namespace nwcrf
