#include "sketchssl/raster.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>

namespace sketchssl {
namespace {

constexpr double kNormTolerance = 1e-9;

// Pixel centers sit on the integer grid; a center is inked when it lies
// within 0.5 of the segment. With integer endpoints the squared distances
// are rationals that never land exactly on 0.25, so the comparisons below
// are unambiguous and the result is platform-independent.
bool covers(std::int64_t ax, std::int64_t ay, std::int64_t bx, std::int64_t by,
            std::int64_t x, std::int64_t y) {
  const std::int64_t dx = bx - ax;
  const std::int64_t dy = by - ay;
  const std::int64_t px = x - ax;
  const std::int64_t py = y - ay;
  const std::int64_t len2 = dx * dx + dy * dy;
  if (len2 == 0) return px == 0 && py == 0;
  const std::int64_t tnum = px * dx + py * dy;
  // Beyond either endpoint the nearest segment point is that endpoint; the
  // endpoints themselves project inside, so here the pixel is a distinct
  // grid point at distance >= 1 from the nearest endpoint.
  if (tnum < 0 || tnum > len2) return false;
  const std::int64_t cross = px * dy - py * dx;
  return 4 * cross * cross <= len2;
}

void mark_segment(std::vector<std::uint8_t>& mask, int height, int width,
                  int ax, int ay, int bx, int by) {
  const int x_lo = std::max(0, std::min(ax, bx) - 1);
  const int x_hi = std::min(width - 1, std::max(ax, bx) + 1);
  const int y_lo = std::max(0, std::min(ay, by) - 1);
  const int y_hi = std::min(height - 1, std::max(ay, by) + 1);
  for (int y = y_lo; y <= y_hi; ++y) {
    for (int x = x_lo; x <= x_hi; ++x) {
      if (covers(ax, ay, bx, by, x, y)) {
        mask[static_cast<std::size_t>(y) * width + x] = 1;
      }
    }
  }
}

}  // namespace

void RasterConfig::validate() const {
  require(height >= 8 && width >= 8, ErrorCode::ConfigError,
          "canvas must be at least 8x8, got " + std::to_string(height) + "x" +
              std::to_string(width));
  require(channels == 1 || channels == 3, ErrorCode::ConfigError,
          "channels must be 1 or 3, got " + std::to_string(channels));
  require(stroke_width >= 1, ErrorCode::ConfigError,
          "stroke_width must be >= 1, got " + std::to_string(stroke_width));
  require(background != ink, ErrorCode::ConfigError,
          "background and ink intensities must differ");
}

RasterImage render(const StrokeSequence& seq, const RasterConfig& cfg) {
  cfg.validate();
  require(!seq.points.empty(), ErrorCode::EmptyInput, "cannot render an empty sequence");
  for (std::size_t t = 0; t < seq.points.size(); ++t) {
    const auto& p = seq.points[t];
    const bool normalized = p.x >= -kNormTolerance && p.x <= 1.0 + kNormTolerance &&
                            p.y >= -kNormTolerance && p.y <= 1.0 + kNormTolerance;
    require(normalized, ErrorCode::UnnormalizedInput,
            "point " + std::to_string(t) + " is outside [0,1]^2: (" +
                std::to_string(p.x) + ", " + std::to_string(p.y) + ")");
  }

  const std::size_t n = seq.points.size();
  std::vector<int> sx(n), sy(n);
  for (std::size_t t = 0; t < n; ++t) {
    const double x = std::clamp(seq.points[t].x, 0.0, 1.0);
    const double y = std::clamp(seq.points[t].y, 0.0, 1.0);
    sx[t] = static_cast<int>(std::lround(x * (cfg.width - 1)));
    sy[t] = static_cast<int>(std::lround(y * (cfg.height - 1)));
  }

  std::vector<std::uint8_t> unit(static_cast<std::size_t>(cfg.height) * cfg.width, 0);
  for (std::size_t t = 0; t + 1 < n; ++t) {
    if (seq.points[t].state != PenState::kDown) continue;
    mark_segment(unit, cfg.height, cfg.width, sx[t], sy[t], sx[t + 1], sy[t + 1]);
  }

  // Square dilation; the offset window for width w nests inside the window
  // for w+1, so ink coverage is monotone in stroke_width.
  const int off_lo = -((cfg.stroke_width - 1) / 2);
  const int off_hi = cfg.stroke_width / 2;
  std::vector<std::uint8_t> mask(unit.size(), 0);
  for (int y = 0; y < cfg.height; ++y) {
    for (int x = 0; x < cfg.width; ++x) {
      if (!unit[static_cast<std::size_t>(y) * cfg.width + x]) continue;
      for (int oy = off_lo; oy <= off_hi; ++oy) {
        for (int ox = off_lo; ox <= off_hi; ++ox) {
          const int yy = y + oy;
          const int xx = x + ox;
          if (yy < 0 || yy >= cfg.height || xx < 0 || xx >= cfg.width) continue;
          mask[static_cast<std::size_t>(yy) * cfg.width + xx] = 1;
        }
      }
    }
  }

  RasterImage image;
  image.height = cfg.height;
  image.width = cfg.width;
  image.channels = cfg.channels;
  image.pixels.assign(static_cast<std::size_t>(cfg.height) * cfg.width * cfg.channels,
                      cfg.background);
  for (int y = 0; y < cfg.height; ++y) {
    for (int x = 0; x < cfg.width; ++x) {
      if (!mask[static_cast<std::size_t>(y) * cfg.width + x]) continue;
      for (int c = 0; c < cfg.channels; ++c) image.at(y, x, c) = cfg.ink;
    }
  }
  return image;
}

std::vector<RasterImage> render_batch(const std::vector<StrokeSequence>& seqs,
                                      const RasterConfig& cfg) {
  std::vector<RasterImage> out;
  out.reserve(seqs.size());
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    try {
      out.push_back(render(seqs[i], cfg));
    } catch (const Error& e) {
      fail(e.code(), "item " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

void write_pnm(const RasterImage& image, const std::string& path) {
  require(image.channels == 1 || image.channels == 3, ErrorCode::ConfigError,
          "PNM export supports 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::IoError, "cannot open " + path + " for writing");
  out << (image.channels == 1 ? "P5" : "P6") << "\n"
      << image.width << " " << image.height << "\n255\n";
  for (double v : image.pixels) {
    const long b = std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
    out.put(static_cast<char>(static_cast<unsigned char>(b)));
  }
  require(out.good(), ErrorCode::IoError, "short write to " + path);
}

RasterImage read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::IoError, "cannot open " + path);
  std::string magic;
  in >> magic;
  require(magic == "P5" || magic == "P6", ErrorCode::IoError,
          path + ": unsupported PNM magic '" + magic + "'");
  int width = 0, height = 0, maxval = 0;
  in >> width >> height >> maxval;
  require(in.good() && width > 0 && height > 0 && maxval == 255, ErrorCode::IoError,
          path + ": malformed PNM header");
  in.get();  // single whitespace byte before the raster data
  RasterImage image;
  image.height = height;
  image.width = width;
  image.channels = magic == "P5" ? 1 : 3;
  image.pixels.resize(static_cast<std::size_t>(width) * height * image.channels);
  for (double& v : image.pixels) {
    const int b = in.get();
    require(b != std::char_traits<char>::eof(), ErrorCode::IoError,
            path + ": truncated PNM data");
    v = b / 255.0;
  }
  return image;
}

}  // namespace sketchssl
