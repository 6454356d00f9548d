#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sketchssl/error.hpp"
#include "sketchssl/stroke.hpp"

namespace sketchssl {

struct RasterConfig {
  int height = 64;
  int width = 64;
  int channels = 1;
  int stroke_width = 1;
  double background = 1.0;  // white paper
  double ink = 0.0;         // black strokes

  void validate() const;
};

/// HxWxC canvas of intensities in [0,1], row-major HWC layout.
struct RasterImage {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> pixels;

  double& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  double at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::size_t size() const { return pixels.size(); }

  bool operator==(const RasterImage& other) const = default;
};

/// Renders a normalized sequence onto the canvas. A segment is drawn between
/// points t and t+1 iff point t is pen-down. Endpoints snap to the pixel
/// grid and a pixel is inked iff its center lies within half a pixel of the
/// snapped segment; the test is exact integer arithmetic, so output is
/// bit-identical across platforms. stroke_width dilates the unit-width mask
/// with a square structuring element.
RasterImage render(const StrokeSequence& seq, const RasterConfig& cfg);

/// Elementwise render; errors are rethrown with the offending item index.
std::vector<RasterImage> render_batch(const std::vector<StrokeSequence>& seqs,
                                      const RasterConfig& cfg);

/// Binary PGM (P5, maxval 255) for single-channel images, PPM (P6) for
/// three-channel ones. PGM is the bit-exact golden-file format.
void write_pnm(const RasterImage& image, const std::string& path);
RasterImage read_pnm(const std::string& path);

}  // namespace sketchssl
