#pragma once

// Brute-force reference implementations used only by tests. Each oracle is
// written from the operation's definition with none of the library's
// geometry or metric code, so agreement is evidence rather than tautology.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sketchssl/raster.hpp"
#include "sketchssl/stroke.hpp"

namespace oracles {

// Perpendicular distance via explicit projection (the library uses the
// cross-product form instead).
inline double point_segment_distance(double px, double py, double ax, double ay,
                                     double bx, double by) {
  const double dx = bx - ax;
  const double dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  if (len2 == 0.0) return std::sqrt((px - ax) * (px - ax) + (py - ay) * (py - ay));
  double t = ((px - ax) * dx + (py - ay) * dy) / len2;
  t = std::clamp(t, 0.0, 1.0);
  const double cx = ax + t * dx;
  const double cy = ay + t * dy;
  return std::sqrt((px - cx) * (px - cx) + (py - cy) * (py - cy));
}

// Chord (infinite-clamp-free) perpendicular distance used by the RDP rule.
inline double chord_distance(double px, double py, double ax, double ay,
                             double bx, double by) {
  const double dx = bx - ax;
  const double dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  if (len2 == 0.0) return std::sqrt((px - ax) * (px - ax) + (py - ay) * (py - ay));
  const double area2 = std::abs(dx * (py - ay) - dy * (px - ax));
  return area2 / std::sqrt(len2);
}

// Recursive Ramer-Douglas-Peucker on one polyline: returns the retained
// indices, endpoints always included, interior point kept iff it is the
// farthest point of some recursion window and lies strictly beyond epsilon.
inline void rdp_recurse(const std::vector<std::pair<double, double>>& pts,
                        std::size_t lo, std::size_t hi, double epsilon,
                        std::vector<std::size_t>& kept) {
  if (hi <= lo + 1) return;
  double best = -1.0;
  std::size_t arg = lo;
  for (std::size_t i = lo + 1; i < hi; ++i) {
    const double d = chord_distance(pts[i].first, pts[i].second, pts[lo].first,
                                    pts[lo].second, pts[hi].first, pts[hi].second);
    if (d > best) {
      best = d;
      arg = i;
    }
  }
  if (best > epsilon) {
    rdp_recurse(pts, lo, arg, epsilon, kept);
    kept.push_back(arg);
    rdp_recurse(pts, arg, hi, epsilon, kept);
  }
}

inline std::vector<std::size_t> rdp_indices(
    const std::vector<std::pair<double, double>>& pts, double epsilon) {
  assert(!pts.empty());
  if (pts.size() == 1) return {0};
  std::vector<std::size_t> kept;
  kept.push_back(0);
  rdp_recurse(pts, 0, pts.size() - 1, epsilon, kept);
  kept.push_back(pts.size() - 1);
  return kept;
}

// Width-1 rendering oracle: snap endpoints to the pixel grid, then ink every
// pixel whose center lies within 0.5 of a drawn segment, measured with
// floating-point geometry. Asserts every distance is comfortably away from
// the 0.5 boundary so the comparison cannot be rounding-sensitive.
inline sketchssl::RasterImage render_unit_width(const sketchssl::StrokeSequence& seq,
                                                const sketchssl::RasterConfig& cfg) {
  struct Segment {
    long ax, ay, bx, by;
  };
  std::vector<Segment> segments;
  std::vector<std::pair<long, long>> snapped;
  for (const auto& p : seq.points) {
    snapped.emplace_back(std::lround(p.x * (cfg.width - 1)),
                         std::lround(p.y * (cfg.height - 1)));
  }
  for (std::size_t t = 0; t + 1 < seq.points.size(); ++t) {
    if (seq.points[t].state != sketchssl::PenState::kDown) continue;
    segments.push_back({snapped[t].first, snapped[t].second, snapped[t + 1].first,
                        snapped[t + 1].second});
  }

  sketchssl::RasterImage image;
  image.height = cfg.height;
  image.width = cfg.width;
  image.channels = cfg.channels;
  image.pixels.assign(
      static_cast<std::size_t>(cfg.height) * cfg.width * cfg.channels,
      cfg.background);
  for (int y = 0; y < cfg.height; ++y) {
    for (int x = 0; x < cfg.width; ++x) {
      double min_dist = 1e30;
      for (const auto& s : segments) {
        min_dist = std::min(min_dist, point_segment_distance(
                                          x, y, static_cast<double>(s.ax),
                                          static_cast<double>(s.ay),
                                          static_cast<double>(s.bx),
                                          static_cast<double>(s.by)));
      }
      if (!segments.empty()) assert(std::abs(min_dist - 0.5) > 1e-9);
      if (min_dist < 0.5) {
        for (int c = 0; c < cfg.channels; ++c) image.at(y, x, c) = cfg.ink;
      }
    }
  }
  return image;
}

}  // namespace oracles
