#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "sketchssl/error.hpp"

namespace sketchssl {

/// Three-way pen state attached to every stroke point. The state at point t
/// describes the pen during the segment leaving t: Down means connected to
/// the next point, Up means the pen lifts after this point, End means the
/// drawing stops here.
enum class PenState : std::uint8_t {
  kDown = 0,  // q1
  kUp = 1,    // q2
  kEnd = 2,   // q3
};

/// One-hot encoding (q1,q2,q3) of a pen state.
std::array<double, 3> pen_one_hot(PenState state);

struct StrokePoint {
  double x = 0.0;
  double y = 0.0;
  PenState state = PenState::kDown;
};

/// Ordered five-element pen states; the vector view of a drawing.
struct StrokeSequence {
  std::vector<StrokePoint> points;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  const StrokePoint& operator[](std::size_t i) const { return points[i]; }
  StrokePoint& operator[](std::size_t i) { return points[i]; }

  /// Checks the canonical-form invariants: nonempty, exactly one End state,
  /// and it sits on the final point. Padded sequences (which repeat the End
  /// point) intentionally skip this check.
  void validate_canonical() const;
};

struct OffsetPoint {
  double dx = 0.0;
  double dy = 0.0;
  PenState state = PenState::kDown;
};

/// Delta-coded view of a StrokeSequence. The first delta is always (0,0)
/// relative to origin, so to_absolute(to_offsets(s)) == s.
struct OffsetSequence {
  double origin_x = 0.0;
  double origin_y = 0.0;
  std::vector<OffsetPoint> deltas;
};

/// Builds a sequence from raw polylines (one list of (x,y) per stroke).
/// Within a stroke all points except the last get Down; the last point of a
/// non-final stroke gets Up; the final point overall gets End.
StrokeSequence from_polylines(
    const std::vector<std::vector<std::pair<double, double>>>& strokes);

/// Maps pixel coordinates onto the unit square: x' = x/(W-1), y' = y/(H-1),
/// so pixel extremes land exactly on 0 and 1.
StrokeSequence normalize(const StrokeSequence& seq, int height, int width);

OffsetSequence to_offsets(const StrokeSequence& seq);
StrokeSequence to_absolute(const OffsetSequence& offsets);

/// Ramer-Douglas-Peucker simplification by perpendicular distance, applied
/// independently to each pen-down stroke segment. Points strictly farther
/// than epsilon from the chord are kept; stroke endpoints always survive.
StrokeSequence rdp_simplify(const StrokeSequence& seq, double epsilon);

struct PaddedSequence {
  StrokeSequence sequence;        // length exactly t_max; padding repeats the End point
  std::vector<std::uint8_t> mask; // 1 for real points, 0 for padding
};

/// Fixed-length form for batching. Truncation keeps the first t_max points
/// and forces End on the last; padding repeats the terminal End point with
/// mask 0.
PaddedSequence pad_or_truncate(const StrokeSequence& seq, std::size_t t_max);

/// Splits a sequence into per-stroke polylines (index ranges bounded by
/// Up/End states). Used by the simplifier and the rasterizer.
std::vector<std::pair<std::size_t, std::size_t>> stroke_spans(
    const StrokeSequence& seq);

}  // namespace sketchssl
