#include "sketchssl/stroke.hpp"

#include <cmath>
#include <string>

namespace sketchssl {

std::array<double, 3> pen_one_hot(PenState state) {
  std::array<double, 3> one_hot{0.0, 0.0, 0.0};
  one_hot[static_cast<std::size_t>(state)] = 1.0;
  return one_hot;
}

void StrokeSequence::validate_canonical() const {
  require(!points.empty(), ErrorCode::EmptyInput, "sequence has no points");
  for (std::size_t i = 0; i + 1 < points.size(); ++i) {
    require(points[i].state != PenState::kEnd, ErrorCode::EmptyInput,
            "End state before the final point (index " + std::to_string(i) + ")");
  }
  require(points.back().state == PenState::kEnd, ErrorCode::EmptyInput,
          "final point is not an End state");
}

StrokeSequence from_polylines(
    const std::vector<std::vector<std::pair<double, double>>>& strokes) {
  require(!strokes.empty(), ErrorCode::EmptyInput, "no strokes");
  StrokeSequence seq;
  for (std::size_t s = 0; s < strokes.size(); ++s) {
    const auto& stroke = strokes[s];
    require(!stroke.empty(), ErrorCode::EmptyInput,
            "stroke " + std::to_string(s) + " has no points");
    const bool final_stroke = (s + 1 == strokes.size());
    for (std::size_t i = 0; i < stroke.size(); ++i) {
      const auto [x, y] = stroke[i];
      require(std::isfinite(x) && std::isfinite(y),
              ErrorCode::NonFiniteCoordinate,
              "stroke " + std::to_string(s) + " point " + std::to_string(i));
      PenState state = PenState::kDown;
      if (i + 1 == stroke.size()) {
        state = final_stroke ? PenState::kEnd : PenState::kUp;
      }
      seq.points.push_back({x, y, state});
    }
  }
  return seq;
}

StrokeSequence normalize(const StrokeSequence& seq, int height, int width) {
  require(height >= 2 && width >= 2, ErrorCode::DegenerateCanvas,
          "canvas must be at least 2x2");
  StrokeSequence out = seq;
  const double sx = 1.0 / (width - 1);
  const double sy = 1.0 / (height - 1);
  for (auto& p : out.points) {
    p.x *= sx;
    p.y *= sy;
  }
  return out;
}

OffsetSequence to_offsets(const StrokeSequence& seq) {
  require(!seq.empty(), ErrorCode::EmptyInput, "empty sequence");
  OffsetSequence out;
  out.origin_x = seq[0].x;
  out.origin_y = seq[0].y;
  out.deltas.reserve(seq.size());
  double prev_x = out.origin_x;
  double prev_y = out.origin_y;
  for (const auto& p : seq.points) {
    out.deltas.push_back({p.x - prev_x, p.y - prev_y, p.state});
    prev_x = p.x;
    prev_y = p.y;
  }
  return out;
}

StrokeSequence to_absolute(const OffsetSequence& offsets) {
  require(!offsets.deltas.empty(), ErrorCode::EmptyInput, "empty offset sequence");
  StrokeSequence out;
  out.points.reserve(offsets.deltas.size());
  double x = offsets.origin_x;
  double y = offsets.origin_y;
  for (const auto& d : offsets.deltas) {
    x += d.dx;
    y += d.dy;
    out.points.push_back({x, y, d.state});
  }
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> stroke_spans(
    const StrokeSequence& seq) {
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  std::size_t begin = 0;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq[i].state == PenState::kUp || seq[i].state == PenState::kEnd) {
      spans.emplace_back(begin, i + 1);  // half-open [begin, i+1)
      begin = i + 1;
    }
  }
  if (begin < seq.size()) spans.emplace_back(begin, seq.size());
  return spans;
}

namespace {

// Perpendicular distance from p to the chord ab; falls back to the distance
// to a when the chord is degenerate.
double chord_distance(const StrokePoint& p, const StrokePoint& a,
                      const StrokePoint& b) {
  const double abx = b.x - a.x;
  const double aby = b.y - a.y;
  const double len2 = abx * abx + aby * aby;
  if (len2 == 0.0) return std::hypot(p.x - a.x, p.y - a.y);
  const double cross = abx * (p.y - a.y) - aby * (p.x - a.x);
  return std::abs(cross) / std::sqrt(len2);
}

void rdp_mark(const std::vector<StrokePoint>& pts, std::size_t lo,
              std::size_t hi, double epsilon, std::vector<char>& keep) {
  if (hi <= lo + 1) return;
  double best = -1.0;
  std::size_t best_idx = lo;
  for (std::size_t i = lo + 1; i < hi; ++i) {
    double d = chord_distance(pts[i], pts[lo], pts[hi]);
    if (d > best) {
      best = d;
      best_idx = i;
    }
  }
  if (best > epsilon) {
    keep[best_idx] = 1;
    rdp_mark(pts, lo, best_idx, epsilon, keep);
    rdp_mark(pts, best_idx, hi, epsilon, keep);
  }
}

}  // namespace

StrokeSequence rdp_simplify(const StrokeSequence& seq, double epsilon) {
  require(epsilon >= 0.0, ErrorCode::NegativeEpsilon,
          "epsilon must be non-negative");
  require(!seq.empty(), ErrorCode::EmptyInput, "empty sequence");
  StrokeSequence out;
  for (const auto& [begin, end] : stroke_spans(seq)) {
    const std::size_t n = end - begin;
    std::vector<StrokePoint> pts(seq.points.begin() + begin,
                                 seq.points.begin() + end);
    std::vector<char> keep(n, 0);
    keep.front() = 1;
    keep.back() = 1;
    if (n > 2) rdp_mark(pts, 0, n - 1, epsilon, keep);
    for (std::size_t i = 0; i < n; ++i) {
      if (keep[i]) out.points.push_back(pts[i]);
    }
  }
  return out;
}

PaddedSequence pad_or_truncate(const StrokeSequence& seq, std::size_t t_max) {
  require(t_max >= 1, ErrorCode::EmptyInput, "t_max must be >= 1");
  require(!seq.empty(), ErrorCode::EmptyInput, "empty sequence");
  PaddedSequence out;
  out.sequence.points.reserve(t_max);
  out.mask.assign(t_max, 0);
  const std::size_t real = std::min(seq.size(), t_max);
  for (std::size_t i = 0; i < real; ++i) {
    out.sequence.points.push_back(seq[i]);
    out.mask[i] = 1;
  }
  if (seq.size() >= t_max) {
    out.sequence.points.back().state = PenState::kEnd;
    return out;
  }
  StrokePoint pad = out.sequence.points.back();
  pad.state = PenState::kEnd;
  while (out.sequence.size() < t_max) out.sequence.points.push_back(pad);
  return out;
}

}  // namespace sketchssl
