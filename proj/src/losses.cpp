#include "sketchssl/losses.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "sketchssl/error.hpp"

namespace sketchssl {

namespace {

constexpr double kDistanceEps = 1e-12;

int pen_label(PenState s) {
  switch (s) {
    case PenState::kDown: return 0;
    case PenState::kUp: return 1;
    case PenState::kEnd: return 2;
  }
  fail(ErrorCode::MalformedRecord, "loss: invalid pen state");
}

double log_softmax_at(const std::array<double, 3>& logits, int label) {
  double mx = std::max({logits[0], logits[1], logits[2]});
  double se = 0.0;
  for (double q : logits) se += std::exp(q - mx);
  return logits[label] - mx - std::log(se);
}

}  // namespace

LossBreakdown vectorization_loss(const std::vector<PointPrediction>& preds,
                                 const StrokeSequence& targets,
                                 const std::vector<std::uint8_t>& mask,
                                 bool absolute_error) {
  require(preds.size() == targets.points.size() && preds.size() == mask.size(),
          ErrorCode::LengthMismatch,
          "vectorization_loss: preds, targets, and mask lengths differ");
  std::size_t valid = 0;
  for (std::uint8_t m : mask) valid += m ? 1 : 0;
  require(valid > 0, ErrorCode::EmptyMask,
          "vectorization_loss: mask has no valid steps");

  double coord = 0.0, pen = 0.0;
  for (std::size_t t = 0; t < preds.size(); ++t) {
    if (!mask[t]) continue;
    double dx = preds[t].x - targets.points[t].x;
    double dy = preds[t].y - targets.points[t].y;
    coord += absolute_error ? std::abs(dx) + std::abs(dy) : dx * dx + dy * dy;
    pen -= log_softmax_at(preds[t].pen_logits, pen_label(targets.points[t].state));
  }
  LossBreakdown out;
  out.valid_steps = valid;
  out.coord_term = coord / static_cast<double>(valid);
  out.pen_term = pen / static_cast<double>(valid);
  out.total = out.coord_term + out.pen_term;
  return out;
}

double rasterization_loss(const RasterImage& pred, const RasterImage& target) {
  require(pred.height == target.height && pred.width == target.width &&
              pred.channels == target.channels,
          ErrorCode::ShapeMismatch, "rasterization_loss: image shapes differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.pixels.size(); ++i) {
    double d = pred.pixels[i] - target.pixels[i];
    acc += d * d;
  }
  return acc / static_cast<double>(pred.pixels.size());
}

double classification_loss(const Tensor& logits, const std::vector<int>& labels) {
  require(logits.rank() == 2, ErrorCode::ShapeMismatch,
          "classification_loss: logits must be [N,K]");
  std::size_t n = logits.shape[0], k = logits.shape[1];
  require(labels.size() == n, ErrorCode::LengthMismatch,
          "classification_loss: one label per row required");
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    int label = labels[i];
    require(label >= 0 && static_cast<std::size_t>(label) < k,
            ErrorCode::LabelOutOfRange,
            "classification_loss: label " + std::to_string(label) +
                " outside [0," + std::to_string(k) + ")");
    const double* row = logits.data.data() + i * k;
    double mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double se = 0.0;
    for (std::size_t j = 0; j < k; ++j) se += std::exp(row[j] - mx);
    acc -= row[label] - mx - std::log(se);
  }
  return acc / static_cast<double>(n);
}

double triplet_loss(const Tensor& anchor, const Tensor& positive,
                    const Tensor& negative, double margin) {
  require(anchor.rank() == 2 && anchor.shape == positive.shape &&
              anchor.shape == negative.shape,
          ErrorCode::ShapeMismatch,
          "triplet_loss: anchor/positive/negative must share [N,D]");
  require(margin >= 0.0, ErrorCode::ConfigError,
          "triplet_loss: margin must be non-negative");
  std::size_t n = anchor.shape[0], d = anchor.shape[1];
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double dp = 0.0, dn = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double ep = anchor.data[i * d + j] - positive.data[i * d + j];
      double en = anchor.data[i * d + j] - negative.data[i * d + j];
      dp += ep * ep;
      dn += en * en;
    }
    acc += std::max(0.0, std::sqrt(dp) - std::sqrt(dn) + margin);
  }
  return acc / static_cast<double>(n);
}

// ------------------------------------------------------- graph builders

VectorizationLossParts vectorization_loss_graph(
    Graph& g, const std::vector<Value>& step_outputs, const Tensor& target_rows,
    const Tensor& mask, bool absolute_error) {
  require(target_rows.rank() == 3 && target_rows.shape[2] == 5,
          ErrorCode::ShapeMismatch, "vectorization_loss: targets must be [N,T,5]");
  std::size_t n = target_rows.shape[0], steps = target_rows.shape[1];
  require(step_outputs.size() == steps, ErrorCode::LengthMismatch,
          "vectorization_loss: one prediction per target step required");
  require(mask.rank() == 2 && mask.shape[0] == n && mask.shape[1] == steps,
          ErrorCode::ShapeMismatch, "vectorization_loss: mask must be [N,T]");

  // Per-sequence 1/T_valid weights; padding-only rows are invalid input.
  Tensor inv_valid({n});
  for (std::size_t b = 0; b < n; ++b) {
    double v = 0.0;
    for (std::size_t t = 0; t < steps; ++t) v += mask.data[b * steps + t];
    require(v > 0.0, ErrorCode::EmptyMask,
            "vectorization_loss: sample " + std::to_string(b) +
                " has no valid steps");
    inv_valid.data[b] = 1.0 / v;
  }

  Value targets = g.constant(target_rows);
  Value maskv = g.constant(mask);
  Value coord_acc, pen_acc;
  for (std::size_t t = 0; t < steps; ++t) {
    Value pred = step_outputs[t];
    Value tgt = g.time_slice(targets, t);
    Value m = g.reshape(g.slice_cols(maskv, t, t + 1), {n});

    Value cerr = absolute_error
                     ? g.row_abserr_sum(g.slice_cols(pred, 0, 2),
                                        g.slice_cols(tgt, 0, 2))
                     : g.row_sqerr_sum(g.slice_cols(pred, 0, 2),
                                       g.slice_cols(tgt, 0, 2));
    std::vector<int> labels(n);
    for (std::size_t b = 0; b < n; ++b) {
      const double* row = target_rows.data.data() + (b * steps + t) * 5;
      int arg = 0;
      for (int k = 1; k < 3; ++k)
        if (row[2 + k] > row[2 + arg]) arg = k;
      labels[b] = arg;
    }
    Value perr = g.xent_rows(g.slice_cols(pred, 2, 5), labels);

    Value cm = g.mul(cerr, m);
    Value pm = g.mul(perr, m);
    coord_acc = t == 0 ? cm : g.add(coord_acc, cm);
    pen_acc = t == 0 ? pm : g.add(pen_acc, pm);
  }
  Value weights = g.constant(inv_valid);
  VectorizationLossParts parts;
  parts.coord = g.mean_all(g.mul(coord_acc, weights));
  parts.pen = g.mean_all(g.mul(pen_acc, weights));
  parts.total = g.add(parts.coord, parts.pen);
  return parts;
}

Value rasterization_loss_graph(Graph& g, Value pred, Value target) {
  require(g.value(pred).shape == g.value(target).shape, ErrorCode::ShapeMismatch,
          "rasterization_loss: shapes differ");
  return g.mean_all(g.square(g.sub(pred, target)));
}

Value classification_loss_graph(Graph& g, Value logits,
                                const std::vector<int>& labels) {
  return g.mean_all(g.xent_rows(logits, labels));
}

Value triplet_loss_graph(Graph& g, Value anchor, Value positive, Value negative,
                         double margin) {
  require(margin >= 0.0, ErrorCode::ConfigError,
          "triplet_loss: margin must be non-negative");
  Value dp = g.sqrt(g.add_scalar(g.row_sqerr_sum(anchor, positive), kDistanceEps));
  Value dn = g.sqrt(g.add_scalar(g.row_sqerr_sum(anchor, negative), kDistanceEps));
  return g.mean_all(g.relu(g.add_scalar(g.sub(dp, dn), margin)));
}

}  // namespace sketchssl
