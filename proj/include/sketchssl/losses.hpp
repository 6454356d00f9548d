#pragma once

#include <cstdint>
#include <vector>

#include "sketchssl/graph.hpp"
#include "sketchssl/models.hpp"
#include "sketchssl/raster.hpp"
#include "sketchssl/stroke.hpp"

namespace sketchssl {

struct LossBreakdown {
  double total = 0.0;
  double coord_term = 0.0;
  double pen_term = 0.0;
  std::size_t valid_steps = 0;
};

/// Per-sequence translation loss: masked mean squared coordinate error plus
/// masked mean pen-state cross-entropy, both normalized by the number of
/// valid steps. `absolute_error` swaps the squares for absolute differences.
LossBreakdown vectorization_loss(const std::vector<PointPrediction>& preds,
                                 const StrokeSequence& targets,
                                 const std::vector<std::uint8_t>& mask,
                                 bool absolute_error = false);

/// Mean squared error over every pixel and channel.
double rasterization_loss(const RasterImage& pred, const RasterImage& target);

/// Softmax cross-entropy averaged over the batch; logits [N,K].
double classification_loss(const Tensor& logits, const std::vector<int>& labels);

/// Mean over the batch of max(0, d(a,p) - d(a,n) + margin) with Euclidean d;
/// rows of [N,D] tensors are embeddings.
double triplet_loss(const Tensor& anchor, const Tensor& positive,
                    const Tensor& negative, double margin = 0.2);

// ------------------------------------------------------- graph builders

struct VectorizationLossParts {
  Value total;
  Value coord;
  Value pen;
};

/// Batch translation loss: per-sequence normalization by its own valid-step
/// count, then a mean over the batch. step_outputs is the decoder's T
/// readouts [N,5]; target_rows [N,T,5]; mask [N,T].
VectorizationLossParts vectorization_loss_graph(
    Graph& g, const std::vector<Value>& step_outputs, const Tensor& target_rows,
    const Tensor& mask, bool absolute_error = false);

/// Mean squared error over every element of pred vs target (any shared shape).
Value rasterization_loss_graph(Graph& g, Value pred, Value target);

Value classification_loss_graph(Graph& g, Value logits,
                                const std::vector<int>& labels);

/// Distances use sqrt(sum + 1e-12): the epsilon keeps the gradient finite
/// for coincident pairs and cancels out of the degenerate-triplet value.
Value triplet_loss_graph(Graph& g, Value anchor, Value positive, Value negative,
                         double margin = 0.2);

}  // namespace sketchssl
