#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "sketchssl/graph.hpp"
#include "sketchssl/params.hpp"
#include "sketchssl/raster.hpp"
#include "sketchssl/stroke.hpp"

namespace sketchssl {

// ----------------------------------------------------------------- config

struct ImageEncoderConfig {
  // "residual-conv": stride-2 residual stages for square sketch canvases.
  // "word-conv-blstm": stride-8 conv stack + two stacked bidirectional LSTM
  // layers over the width axis, for wide word images.
  std::string family = "residual-conv";
  int blocks = 4;                      // stride-2 stages
  std::vector<int> widths;             // per-stage channels; last must equal d
  int blstm_hidden = 64;               // word family only; latent = 2*hidden
};

struct SeqDecoderConfig {
  std::string cell = "GRU";  // GRU | LSTM
  int hidden = 128;
};

struct SeqEncoderConfig {
  std::string family = "GRU";  // GRU | LSTM | Transformer
  int layers = 2;              // Transformer only
  int hidden = 128;            // RNN hidden; doubles as Transformer model dim
  int heads = 4;
  int mlp_dim = 256;
};

struct ConvDecoderConfig {
  int start_resolution = 4;
  int upsample_stages = 4;  // each stage doubles the resolution
  // Channel progression from the start resolution through each stage:
  // upsample_stages+1 entries; widths[0] is the fully-connected fan-out.
  std::vector<int> widths;
};

struct ModelConfig {
  ImageEncoderConfig image_encoder;
  SeqDecoderConfig seq_decoder;
  SeqEncoderConfig seq_encoder;
  ConvDecoderConfig conv_decoder;
  std::string coordinate_mode = "absolute";  // absolute | offset
  std::string pooling = "max";               // max | avg
  int d = 128;   // latent dimension
  int t_max = 64;

  /// Fills defaulted width vectors and checks internal consistency plus
  /// agreement with the raster geometry.
  void finalize(const RasterConfig& raster);
};

// ------------------------------------------------------------- host types

struct FeatureMap {
  std::size_t h = 0, w = 0, d = 0;
  std::vector<double> grid;  // index [y][x][k]
  double at(std::size_t y, std::size_t x, std::size_t k) const {
    return grid[(y * w + x) * d + k];
  }
};

struct LatentVector {
  std::vector<double> values;
  std::string source;  // "image" | "vector"
};

struct PointPrediction {
  double x = 0.0;
  double y = 0.0;
  std::array<double, 3> pen_logits{};
};

/// Start-of-sequence token: pen down at the origin.
inline std::array<double, 5> start_token() { return {0.0, 0.0, 1.0, 0.0, 0.0}; }

/// Row encoding used by every sequence model: (x, y, q1, q2, q3).
std::array<double, 5> point_row(const StrokePoint& p);

// -------------------------------------------------------------- binding

/// Binds ParameterStore tensors into a Graph once each, as trainable params
/// or frozen constants. One Binder per Graph.
class Binder {
 public:
  Binder(Graph& g, const ParameterStore& store, bool trainable = true)
      : g_(&g), store_(&store), trainable_(trainable) {}

  Value operator()(const std::string& name);
  Graph& graph() { return *g_; }
  bool trainable() const { return trainable_; }

 private:
  Graph* g_;
  const ParameterStore* store_;
  bool trainable_;
  std::map<std::string, Value> cache_;
};

// ------------------------------------------------------- initialization

void init_image_encoder(ParameterStore& store, const ModelConfig& cfg,
                        int in_channels, Rng& rng);
void init_seq_decoder(ParameterStore& store, const ModelConfig& cfg, Rng& rng);
void init_seq_encoder(ParameterStore& store, const ModelConfig& cfg, Rng& rng);
void init_conv_decoder(ParameterStore& store, const ModelConfig& cfg,
                       int out_channels, Rng& rng);

// Closed-form parameter counts; init_* results are asserted against these.
std::size_t image_encoder_param_count(const ModelConfig& cfg, int in_channels);
std::size_t seq_decoder_param_count(const ModelConfig& cfg);
std::size_t seq_encoder_param_count(const ModelConfig& cfg);
std::size_t conv_decoder_param_count(const ModelConfig& cfg, int out_channels);

// ------------------------------------------------------- graph builders

struct EncodedImage {
  std::vector<Value> block_outputs;  // post-stage activations, NCHW
  Value feature_map;                 // last block output
  Value latent;                      // pooled [N,d]
  Value step_states;                 // word family only: BLSTM outputs [N,T,2H]
};

/// images: [N,C,H,W]. Square-canvas residual family pools the last feature
/// map; the word family runs a BLSTM over width columns and concatenates the
/// two final hidden states.
EncodedImage image_encode_graph(Binder& bind, const ModelConfig& cfg,
                                Value images);

struct DecState {
  Value h;
  Value c;  // LSTM only; invalid for GRU
};

DecState init_decoder_state_graph(Binder& bind, const ModelConfig& cfg,
                                  Value latent);

/// One recurrent step: input is [latent, P_prev]; returns the new state and
/// the 5-way readout [N,5] = (x, y, pen logits).
std::pair<DecState, Value> decode_step_graph(Binder& bind,
                                             const ModelConfig& cfg,
                                             DecState state, Value latent,
                                             Value p_prev);

/// Teacher-forced decode: feeds targets[t-1] (start token at t=0) and
/// returns T readouts.
std::vector<Value> decode_sequence_teacher_forcing(Binder& bind,
                                                   const ModelConfig& cfg,
                                                   Value latent,
                                                   const Tensor& targets_rows);

/// Autoregressive decode for one latent (batch 1), feeding back predictions
/// with the pen state hardened to its argmax; stops after the first q3 step
/// or after t_max steps.
std::vector<PointPrediction> decode_sequence_autoregressive(
    const ParameterStore& store, const ModelConfig& cfg,
    const LatentVector& latent, int t_max);

/// Mode dispatch over the two decode regimes. Teacher forcing requires
/// targets holding exactly `length` points.
std::vector<PointPrediction> decode_sequence(const ParameterStore& store,
                                             const ModelConfig& cfg,
                                             const LatentVector& latent,
                                             int length, bool teacher_forcing,
                                             const PaddedSequence* targets);

/// rows: [N,T,5]; mask: [N,T]. Latent is the hidden state at each sample's
/// last valid step (masked updates freeze the state during padding).
Value vector_encode_rnn_graph(Binder& bind, const ModelConfig& cfg, Value rows,
                              Value mask);

/// Class-token Transformer encoder; latent is the token's final state.
Value vector_encode_transformer_graph(Binder& bind, const ModelConfig& cfg,
                                      Value rows, Value mask);

/// latent: [N,dv] -> images [N,C,H,W] in (0,1) via a logistic output.
Value conv_decode_graph(Binder& bind, const ModelConfig& cfg, Value latent,
                        int out_channels);

// Shared recurrent cells (also used by the handwriting recognizer).
// Parameters live under `prefix` + {.wxz,.whz,.bz,...} (GRU) or
// {.wxi,.whi,.bi,...} (LSTM).
void init_rnn_cell(ParameterStore& store, const std::string& prefix,
                   const std::string& cell, int in_dim, int hidden, Rng& rng);
std::size_t rnn_cell_param_count(const std::string& cell, int in_dim,
                                 int hidden);
DecState rnn_cell_step(Binder& bind, const std::string& prefix,
                       const std::string& cell, Value x, DecState state);
DecState rnn_zero_state(Graph& g, const std::string& cell, std::size_t n,
                        int hidden);

// --------------------------------------------------------- host wrappers

/// Spec-shaped single-image encode. Input must match the configured
/// geometry; returns the final feature map and the pooled latent.
std::pair<FeatureMap, LatentVector> image_encode(const RasterImage& image,
                                                 const ParameterStore& store,
                                                 const ModelConfig& cfg);

/// h_0 = W_h l + b_h (GRU: the hidden state; LSTM: h, with c_0 = 0).
Tensor init_decoder_state(const LatentVector& latent,
                          const ParameterStore& store, const ModelConfig& cfg);

LatentVector vector_encode_rnn(const PaddedSequence& padded,
                               const ParameterStore& store,
                               const ModelConfig& cfg);
LatentVector vector_encode_transformer(const PaddedSequence& padded,
                                       const ParameterStore& store,
                                       const ModelConfig& cfg);

/// latent -> H×W×C image in (0,1), returned as a RasterImage.
RasterImage conv_decode(const LatentVector& latent, const ParameterStore& store,
                        const ModelConfig& cfg, const RasterConfig& raster);

/// Builds [N,T,5] rows + [N,T] mask tensors from padded sequences.
std::pair<Tensor, Tensor> sequence_batch_tensors(
    const std::vector<PaddedSequence>& batch);

}  // namespace sketchssl
