#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sketchssl/data.hpp"
#include "sketchssl/graph.hpp"
#include "sketchssl/models.hpp"
#include "sketchssl/raster.hpp"
#include "sketchssl/rng.hpp"
#include "sketchssl/stroke.hpp"
#include "sketchssl/tensor.hpp"

namespace sketchssl {

// ----------------------------------------------------------------- vocab

/// Character inventory plus the three specials. Index layout: characters at
/// 0..C-1, then <start>, <end>, <pad>.
struct CharVocab {
  std::string chars;

  static CharVocab from_alphabet(const std::vector<std::string>& names);

  int size() const { return static_cast<int>(chars.size()) + 3; }
  int start_index() const { return static_cast<int>(chars.size()); }
  int end_index() const { return static_cast<int>(chars.size()) + 1; }
  int pad_index() const { return static_cast<int>(chars.size()) + 2; }

  int index_of(char c) const;  // UnknownClassName on a foreign character

  /// text characters + <end>, padded with <pad> to exactly max_len ids.
  std::vector<int> encode(const std::string& text, int max_len) const;

  /// Inverse of encode up to the first <end>/<pad>; specials never appear
  /// in the output.
  std::string decode(const std::vector<int>& ids) const;
};

// ----------------------------------------------------------------- samples

struct WordSample {
  std::string id;
  RasterImage raster;
  StrokeSequence vector;
  std::string text;
};

/// Renders each labeled sample's strokes; text must be nonempty.
std::vector<WordSample> make_word_samples(
    const std::vector<LabeledSample>& samples, const RasterConfig& raster);

// --------------------------------------------------------- image encoder

struct HostFeatures {
  Tensor features;  // [N, T, D]
  Tensor latent;    // [N, D]
};

/// Word-image encoder forward pass (conv stack collapsed over height, two
/// stacked BLSTM layers over width). Every image must match the configured
/// height and have width a positive multiple of the total conv stride (8);
/// widths must agree within one call so the batch stacks.
HostFeatures handwriting_image_encode(const ParameterStore& store,
                                      const ModelConfig& model,
                                      const RasterConfig& raster,
                                      const std::vector<RasterImage>& images);

// --------------------------------------------------------- online encoder

struct OnlineEncoderConfig {
  int layers = 4;
  int hidden = 32;  // per direction; feature dim is 2*hidden
};

/// Parameters live under "hw.online.l<k>.{fwd,bwd}".
void init_online_encoder(ParameterStore& store, const OnlineEncoderConfig& cfg,
                         Rng& rng);
std::size_t online_encoder_param_count(const OnlineEncoderConfig& cfg);

struct EncodedSequence {
  Value features;  // [N, T, 2*hidden]
  Value latent;    // [N, 2*hidden]
};

/// Stacked bidirectional LSTM over 5-element stroke rows. Masked steps
/// carry the previous state through, so right-padding never changes the
/// final latent. rows [N,T,5], mask [N,T] of 0/1 with at least one valid
/// step per sample (EmptyMask otherwise).
EncodedSequence online_encode_graph(Binder& bind,
                                    const OnlineEncoderConfig& cfg, Value rows,
                                    Value mask);

HostFeatures online_encode(const ParameterStore& store,
                           const OnlineEncoderConfig& cfg, const Tensor& rows,
                           const Tensor& mask);

// ------------------------------------------------------- attention decoder

struct DecoderConfig {
  int hidden = 64;     // BLSTM per-direction size and GRU state size
  int attn_dim = 32;   // additive attention projection
  int embed_dim = 16;  // character embedding
};

/// Parameters live under "hw.dec.*": a BLSTM that re-encodes the feature
/// sequence into the attention memory, a character embedding, a GRU whose
/// input is [embedding, context], additive attention, and the output
/// projection over the vocabulary.
void init_attn_decoder(ParameterStore& store, const DecoderConfig& cfg,
                       int feature_dim, int vocab_size, Rng& rng);
std::size_t attn_decoder_param_count(const DecoderConfig& cfg, int feature_dim,
                                     int vocab_size);

struct DecodeGraph {
  std::vector<Value> logits;     // per step, [N, vocab]
  std::vector<Value> attention;  // per step, [N, T]
};

/// Teacher-forced decode over `steps` positions: the input at step t is the
/// embedding of targets[t-1] (the <start> token at t=0) plus the attention
/// context. targets is row-major [N, steps].
DecodeGraph attentional_decode_teacher_forcing(
    Binder& bind, const DecoderConfig& cfg, const CharVocab& vocab,
    Value features, Value feature_mask, const std::vector<int>& targets,
    int steps);

struct RecognitionOutput {
  std::vector<std::string> decoded;  // per sample, stopped at <end>
  std::vector<Tensor> attention;     // per emitted step, [N, T]
};

/// Greedy decode: feeds back the argmax character, stops each sample at the
/// first <end>, caps every sample at max_len emitted characters.
RecognitionOutput attentional_decode_greedy(const ParameterStore& store,
                                            const DecoderConfig& cfg,
                                            const CharVocab& vocab,
                                            const Tensor& features,
                                            const Tensor& feature_mask,
                                            int max_len);

// ------------------------------------------------------------ recognition

struct RecognizerConfig {
  std::string encoder = "image";  // image | online
  ModelConfig model;              // image mode; family word-conv-blstm
  OnlineEncoderConfig online;     // online mode
  DecoderConfig decoder;
  RasterConfig raster;
  int t_max = 64;        // stroke padding for the online encoder
  int max_text_len = 8;  // decode horizon, includes <end>
  double lr = 1e-3;
  int batch_size = 8;
  int epochs = 200;
  std::uint64_t seed = 0;
  // Optional vectorization-pretext checkpoint whose encoder parameters
  // ("enc.img.*") seed the recognizer's encoder.
  std::string init_checkpoint;

  void validate() const;
};

struct RecognizerEpoch {
  int epoch = 0;  // 1-based
  double loss = 0.0;
  double tf_char_accuracy = 0.0;  // over non-pad target positions
};

struct Recognizer {
  ParameterStore store;
  CharVocab vocab;
  RecognizerConfig cfg;
};

/// Teacher-forced training of encoder + decoder with Adam. History receives
/// one record per epoch when non-null.
Recognizer train_recognizer(const std::vector<WordSample>& words,
                            const CharVocab& vocab, const RecognizerConfig& cfg,
                            std::vector<RecognizerEpoch>* history = nullptr);

/// Greedy transcription of each word image / stroke sequence.
std::vector<std::string> recognize(const Recognizer& rec,
                                   const std::vector<WordSample>& words);

/// Fraction of non-pad target positions whose teacher-forced argmax matches.
double teacher_forced_accuracy(const Recognizer& rec,
                               const std::vector<WordSample>& words);

// ----------------------------------------------------------------- metrics

/// Unit-cost edit distance.
int levenshtein(const std::string& a, const std::string& b);

/// Lexicon word with minimum edit distance; ties resolve to the
/// lexicographically smallest word.
std::string lexicon_correct(const std::string& word,
                            const std::vector<std::string>& lexicon);

/// Exact-match fraction. With a lexicon, every prediction is first replaced
/// by its lexicon correction.
double evaluate_wra(const std::vector<std::string>& predictions,
                    const std::vector<std::string>& references);
double evaluate_wra(const std::vector<std::string>& predictions,
                    const std::vector<std::string>& references,
                    const std::vector<std::string>& lexicon);

}  // namespace sketchssl
