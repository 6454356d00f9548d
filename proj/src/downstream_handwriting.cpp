#include "sketchssl/downstream_handwriting.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sketchssl/checkpoint.hpp"
#include "sketchssl/error.hpp"
#include "sketchssl/losses.hpp"
#include "sketchssl/params.hpp"
#include "sketchssl/pretrain.hpp"

namespace sketchssl {

namespace {

constexpr std::size_t kEncodeChunk = 32;
constexpr int kConvStride = 8;  // three stride-2 stages in the word encoder

std::size_t linear_count(int out, int in) {
  return static_cast<std::size_t>(out) * in + out;
}

void init_linear(ParameterStore& store, const std::string& name, int out,
                 int in, Rng& rng) {
  store.add(name + ".w",
            glorot_uniform({static_cast<std::size_t>(out),
                            static_cast<std::size_t>(in)},
                           in, out, rng));
  store.add(name + ".b", Tensor::zeros({static_cast<std::size_t>(out)}));
}

void check_mask_rows(const Tensor& mask, const char* who) {
  require(mask.rank() == 2, ErrorCode::ShapeMismatch,
          std::string(who) + ": mask must be [N,T]");
  for (std::size_t b = 0; b < mask.shape[0]; ++b) {
    double s = 0.0;
    for (std::size_t t = 0; t < mask.shape[1]; ++t)
      s += mask.data[b * mask.shape[1] + t];
    require(s > 0.0, ErrorCode::EmptyMask,
            std::string(who) + ": sample " + std::to_string(b) +
                " has an all-zero mask");
  }
}

/// One bidirectional LSTM layer with carry-through masking: a masked step
/// keeps the previous state, so right padding can never leak into any state
/// that survives to the output.
struct BiLstmOut {
  Value seq;     // [N,T,2H], per-step concat of the two directions
  Value latent;  // [N,2H], concat of the two final states
};

BiLstmOut bilstm_layer(Binder& bind, const std::string& prefix, Value seq,
                       Value mask, int hidden) {
  Graph& g = bind.graph();
  const Tensor& st = g.value(seq);
  const std::size_t n = st.shape[0], steps = st.shape[1];
  auto run = [&](const std::string& dir, bool reverse) {
    DecState state = rnn_zero_state(g, "LSTM", n, hidden);
    std::vector<Value> hs(steps);
    for (std::size_t k = 0; k < steps; ++k) {
      std::size_t t = reverse ? steps - 1 - k : k;
      DecState next =
          rnn_cell_step(bind, prefix + dir, "LSTM", g.time_slice(seq, t), state);
      Value m = g.reshape(g.slice_cols(mask, t, t + 1), {n});
      DecState merged;
      merged.h = g.lerp_rows(state.h, next.h, m);
      merged.c = g.lerp_rows(state.c, next.c, m);
      state = merged;
      hs[t] = state.h;
    }
    return std::pair<std::vector<Value>, Value>(std::move(hs), state.h);
  };
  auto [fwd_h, fwd_last] = run(".fwd", false);
  auto [bwd_h, bwd_last] = run(".bwd", true);
  std::vector<Value> per_step(steps);
  for (std::size_t t = 0; t < steps; ++t)
    per_step[t] = g.concat_cols(fwd_h[t], bwd_h[t]);
  BiLstmOut out;
  out.seq = g.stack_time(per_step);
  out.latent = g.concat_cols(fwd_last, bwd_last);
  return out;
}

/// Attention memory: one BLSTM pass over the encoder features.
Value decode_memory(Binder& bind, const DecoderConfig& cfg, Value features,
                    Value mask) {
  return bilstm_layer(bind, "hw.dec.blstm", features, mask, cfg.hidden).seq;
}

struct DecodeStepOut {
  Value logits;     // [N, V]
  Value attention;  // [N, T]
  Value state;      // [N, H]
};

/// One decoder step: attention from the previous state, context, GRU update
/// on [embedding, context], output projection on [state, context].
DecodeStepOut decode_step(Binder& bind, Value memory, Value mask, Value state,
                          const std::vector<int>& prev_ids) {
  Graph& g = bind.graph();
  Value weights = g.additive_attention_weights(
      memory, state, bind("hw.dec.attn.wm"), bind("hw.dec.attn.ws"),
      bind("hw.dec.attn.v"), mask);
  Value context = g.weighted_sum_time(memory, weights);
  Value emb = g.gather_rows(bind("hw.dec.embed"), prev_ids);
  DecState in;
  in.h = state;
  DecState next =
      rnn_cell_step(bind, "hw.dec.cell", "GRU", g.concat_cols(emb, context), in);
  DecodeStepOut out;
  out.state = next.h;
  out.attention = weights;
  out.logits = g.linear(g.concat_cols(next.h, context), bind("hw.dec.out.w"),
                        bind("hw.dec.out.b"));
  return out;
}

void check_decoder_config(const DecoderConfig& cfg) {
  require(cfg.hidden >= 1 && cfg.attn_dim >= 1 && cfg.embed_dim >= 1,
          ErrorCode::ConfigError, "decoder: all dimensions must be positive");
}

void check_features(const Tensor& ft, const char* who) {
  require(ft.rank() == 3, ErrorCode::ShapeMismatch,
          std::string(who) + ": features must be [N,T,D]");
  require(ft.shape[0] > 0 && ft.shape[1] > 0, ErrorCode::EmptyFeatures,
          std::string(who) + ": feature sequence is empty");
}

Tensor ones_mask(std::size_t n, std::size_t t) {
  return Tensor::full({n, t}, 1.0);
}

void check_word_images(const std::vector<RasterImage>& images,
                       const RasterConfig& raster) {
  require(!images.empty(), ErrorCode::EmptyDataset,
          "image encode: no images given");
  for (std::size_t i = 0; i < images.size(); ++i) {
    const RasterImage& img = images[i];
    require(img.height == raster.height, ErrorCode::BadAspect,
            "image encode: image " + std::to_string(i) + " is " +
                std::to_string(img.height) + " pixels tall, the encoder "
                "expects " +
                std::to_string(raster.height));
    require(img.width > 0 && img.width % kConvStride == 0,
            ErrorCode::BadAspect,
            "image encode: width " + std::to_string(img.width) +
                " is not a positive multiple of " +
                std::to_string(kConvStride));
    require(img.width == images[0].width, ErrorCode::BadAspect,
            "image encode: widths within a batch must agree");
    require(img.channels == raster.channels, ErrorCode::ShapeMismatch,
            "image encode: channel count mismatch");
  }
}

Tensor images_to_tensor(const std::vector<RasterImage>& images) {
  std::size_t n = images.size();
  std::size_t c = static_cast<std::size_t>(images[0].channels);
  std::size_t h = static_cast<std::size_t>(images[0].height);
  std::size_t w = static_cast<std::size_t>(images[0].width);
  Tensor out({n, c, h, w});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          out.data[((i * c + k) * h + y) * w + x] =
              images[i].pixels[(y * w + x) * c + k];
  return out;
}

/// Encoder dispatch for the recognizer: word images through the conv+BLSTM
/// stack, stroke sequences through the online encoder. Always returns the
/// feature sequence plus its validity mask inside the caller's graph.
struct BatchFeatures {
  Value features;  // [N,T,D]
  Value mask;      // [N,T]
};

BatchFeatures encode_words_graph(Binder& bind, const RecognizerConfig& cfg,
                                 const std::vector<const WordSample*>& chunk) {
  Graph& g = bind.graph();
  BatchFeatures out;
  if (cfg.encoder == "image") {
    std::vector<RasterImage> images;
    images.reserve(chunk.size());
    for (const WordSample* w : chunk) images.push_back(w->raster);
    check_word_images(images, cfg.raster);
    EncodedImage enc =
        image_encode_graph(bind, cfg.model, g.constant(images_to_tensor(images)));
    out.features = enc.step_states;
    const Tensor& ft = g.value(out.features);
    out.mask = g.constant(ones_mask(ft.shape[0], ft.shape[1]));
  } else {
    std::vector<PaddedSequence> padded;
    padded.reserve(chunk.size());
    for (const WordSample* w : chunk)
      padded.push_back(
          pad_or_truncate(w->vector, static_cast<std::size_t>(cfg.t_max)));
    auto [rows, mask] = sequence_batch_tensors(padded);
    EncodedSequence enc = online_encode_graph(bind, cfg.online,
                                              g.constant(rows), g.constant(mask));
    out.features = enc.features;
    out.mask = g.constant(mask);
  }
  return out;
}

/// Flattened row-major targets for a chunk of words.
std::vector<int> chunk_targets(const std::vector<const WordSample*>& chunk,
                               const CharVocab& vocab, int steps) {
  std::vector<int> targets;
  targets.reserve(chunk.size() * static_cast<std::size_t>(steps));
  for (const WordSample* w : chunk) {
    require(!w->text.empty(), ErrorCode::MissingTargets,
            "recognizer: sample '" + w->id + "' has no transcription");
    std::vector<int> ids = vocab.encode(w->text, steps);
    targets.insert(targets.end(), ids.begin(), ids.end());
  }
  return targets;
}

/// Cross-entropy over non-pad target positions, normalized by their count.
/// Pad rows are excluded entirely so they contribute no gradient. Also
/// counts teacher-forced argmax hits for the accuracy metric.
struct StepLoss {
  Value loss;
  std::size_t positions = 0;
  std::size_t hits = 0;
};

StepLoss masked_decode_loss(Graph& g, const DecodeGraph& dec,
                            const std::vector<int>& targets, std::size_t n,
                            int steps, int pad_index) {
  std::vector<Value> terms;
  StepLoss out;
  for (int t = 0; t < steps; ++t) {
    std::vector<int> active, labels;
    for (std::size_t i = 0; i < n; ++i) {
      int target = targets[i * static_cast<std::size_t>(steps) +
                           static_cast<std::size_t>(t)];
      if (target == pad_index) continue;
      active.push_back(static_cast<int>(i));
      labels.push_back(target);
    }
    if (active.empty()) continue;
    terms.push_back(
        g.sum_all(g.xent_rows(g.gather_rows(dec.logits[t], active), labels)));
    out.positions += active.size();
    const Tensor& lt = g.value(dec.logits[t]);
    const std::size_t v = lt.shape[1];
    for (std::size_t k = 0; k < active.size(); ++k) {
      const double* row = &lt.data[static_cast<std::size_t>(active[k]) * v];
      std::size_t best = 0;
      for (std::size_t j = 1; j < v; ++j)
        if (row[j] > row[best]) best = j;
      if (static_cast<int>(best) == labels[k]) ++out.hits;
    }
  }
  require(out.positions > 0, ErrorCode::MissingTargets,
          "recognizer: batch has no supervised positions");
  Value total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = g.add(total, terms[i]);
  out.loss = g.scale(total, 1.0 / static_cast<double>(out.positions));
  return out;
}

void warm_start_encoder(ParameterStore& store, const std::string& checkpoint) {
  LoadedCheckpoint ck = load_checkpoint(checkpoint);
  require(ck.meta.task == "vectorization", ErrorCode::ModalityMismatch,
          "recognizer: encoder warm start needs a vectorization checkpoint, "
          "got task '" +
              ck.meta.task + "'");
  std::size_t copied = 0;
  for (const auto& [name, tensor] : ck.store.tensors) {
    if (name.rfind("enc.img.", 0) != 0) continue;
    require(store.has(name), ErrorCode::ConfigError,
            "recognizer: checkpoint parameter '" + name +
                "' has no slot; encoder configurations differ");
    Tensor& dst = store.at(name);
    require(dst.shape == tensor.shape, ErrorCode::ShapeMismatch,
            "recognizer: '" + name + "' is " + shape_str(tensor.shape) +
                " in the checkpoint but " + shape_str(dst.shape) +
                " in the model");
    dst = tensor;
    ++copied;
  }
  require(copied > 0, ErrorCode::ConfigError,
          "recognizer: checkpoint holds no image encoder parameters");
}

}  // namespace

// ----------------------------------------------------------------- vocab

CharVocab CharVocab::from_alphabet(const std::vector<std::string>& names) {
  require(!names.empty(), ErrorCode::EmptyAlphabet,
          "vocab: alphabet has no characters");
  CharVocab v;
  for (const std::string& name : names) {
    require(name.size() == 1, ErrorCode::ConfigError,
            "vocab: alphabet entries must be single characters, got '" + name +
                "'");
    require(v.chars.find(name[0]) == std::string::npos, ErrorCode::ConfigError,
            "vocab: duplicate character '" + name + "'");
    v.chars += name[0];
  }
  return v;
}

int CharVocab::index_of(char c) const {
  std::size_t pos = chars.find(c);
  require(pos != std::string::npos, ErrorCode::UnknownClassName,
          std::string("vocab: character '") + c + "' is not in the alphabet");
  return static_cast<int>(pos);
}

std::vector<int> CharVocab::encode(const std::string& text, int max_len) const {
  require(max_len >= 1, ErrorCode::ConfigError,
          "vocab: encode length must be positive");
  require(text.size() + 1 <= static_cast<std::size_t>(max_len),
          ErrorCode::SequenceTooLong,
          "vocab: '" + text + "' plus its end marker needs " +
              std::to_string(text.size() + 1) + " slots, budget is " +
              std::to_string(max_len));
  std::vector<int> ids;
  ids.reserve(static_cast<std::size_t>(max_len));
  for (char c : text) ids.push_back(index_of(c));
  ids.push_back(end_index());
  while (ids.size() < static_cast<std::size_t>(max_len))
    ids.push_back(pad_index());
  return ids;
}

std::string CharVocab::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    require(id >= 0 && id < size(), ErrorCode::LabelOutOfRange,
            "vocab: id " + std::to_string(id) + " outside [0," +
                std::to_string(size()) + ")");
    if (id == end_index() || id == pad_index()) break;
    if (id == start_index()) continue;
    out += chars[static_cast<std::size_t>(id)];
  }
  return out;
}

// ----------------------------------------------------------------- samples

std::vector<WordSample> make_word_samples(
    const std::vector<LabeledSample>& samples, const RasterConfig& raster) {
  raster.validate();
  std::vector<WordSample> out;
  out.reserve(samples.size());
  for (const LabeledSample& s : samples) {
    require(s.has_text(), ErrorCode::MissingTargets,
            "words: sample '" + s.id + "' has no transcription");
    WordSample w;
    w.id = s.id;
    w.vector = s.vector;
    w.text = s.text;
    w.raster = render(s.vector, raster);
    out.push_back(std::move(w));
  }
  return out;
}

// --------------------------------------------------------- image encoder

HostFeatures handwriting_image_encode(const ParameterStore& store,
                                      const ModelConfig& model,
                                      const RasterConfig& raster,
                                      const std::vector<RasterImage>& images) {
  require(model.image_encoder.family == "word-conv-blstm",
          ErrorCode::ConfigError,
          "image encode: the word recognizer requires the word-conv-blstm "
          "encoder family");
  check_word_images(images, raster);
  Graph g;
  Binder bind(g, store, false);
  EncodedImage enc =
      image_encode_graph(bind, model, g.constant(images_to_tensor(images)));
  HostFeatures out;
  out.features = g.value(enc.step_states);
  out.latent = g.value(enc.latent);
  return out;
}

// --------------------------------------------------------- online encoder

void init_online_encoder(ParameterStore& store, const OnlineEncoderConfig& cfg,
                         Rng& rng) {
  require(cfg.layers >= 1 && cfg.hidden >= 1, ErrorCode::ConfigError,
          "online encoder: layers and hidden must be positive");
  std::size_t before = store.total_params();
  int in_dim = 5;
  for (int k = 0; k < cfg.layers; ++k) {
    std::string p = "hw.online.l" + std::to_string(k);
    init_rnn_cell(store, p + ".fwd", "LSTM", in_dim, cfg.hidden, rng);
    init_rnn_cell(store, p + ".bwd", "LSTM", in_dim, cfg.hidden, rng);
    in_dim = 2 * cfg.hidden;
  }
  require(store.total_params() - before == online_encoder_param_count(cfg),
          ErrorCode::ConfigError, "online encoder: parameter count drifted");
}

std::size_t online_encoder_param_count(const OnlineEncoderConfig& cfg) {
  std::size_t total = 2 * rnn_cell_param_count("LSTM", 5, cfg.hidden);
  for (int k = 1; k < cfg.layers; ++k)
    total += 2 * rnn_cell_param_count("LSTM", 2 * cfg.hidden, cfg.hidden);
  return total;
}

EncodedSequence online_encode_graph(Binder& bind,
                                    const OnlineEncoderConfig& cfg, Value rows,
                                    Value mask) {
  Graph& g = bind.graph();
  require(cfg.layers >= 1 && cfg.hidden >= 1, ErrorCode::ConfigError,
          "online encoder: layers and hidden must be positive");
  const Tensor& rt = g.value(rows);
  require(rt.rank() == 3 && rt.shape[2] == 5, ErrorCode::ShapeMismatch,
          "online encoder: rows must be [N,T,5]");
  const Tensor& mt = g.value(mask);
  check_mask_rows(mt, "online encoder");
  require(mt.shape[0] == rt.shape[0] && mt.shape[1] == rt.shape[1],
          ErrorCode::ShapeMismatch, "online encoder: mask shape must match rows");
  Value seq = rows;
  EncodedSequence out;
  for (int k = 0; k < cfg.layers; ++k) {
    BiLstmOut layer = bilstm_layer(bind, "hw.online.l" + std::to_string(k), seq,
                                   mask, cfg.hidden);
    seq = layer.seq;
    out.latent = layer.latent;
  }
  out.features = seq;
  return out;
}

HostFeatures online_encode(const ParameterStore& store,
                           const OnlineEncoderConfig& cfg, const Tensor& rows,
                           const Tensor& mask) {
  Graph g;
  Binder bind(g, store, false);
  EncodedSequence enc =
      online_encode_graph(bind, cfg, g.constant(rows), g.constant(mask));
  HostFeatures out;
  out.features = g.value(enc.features);
  out.latent = g.value(enc.latent);
  return out;
}

// ------------------------------------------------------- attention decoder

void init_attn_decoder(ParameterStore& store, const DecoderConfig& cfg,
                       int feature_dim, int vocab_size, Rng& rng) {
  check_decoder_config(cfg);
  require(feature_dim >= 1 && vocab_size >= 4, ErrorCode::ConfigError,
          "decoder: feature_dim must be positive and the vocabulary must "
          "hold at least one character plus the three specials");
  std::size_t before = store.total_params();
  const std::size_t h = static_cast<std::size_t>(cfg.hidden);
  const std::size_t a = static_cast<std::size_t>(cfg.attn_dim);
  init_rnn_cell(store, "hw.dec.blstm.fwd", "LSTM", feature_dim, cfg.hidden, rng);
  init_rnn_cell(store, "hw.dec.blstm.bwd", "LSTM", feature_dim, cfg.hidden, rng);
  store.add("hw.dec.embed",
            glorot_uniform({static_cast<std::size_t>(vocab_size),
                            static_cast<std::size_t>(cfg.embed_dim)},
                           vocab_size, cfg.embed_dim, rng));
  init_rnn_cell(store, "hw.dec.cell", "GRU", cfg.embed_dim + 2 * cfg.hidden,
                cfg.hidden, rng);
  store.add("hw.dec.attn.wm", glorot_uniform({a, 2 * h}, 2 * cfg.hidden,
                                             cfg.attn_dim, rng));
  store.add("hw.dec.attn.ws",
            glorot_uniform({a, h}, cfg.hidden, cfg.attn_dim, rng));
  store.add("hw.dec.attn.v", glorot_uniform({a}, cfg.attn_dim, 1, rng));
  init_linear(store, "hw.dec.out", vocab_size, 3 * cfg.hidden, rng);
  require(store.total_params() - before ==
              attn_decoder_param_count(cfg, feature_dim, vocab_size),
          ErrorCode::ConfigError, "decoder: parameter count drifted");
}

std::size_t attn_decoder_param_count(const DecoderConfig& cfg, int feature_dim,
                                     int vocab_size) {
  const std::size_t h = static_cast<std::size_t>(cfg.hidden);
  const std::size_t a = static_cast<std::size_t>(cfg.attn_dim);
  std::size_t total = 2 * rnn_cell_param_count("LSTM", feature_dim, cfg.hidden);
  total += static_cast<std::size_t>(vocab_size) * cfg.embed_dim;
  total += rnn_cell_param_count("GRU", cfg.embed_dim + 2 * cfg.hidden,
                                cfg.hidden);
  total += a * 2 * h + a * h + a;
  total += linear_count(vocab_size, 3 * cfg.hidden);
  return total;
}

DecodeGraph attentional_decode_teacher_forcing(
    Binder& bind, const DecoderConfig& cfg, const CharVocab& vocab,
    Value features, Value feature_mask, const std::vector<int>& targets,
    int steps) {
  Graph& g = bind.graph();
  check_decoder_config(cfg);
  const Tensor& ft = g.value(features);
  check_features(ft, "decode");
  const std::size_t n = ft.shape[0];
  require(steps >= 1, ErrorCode::ConfigError,
          "decode: steps must be positive");
  require(targets.size() == n * static_cast<std::size_t>(steps),
          ErrorCode::ShapeMismatch,
          "decode: expected " + std::to_string(n * steps) +
              " target ids, got " + std::to_string(targets.size()));
  Value memory = decode_memory(bind, cfg, features, feature_mask);
  Value state = g.constant(
      Tensor::zeros({n, static_cast<std::size_t>(cfg.hidden)}));
  std::vector<int> prev(n, vocab.start_index());
  DecodeGraph out;
  for (int t = 0; t < steps; ++t) {
    if (t > 0)
      for (std::size_t i = 0; i < n; ++i)
        prev[i] = targets[i * static_cast<std::size_t>(steps) +
                          static_cast<std::size_t>(t - 1)];
    DecodeStepOut step = decode_step(bind, memory, feature_mask, state, prev);
    state = step.state;
    out.logits.push_back(step.logits);
    out.attention.push_back(step.attention);
  }
  return out;
}

RecognitionOutput attentional_decode_greedy(const ParameterStore& store,
                                            const DecoderConfig& cfg,
                                            const CharVocab& vocab,
                                            const Tensor& features,
                                            const Tensor& feature_mask,
                                            int max_len) {
  check_decoder_config(cfg);
  check_features(features, "decode");
  require(max_len >= 1, ErrorCode::ConfigError,
          "decode: max_len must be positive");
  const std::size_t n = features.shape[0];
  Graph g;
  Binder bind(g, store, false);
  Value memory =
      decode_memory(bind, cfg, g.constant(features), g.constant(feature_mask));
  Value mask = g.constant(feature_mask);
  Value state = g.constant(
      Tensor::zeros({n, static_cast<std::size_t>(cfg.hidden)}));
  std::vector<int> prev(n, vocab.start_index());
  std::vector<std::vector<int>> emitted(n);
  std::vector<bool> done(n, false);
  RecognitionOutput out;
  for (int t = 0; t < max_len; ++t) {
    if (std::all_of(done.begin(), done.end(), [](bool d) { return d; })) break;
    DecodeStepOut step = decode_step(bind, memory, mask, state, prev);
    state = step.state;
    out.attention.push_back(g.value(step.attention));
    const Tensor& lt = g.value(step.logits);
    const std::size_t v = lt.shape[1];
    for (std::size_t i = 0; i < n; ++i) {
      const double* row = &lt.data[i * v];
      std::size_t best = 0;
      for (std::size_t j = 1; j < v; ++j)
        if (row[j] > row[best]) best = j;
      prev[i] = static_cast<int>(best);
      if (done[i]) continue;
      emitted[i].push_back(static_cast<int>(best));
      if (static_cast<int>(best) == vocab.end_index() ||
          static_cast<int>(best) == vocab.pad_index())
        done[i] = true;
    }
  }
  out.decoded.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.decoded.push_back(vocab.decode(emitted[i]));
  return out;
}

// ------------------------------------------------------------ recognition

void RecognizerConfig::validate() const {
  require(encoder == "image" || encoder == "online", ErrorCode::ConfigError,
          "recognizer: encoder must be 'image' or 'online', got '" + encoder +
              "'");
  require(lr > 0.0, ErrorCode::ConfigError,
          "recognizer: learning rate must be positive");
  require(batch_size >= 1, ErrorCode::ConfigError,
          "recognizer: batch_size must be positive");
  require(epochs >= 0, ErrorCode::ConfigError,
          "recognizer: epochs must be non-negative");
  require(max_text_len >= 2, ErrorCode::ConfigError,
          "recognizer: max_text_len must leave room for one character plus "
          "the end marker");
  require(t_max >= 1, ErrorCode::ConfigError,
          "recognizer: t_max must be positive");
  check_decoder_config(decoder);
  if (encoder == "image")
    require(model.image_encoder.family == "word-conv-blstm",
            ErrorCode::ConfigError,
            "recognizer: image mode requires the word-conv-blstm family");
  require(init_checkpoint.empty() || encoder == "image",
          ErrorCode::ConfigError,
          "recognizer: encoder warm starts apply to image mode only");
}

Recognizer train_recognizer(const std::vector<WordSample>& words,
                            const CharVocab& vocab, const RecognizerConfig& cfg,
                            std::vector<RecognizerEpoch>* history) {
  cfg.validate();
  require(!words.empty(), ErrorCode::EmptyDataset,
          "recognizer: no training words");
  Recognizer rec;
  rec.vocab = vocab;
  rec.cfg = cfg;
  rec.cfg.model.finalize(cfg.raster);
  Rng rng(cfg.seed);
  int feature_dim = 0;
  if (cfg.encoder == "image") {
    init_image_encoder(rec.store, rec.cfg.model, cfg.raster.channels, rng);
    feature_dim = 2 * rec.cfg.model.image_encoder.blstm_hidden;
  } else {
    init_online_encoder(rec.store, cfg.online, rng);
    feature_dim = 2 * cfg.online.hidden;
  }
  init_attn_decoder(rec.store, cfg.decoder, feature_dim, vocab.size(), rng);
  if (!cfg.init_checkpoint.empty())
    warm_start_encoder(rec.store, cfg.init_checkpoint);

  // Targets are validated up front so a bad transcription fails before any
  // training happens.
  for (const WordSample& w : words) {
    require(!w.text.empty(), ErrorCode::MissingTargets,
            "recognizer: sample '" + w.id + "' has no transcription");
    vocab.encode(w.text, cfg.max_text_len);
  }

  AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;
  Adam adam(adam_cfg);
  const int steps = cfg.max_text_len;
  std::vector<std::size_t> order(words.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng shuffler = Rng(cfg.seed).derive(0x300 + static_cast<std::uint64_t>(epoch));
    shuffler.shuffle(order);
    double loss_sum = 0.0;
    std::size_t positions = 0, hits = 0;
    for (std::size_t begin = 0; begin < order.size();
         begin += static_cast<std::size_t>(cfg.batch_size)) {
      std::size_t end = std::min(order.size(),
                                 begin + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const WordSample*> chunk;
      for (std::size_t i = begin; i < end; ++i) chunk.push_back(&words[order[i]]);
      Graph g;
      Binder bind(g, rec.store, true);
      BatchFeatures enc = encode_words_graph(bind, rec.cfg, chunk);
      std::vector<int> targets = chunk_targets(chunk, vocab, steps);
      DecodeGraph dec = attentional_decode_teacher_forcing(
          bind, cfg.decoder, vocab, enc.features, enc.mask, targets, steps);
      StepLoss sl = masked_decode_loss(g, dec, targets, chunk.size(), steps,
                                       vocab.pad_index());
      double batch_loss = g.value(sl.loss)[0];
      require(std::isfinite(batch_loss), ErrorCode::DivergedLoss,
              "recognizer: loss is not finite at epoch " +
                  std::to_string(epoch));
      g.backward(sl.loss);
      adam.update(rec.store, g.param_grads());
      loss_sum += batch_loss * static_cast<double>(sl.positions);
      positions += sl.positions;
      hits += sl.hits;
    }
    if (history) {
      RecognizerEpoch e;
      e.epoch = epoch;
      e.loss = loss_sum / static_cast<double>(positions);
      e.tf_char_accuracy =
          static_cast<double>(hits) / static_cast<double>(positions);
      history->push_back(e);
    }
  }
  return rec;
}

std::vector<std::string> recognize(const Recognizer& rec,
                                   const std::vector<WordSample>& words) {
  require(!words.empty(), ErrorCode::EmptyDataset, "recognize: no words");
  std::vector<std::string> out;
  out.reserve(words.size());
  for (std::size_t begin = 0; begin < words.size(); begin += kEncodeChunk) {
    std::size_t end = std::min(words.size(), begin + kEncodeChunk);
    std::vector<const WordSample*> chunk;
    for (std::size_t i = begin; i < end; ++i) chunk.push_back(&words[i]);
    Graph g;
    Binder bind(g, rec.store, false);
    BatchFeatures enc = encode_words_graph(bind, rec.cfg, chunk);
    RecognitionOutput dec = attentional_decode_greedy(
        rec.store, rec.cfg.decoder, rec.vocab, g.value(enc.features),
        g.value(enc.mask), rec.cfg.max_text_len);
    out.insert(out.end(), dec.decoded.begin(), dec.decoded.end());
  }
  return out;
}

double teacher_forced_accuracy(const Recognizer& rec,
                               const std::vector<WordSample>& words) {
  require(!words.empty(), ErrorCode::EmptyDataset, "recognize: no words");
  const int steps = rec.cfg.max_text_len;
  std::size_t positions = 0, hits = 0;
  for (std::size_t begin = 0; begin < words.size(); begin += kEncodeChunk) {
    std::size_t end = std::min(words.size(), begin + kEncodeChunk);
    std::vector<const WordSample*> chunk;
    for (std::size_t i = begin; i < end; ++i) chunk.push_back(&words[i]);
    Graph g;
    Binder bind(g, rec.store, false);
    BatchFeatures enc = encode_words_graph(bind, rec.cfg, chunk);
    std::vector<int> targets = chunk_targets(chunk, rec.vocab, steps);
    DecodeGraph dec = attentional_decode_teacher_forcing(
        bind, rec.cfg.decoder, rec.vocab, enc.features, enc.mask, targets,
        steps);
    StepLoss sl = masked_decode_loss(g, dec, targets, chunk.size(), steps,
                                     rec.vocab.pad_index());
    positions += sl.positions;
    hits += sl.hits;
  }
  return static_cast<double>(hits) / static_cast<double>(positions);
}

// ----------------------------------------------------------------- metrics

int levenshtein(const std::string& a, const std::string& b) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<int> row(m + 1);
  std::iota(row.begin(), row.end(), 0);
  for (std::size_t i = 1; i <= n; ++i) {
    int diag = row[0];
    row[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= m; ++j) {
      int sub = diag + (a[i - 1] == b[j - 1] ? 0 : 1);
      diag = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, sub});
    }
  }
  return row[m];
}

std::string lexicon_correct(const std::string& word,
                            const std::vector<std::string>& lexicon) {
  require(!lexicon.empty(), ErrorCode::EmptyLexicon,
          "lexicon: no candidate words");
  const std::string* best = nullptr;
  int best_d = 0;
  for (const std::string& cand : lexicon) {
    int d = levenshtein(word, cand);
    if (!best || d < best_d || (d == best_d && cand < *best)) {
      best = &cand;
      best_d = d;
    }
  }
  return *best;
}

double evaluate_wra(const std::vector<std::string>& predictions,
                    const std::vector<std::string>& references) {
  require(predictions.size() == references.size(), ErrorCode::LengthMismatch,
          "wra: " + std::to_string(predictions.size()) + " predictions vs " +
              std::to_string(references.size()) + " references");
  require(!references.empty(), ErrorCode::EmptyDataset,
          "wra: nothing to score");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < references.size(); ++i)
    if (predictions[i] == references[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(references.size());
}

double evaluate_wra(const std::vector<std::string>& predictions,
                    const std::vector<std::string>& references,
                    const std::vector<std::string>& lexicon) {
  require(!lexicon.empty(), ErrorCode::EmptyLexicon,
          "wra: lexicon mode needs candidate words");
  std::vector<std::string> corrected;
  corrected.reserve(predictions.size());
  for (const std::string& p : predictions)
    corrected.push_back(lexicon_correct(p, lexicon));
  return evaluate_wra(corrected, references);
}

}  // namespace sketchssl
