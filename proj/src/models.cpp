#include "sketchssl/models.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>

#include "sketchssl/error.hpp"

namespace sketchssl {

namespace {

Tensor normal_tensor(std::vector<std::size_t> shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = stddev * rng.normal();
  return t;
}

std::size_t conv_count(int out, int in, int k) {
  return static_cast<std::size_t>(out) * in * k * k + out;
}

void init_conv(ParameterStore& store, const std::string& name, int out, int in,
               int k, Rng& rng) {
  store.add(name + ".w",
            he_normal({static_cast<std::size_t>(out), static_cast<std::size_t>(in),
                       static_cast<std::size_t>(k), static_cast<std::size_t>(k)},
                      in * k * k, rng));
  store.add(name + ".b", Tensor::zeros({static_cast<std::size_t>(out)}));
}

// Linear layer used via Graph::linear: w [out,in], b [out].
void init_linear(ParameterStore& store, const std::string& name, int out,
                 int in, Rng& rng) {
  store.add(name + ".w",
            glorot_uniform({static_cast<std::size_t>(out),
                            static_cast<std::size_t>(in)},
                           in, out, rng));
  store.add(name + ".b", Tensor::zeros({static_cast<std::size_t>(out)}));
}

std::size_t linear_count(int out, int in) {
  return static_cast<std::size_t>(out) * in + out;
}

// Cell matrices applied via matmul: [in,out].
void init_cell_matrix(ParameterStore& store, const std::string& name, int in,
                      int out, Rng& rng) {
  store.add(name, glorot_uniform({static_cast<std::size_t>(in),
                                  static_cast<std::size_t>(out)},
                                 in, out, rng));
}

int power_of_two(int exponent) { return 1 << exponent; }

}  // namespace

// ----------------------------------------------------------------- config

void ModelConfig::finalize(const RasterConfig& raster) {
  require(d >= 1 && t_max >= 1, ErrorCode::ConfigError,
          "model: d and t_max must be positive");
  require(pooling == "max" || pooling == "avg", ErrorCode::ConfigError,
          "model: pooling must be max or avg");
  require(coordinate_mode == "absolute" || coordinate_mode == "offset",
          ErrorCode::ConfigError,
          "model: coordinate_mode must be absolute or offset");
  require(seq_decoder.cell == "GRU" || seq_decoder.cell == "LSTM",
          ErrorCode::ConfigError, "model: seq_decoder.cell must be GRU or LSTM");
  require(seq_decoder.hidden >= 1, ErrorCode::ConfigError,
          "model: seq_decoder.hidden must be positive");

  auto& img = image_encoder;
  if (img.family == "residual-conv") {
    require(img.blocks >= 1, ErrorCode::ConfigError,
            "model: image_encoder.blocks must be positive");
    if (img.widths.empty()) {
      for (int i = 0; i < img.blocks; ++i)
        img.widths.push_back(std::max(4, d >> (img.blocks - 1 - i)));
    }
    require(static_cast<int>(img.widths.size()) == img.blocks,
            ErrorCode::ConfigError,
            "model: image_encoder.widths must have one entry per block");
    require(img.widths.back() == d, ErrorCode::ConfigError,
            "model: last image_encoder width must equal d");
    int down = power_of_two(img.blocks);
    require(raster.height % down == 0 && raster.width % down == 0 &&
                raster.height >= down && raster.width >= down,
            ErrorCode::ConfigError,
            "model: canvas not divisible by the encoder's downsampling");
  } else if (img.family == "word-conv-blstm") {
    require(img.blocks == 3, ErrorCode::ConfigError,
            "model: word-conv-blstm uses exactly 3 stride-2 stages");
    if (img.widths.empty()) img.widths = {32, 48, 64};
    require(img.widths.size() == 3, ErrorCode::ConfigError,
            "model: word-conv-blstm needs 3 stage widths");
    require(img.blstm_hidden >= 1, ErrorCode::ConfigError,
            "model: blstm_hidden must be positive");
    require(d == 2 * img.blstm_hidden, ErrorCode::ConfigError,
            "model: word-conv-blstm latent is 2*blstm_hidden; set d to match");
    require(raster.height % 8 == 0 && raster.width % 8 == 0,
            ErrorCode::ConfigError, "model: word canvas must be divisible by 8");
  } else {
    fail(ErrorCode::ConfigError, "model: unknown image_encoder family '" +
                                     img.family + "'");
  }

  auto& vec = seq_encoder;
  require(vec.hidden >= 1, ErrorCode::ConfigError,
          "model: seq_encoder.hidden must be positive");
  if (vec.family == "Transformer") {
    require(vec.layers >= 1, ErrorCode::ConfigError,
            "model: transformer needs at least one layer");
    require(vec.heads >= 1 && vec.hidden % vec.heads == 0,
            ErrorCode::ConfigError,
            "model: transformer dim must be divisible by heads");
    require(vec.mlp_dim >= 1, ErrorCode::ConfigError,
            "model: transformer mlp_dim must be positive");
  } else {
    require(vec.family == "GRU" || vec.family == "LSTM",
            ErrorCode::ConfigError,
            "model: seq_encoder.family must be GRU, LSTM, or Transformer");
  }

  auto& dec = conv_decoder;
  require(dec.start_resolution >= 1 && dec.upsample_stages >= 1,
          ErrorCode::ConfigError, "model: conv_decoder geometry must be positive");
  if (dec.widths.empty()) {
    for (int i = 0; i <= dec.upsample_stages; ++i)
      dec.widths.push_back(std::max(8, d >> i));
  }
  require(static_cast<int>(dec.widths.size()) == dec.upsample_stages + 1,
          ErrorCode::ConfigError,
          "model: conv_decoder.widths needs upsample_stages+1 entries");
  // The image decoder only ever renders square sketch canvases; word-family
  // configurations pair wide canvases with sequence-side pretexts, so the
  // canvas reproduction constraint does not apply to them.
  if (img.family == "residual-conv") {
    int out_side = dec.start_resolution * power_of_two(dec.upsample_stages);
    require(out_side == raster.height && out_side == raster.width,
            ErrorCode::ConfigError,
            "model: conv_decoder stages must reproduce the canvas exactly");
  }
}

std::array<double, 5> point_row(const StrokePoint& p) {
  return {p.x, p.y, p.state == PenState::kDown ? 1.0 : 0.0,
          p.state == PenState::kUp ? 1.0 : 0.0,
          p.state == PenState::kEnd ? 1.0 : 0.0};
}

// -------------------------------------------------------------- binding

Value Binder::operator()(const std::string& name) {
  auto it = cache_.find(name);
  if (it != cache_.end()) return it->second;
  Value v = trainable_ ? g_->param(name, store_->at(name))
                       : g_->constant(store_->at(name));
  cache_.emplace(name, v);
  return v;
}

// -------------------------------------------------------- recurrent cells

void init_rnn_cell(ParameterStore& store, const std::string& prefix,
                   const std::string& cell, int in_dim, int hidden, Rng& rng) {
  std::size_t h = static_cast<std::size_t>(hidden);
  if (cell == "GRU") {
    for (const char* gate : {"z", "r", "n"}) {
      init_cell_matrix(store, prefix + ".wx" + gate, in_dim, hidden, rng);
      init_cell_matrix(store, prefix + ".wh" + gate, hidden, hidden, rng);
    }
    store.add(prefix + ".bz", Tensor::zeros({h}));
    store.add(prefix + ".br", Tensor::zeros({h}));
    store.add(prefix + ".bxn", Tensor::zeros({h}));
    store.add(prefix + ".bhn", Tensor::zeros({h}));
    return;
  }
  require(cell == "LSTM", ErrorCode::ConfigError,
          "rnn cell must be GRU or LSTM");
  for (const char* gate : {"i", "f", "g", "o"}) {
    init_cell_matrix(store, prefix + ".wx" + gate, in_dim, hidden, rng);
    init_cell_matrix(store, prefix + ".wh" + gate, hidden, hidden, rng);
    // Forget gate starts open: standard trainability aid.
    store.add(prefix + ".b" + gate,
              gate[0] == 'f' ? Tensor::full({h}, 1.0) : Tensor::zeros({h}));
  }
}

std::size_t rnn_cell_param_count(const std::string& cell, int in_dim,
                                 int hidden) {
  std::size_t in = in_dim, h = hidden;
  if (cell == "GRU") return 3 * in * h + 3 * h * h + 4 * h;
  return 4 * (in * h + h * h + h);
}

DecState rnn_zero_state(Graph& g, const std::string& cell, std::size_t n,
                        int hidden) {
  DecState s;
  s.h = g.constant(Tensor::zeros({n, static_cast<std::size_t>(hidden)}));
  if (cell == "LSTM")
    s.c = g.constant(Tensor::zeros({n, static_cast<std::size_t>(hidden)}));
  return s;
}

DecState rnn_cell_step(Binder& bind, const std::string& prefix,
                       const std::string& cell, Value x, DecState state) {
  Graph& g = bind.graph();
  auto pre = [&](Value inp, const char* gate, const char* which) {
    return g.matmul(inp, bind(prefix + "." + which + gate));
  };
  if (cell == "GRU") {
    Value z = g.sigmoid(g.add_rowvec(g.add(pre(x, "z", "wx"), pre(state.h, "z", "wh")),
                                     bind(prefix + ".bz")));
    Value r = g.sigmoid(g.add_rowvec(g.add(pre(x, "r", "wx"), pre(state.h, "r", "wh")),
                                     bind(prefix + ".br")));
    Value n = g.tanh(g.add(
        g.add_rowvec(pre(x, "n", "wx"), bind(prefix + ".bxn")),
        g.mul(r, g.add_rowvec(pre(state.h, "n", "wh"), bind(prefix + ".bhn")))));
    // h' = (1-z)*n + z*h, written as n + z*(h-n).
    DecState out;
    out.h = g.add(n, g.mul(z, g.sub(state.h, n)));
    return out;
  }
  auto gate_act = [&](const char* gate) {
    return g.add_rowvec(g.add(pre(x, gate, "wx"), pre(state.h, gate, "wh")),
                        bind(prefix + ".b" + gate));
  };
  Value i = g.sigmoid(gate_act("i"));
  Value f = g.sigmoid(gate_act("f"));
  Value gv = g.tanh(gate_act("g"));
  Value o = g.sigmoid(gate_act("o"));
  DecState out;
  out.c = g.add(g.mul(f, state.c), g.mul(i, gv));
  out.h = g.mul(o, g.tanh(out.c));
  return out;
}

// --------------------------------------------------------- image encoder

void init_image_encoder(ParameterStore& store, const ModelConfig& cfg,
                        int in_channels, Rng& rng) {
  std::size_t before = store.total_params();
  const auto& img = cfg.image_encoder;
  if (img.family == "residual-conv") {
    int prev = in_channels;
    for (int i = 0; i < img.blocks; ++i) {
      std::string s = "enc.img.s" + std::to_string(i);
      init_conv(store, s + ".down", img.widths[i], prev, 3, rng);
      init_conv(store, s + ".r1", img.widths[i], img.widths[i], 3, rng);
      init_conv(store, s + ".r2", img.widths[i], img.widths[i], 3, rng);
      prev = img.widths[i];
    }
  } else {
    int prev = in_channels;
    for (int i = 0; i < 3; ++i) {
      init_conv(store, "enc.img.word.c" + std::to_string(i), img.widths[i],
                prev, 3, rng);
      prev = img.widths[i];
    }
    init_rnn_cell(store, "enc.img.word.l0.fwd", "LSTM", prev,
                  img.blstm_hidden, rng);
    init_rnn_cell(store, "enc.img.word.l0.bwd", "LSTM", prev,
                  img.blstm_hidden, rng);
    init_rnn_cell(store, "enc.img.word.l1.fwd", "LSTM", 2 * img.blstm_hidden,
                  img.blstm_hidden, rng);
    init_rnn_cell(store, "enc.img.word.l1.bwd", "LSTM", 2 * img.blstm_hidden,
                  img.blstm_hidden, rng);
  }
  assert(store.total_params() - before ==
         image_encoder_param_count(cfg, in_channels));
  (void)before;
}

std::size_t image_encoder_param_count(const ModelConfig& cfg, int in_channels) {
  const auto& img = cfg.image_encoder;
  std::size_t total = 0;
  int prev = in_channels;
  if (img.family == "residual-conv") {
    for (int i = 0; i < img.blocks; ++i) {
      total += conv_count(img.widths[i], prev, 3);
      total += 2 * conv_count(img.widths[i], img.widths[i], 3);
      prev = img.widths[i];
    }
    return total;
  }
  for (int i = 0; i < 3; ++i) {
    total += conv_count(img.widths[i], prev, 3);
    prev = img.widths[i];
  }
  total += 2 * rnn_cell_param_count("LSTM", prev, img.blstm_hidden);
  total += 2 * rnn_cell_param_count("LSTM", 2 * img.blstm_hidden,
                                    img.blstm_hidden);
  return total;
}

EncodedImage image_encode_graph(Binder& bind, const ModelConfig& cfg,
                                Value images) {
  Graph& g = bind.graph();
  const auto& img = cfg.image_encoder;
  EncodedImage out;
  Value x = images;
  if (img.family == "residual-conv") {
    for (int i = 0; i < img.blocks; ++i) {
      std::string s = "enc.img.s" + std::to_string(i);
      x = g.relu(g.conv2d(x, bind(s + ".down.w"), bind(s + ".down.b"), 2, 1));
      Value r = g.conv2d(
          g.relu(g.conv2d(x, bind(s + ".r1.w"), bind(s + ".r1.b"), 1, 1)),
          bind(s + ".r2.w"), bind(s + ".r2.b"), 1, 1);
      x = g.relu(g.add(x, r));
      out.block_outputs.push_back(x);
    }
    out.feature_map = x;
    out.latent =
        cfg.pooling == "max" ? g.global_max_pool(x) : g.global_avg_pool(x);
    return out;
  }
  for (int i = 0; i < 3; ++i) {
    std::string s = "enc.img.word.c" + std::to_string(i);
    x = g.relu(g.conv2d(x, bind(s + ".w"), bind(s + ".b"), 2, 1));
    out.block_outputs.push_back(x);
  }
  out.feature_map = x;
  Value seq = g.collapse_height_mean(x);  // [N,T,C]
  const Tensor& st = g.value(seq);
  std::size_t n = st.shape[0], steps = st.shape[1];
  // Two stacked bidirectional LSTM layers over the width axis.
  for (int layer = 0; layer < 2; ++layer) {
    std::string p = "enc.img.word.l" + std::to_string(layer);
    DecState fwd = rnn_zero_state(g, "LSTM", n, img.blstm_hidden);
    DecState bwd = rnn_zero_state(g, "LSTM", n, img.blstm_hidden);
    std::vector<Value> fwd_h(steps), bwd_h(steps);
    for (std::size_t t = 0; t < steps; ++t) {
      fwd = rnn_cell_step(bind, p + ".fwd", "LSTM", g.time_slice(seq, t), fwd);
      fwd_h[t] = fwd.h;
    }
    for (std::size_t t = steps; t-- > 0;) {
      bwd = rnn_cell_step(bind, p + ".bwd", "LSTM", g.time_slice(seq, t), bwd);
      bwd_h[t] = bwd.h;
    }
    std::vector<Value> per_step(steps);
    for (std::size_t t = 0; t < steps; ++t)
      per_step[t] = g.concat_cols(fwd_h[t], bwd_h[t]);
    seq = g.stack_time(per_step);
    out.latent = g.concat_cols(fwd.h, bwd.h);
  }
  out.step_states = seq;
  return out;
}

// ------------------------------------------------------ sequence decoder

void init_seq_decoder(ParameterStore& store, const ModelConfig& cfg, Rng& rng) {
  std::size_t before = store.total_params();
  init_linear(store, "dec.h0", cfg.seq_decoder.hidden, cfg.d, rng);
  init_rnn_cell(store, "dec.cell", cfg.seq_decoder.cell, cfg.d + 5,
                cfg.seq_decoder.hidden, rng);
  init_linear(store, "dec.out", 5, cfg.seq_decoder.hidden, rng);
  assert(store.total_params() - before == seq_decoder_param_count(cfg));
  (void)before;
}

std::size_t seq_decoder_param_count(const ModelConfig& cfg) {
  int h = cfg.seq_decoder.hidden;
  return linear_count(h, cfg.d) +
         rnn_cell_param_count(cfg.seq_decoder.cell, cfg.d + 5, h) +
         linear_count(5, h);
}

DecState init_decoder_state_graph(Binder& bind, const ModelConfig& cfg,
                                  Value latent) {
  Graph& g = bind.graph();
  DecState s;
  s.h = g.linear(latent, bind("dec.h0.w"), bind("dec.h0.b"));
  if (cfg.seq_decoder.cell == "LSTM") {
    const Tensor& lt = g.value(latent);
    s.c = g.constant(Tensor::zeros(
        {lt.shape[0], static_cast<std::size_t>(cfg.seq_decoder.hidden)}));
  }
  return s;
}

std::pair<DecState, Value> decode_step_graph(Binder& bind,
                                             const ModelConfig& cfg,
                                             DecState state, Value latent,
                                             Value p_prev) {
  Graph& g = bind.graph();
  Value x = g.concat_cols(latent, p_prev);
  DecState next = rnn_cell_step(bind, "dec.cell", cfg.seq_decoder.cell, x, state);
  Value y = g.linear(next.h, bind("dec.out.w"), bind("dec.out.b"));
  return {next, y};
}

std::vector<Value> decode_sequence_teacher_forcing(Binder& bind,
                                                   const ModelConfig& cfg,
                                                   Value latent,
                                                   const Tensor& targets_rows) {
  Graph& g = bind.graph();
  require(targets_rows.rank() == 3 && targets_rows.shape[2] == 5,
          ErrorCode::ShapeMismatch, "decode: targets must be [N,T,5]");
  std::size_t n = targets_rows.shape[0], steps = targets_rows.shape[1];
  require(g.value(latent).shape[0] == n, ErrorCode::ShapeMismatch,
          "decode: latent batch does not match targets");
  // prev[t] = targets[t-1], with the start token at t=0.
  Tensor prev({n, steps, 5});
  auto tok = start_token();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t k = 0; k < 5; ++k) prev.data[(b * steps) * 5 + k] = tok[k];
    for (std::size_t t = 1; t < steps; ++t)
      for (std::size_t k = 0; k < 5; ++k)
        prev.data[(b * steps + t) * 5 + k] =
            targets_rows.data[(b * steps + t - 1) * 5 + k];
  }
  Value prev_rows = g.constant(std::move(prev));
  DecState state = init_decoder_state_graph(bind, cfg, latent);
  std::vector<Value> outputs;
  outputs.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    auto [next, y] =
        decode_step_graph(bind, cfg, state, latent, g.time_slice(prev_rows, t));
    state = next;
    outputs.push_back(y);
  }
  return outputs;
}

std::vector<PointPrediction> decode_sequence_autoregressive(
    const ParameterStore& store, const ModelConfig& cfg,
    const LatentVector& latent, int t_max) {
  require(t_max >= 1, ErrorCode::ConfigError, "decode: t_max must be positive");
  std::size_t d = latent.values.size();
  Tensor lat({1, d}, latent.values);

  // Host-side loop: a fresh frozen graph per step keeps the tape small.
  Tensor h, c;
  std::array<double, 5> prev = start_token();
  std::vector<PointPrediction> out;
  bool lstm = cfg.seq_decoder.cell == "LSTM";
  for (int t = 0; t < t_max; ++t) {
    Graph g;
    Binder bind(g, store, /*trainable=*/false);
    Value lv = g.constant(lat);
    DecState state;
    if (t == 0) {
      state = init_decoder_state_graph(bind, cfg, lv);
    } else {
      state.h = g.constant(h);
      if (lstm) state.c = g.constant(c);
    }
    Value pv = g.constant(Tensor({1, 5}, {prev[0], prev[1], prev[2], prev[3],
                                          prev[4]}));
    auto [next, y] = decode_step_graph(bind, cfg, state, lv, pv);
    h = g.value(next.h);
    if (lstm) c = g.value(next.c);
    const Tensor& yt = g.value(y);
    PointPrediction p;
    p.x = yt.data[0];
    p.y = yt.data[1];
    p.pen_logits = {yt.data[2], yt.data[3], yt.data[4]};
    out.push_back(p);
    int arg = 0;
    for (int k = 1; k < 3; ++k)
      if (p.pen_logits[k] > p.pen_logits[arg]) arg = k;
    if (arg == 2) break;  // emitted the end-of-drawing step
    prev = {p.x, p.y, arg == 0 ? 1.0 : 0.0, arg == 1 ? 1.0 : 0.0, 0.0};
  }
  return out;
}

std::vector<PointPrediction> decode_sequence(const ParameterStore& store,
                                             const ModelConfig& cfg,
                                             const LatentVector& latent,
                                             int length, bool teacher_forcing,
                                             const PaddedSequence* targets) {
  if (!teacher_forcing)
    return decode_sequence_autoregressive(store, cfg, latent, length);
  require(targets != nullptr, ErrorCode::MissingTargets,
          "decode: teacher forcing requires a target sequence");
  require(static_cast<int>(targets->sequence.points.size()) == length,
          ErrorCode::LengthMismatch,
          "decode: targets must have exactly the requested length");
  std::size_t steps = static_cast<std::size_t>(length);
  Tensor rows({1, steps, 5});
  for (std::size_t t = 0; t < steps; ++t) {
    auto row = point_row(targets->sequence.points[t]);
    for (std::size_t k = 0; k < 5; ++k) rows.data[t * 5 + k] = row[k];
  }
  Graph g;
  Binder bind(g, store, /*trainable=*/false);
  Value lat = g.constant(Tensor({1, latent.values.size()}, latent.values));
  std::vector<Value> outs = decode_sequence_teacher_forcing(bind, cfg, lat, rows);
  std::vector<PointPrediction> preds;
  preds.reserve(outs.size());
  for (Value v : outs) {
    const Tensor& yt = g.value(v);
    PointPrediction p;
    p.x = yt.data[0];
    p.y = yt.data[1];
    p.pen_logits = {yt.data[2], yt.data[3], yt.data[4]};
    preds.push_back(p);
  }
  return preds;
}

// ------------------------------------------------------ sequence encoders

void init_seq_encoder(ParameterStore& store, const ModelConfig& cfg, Rng& rng) {
  std::size_t before = store.total_params();
  const auto& vec = cfg.seq_encoder;
  if (vec.family == "Transformer") {
    int dim = vec.hidden;
    init_linear(store, "enc.tr.in", dim, 5, rng);
    store.add("enc.tr.cls",
              normal_tensor({1, static_cast<std::size_t>(dim)}, 0.02, rng));
    store.add("enc.tr.pos",
              normal_tensor({static_cast<std::size_t>(cfg.t_max + 1),
                             static_cast<std::size_t>(dim)},
                            0.02, rng));
    for (int l = 0; l < vec.layers; ++l) {
      std::string p = "enc.tr.l" + std::to_string(l);
      for (const char* ln : {".ln1", ".ln2"}) {
        store.add(p + ln + ".g",
                  Tensor::full({static_cast<std::size_t>(dim)}, 1.0));
        store.add(p + ln + ".b", Tensor::zeros({static_cast<std::size_t>(dim)}));
      }
      for (const char* m : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo"})
        store.add(p + m, glorot_uniform({static_cast<std::size_t>(dim),
                                         static_cast<std::size_t>(dim)},
                                        dim, dim, rng));
      for (const char* b : {".attn.bq", ".attn.bk", ".attn.bv", ".attn.bo"})
        store.add(p + b, Tensor::zeros({static_cast<std::size_t>(dim)}));
      init_linear(store, p + ".mlp.fc1", vec.mlp_dim, dim, rng);
      init_linear(store, p + ".mlp.fc2", dim, vec.mlp_dim, rng);
    }
    store.add("enc.tr.fin.g", Tensor::full({static_cast<std::size_t>(dim)}, 1.0));
    store.add("enc.tr.fin.b", Tensor::zeros({static_cast<std::size_t>(dim)}));
  } else {
    init_rnn_cell(store, "enc.vec.cell", vec.family, 5, vec.hidden, rng);
  }
  assert(store.total_params() - before == seq_encoder_param_count(cfg));
  (void)before;
}

std::size_t seq_encoder_param_count(const ModelConfig& cfg) {
  const auto& vec = cfg.seq_encoder;
  if (vec.family != "Transformer")
    return rnn_cell_param_count(vec.family, 5, vec.hidden);
  std::size_t dim = vec.hidden, mlp = vec.mlp_dim;
  std::size_t total = linear_count(dim, 5);             // input projection
  total += dim;                                         // class token
  total += static_cast<std::size_t>(cfg.t_max + 1) * dim;  // positions
  std::size_t per_layer = 4 * (dim * dim + dim)         // attention
                          + 2 * (2 * dim)               // two layer norms
                          + (mlp * dim + mlp)           // mlp in
                          + (dim * mlp + dim);          // mlp out
  total += static_cast<std::size_t>(vec.layers) * per_layer;
  total += 2 * dim;  // final norm
  return total;
}

namespace {

// Padding rows must never influence a latent; every sample needs >=1 real step.
void check_mask_rows(const Tensor& mask) {
  require(mask.rank() == 2, ErrorCode::ShapeMismatch, "encode: mask must be [N,T]");
  for (std::size_t b = 0; b < mask.shape[0]; ++b) {
    double s = 0.0;
    for (std::size_t t = 0; t < mask.shape[1]; ++t)
      s += mask.data[b * mask.shape[1] + t];
    require(s > 0.0, ErrorCode::EmptyMask,
            "encode: sample " + std::to_string(b) + " has an all-zero mask");
  }
}

}  // namespace

Value vector_encode_rnn_graph(Binder& bind, const ModelConfig& cfg, Value rows,
                              Value mask) {
  Graph& g = bind.graph();
  const Tensor& rt = g.value(rows);
  require(rt.rank() == 3 && rt.shape[2] == 5, ErrorCode::ShapeMismatch,
          "encode: rows must be [N,T,5]");
  const Tensor& mt = g.value(mask);
  check_mask_rows(mt);
  require(mt.shape[0] == rt.shape[0] && mt.shape[1] == rt.shape[1],
          ErrorCode::ShapeMismatch, "encode: mask shape must match rows");
  std::size_t n = rt.shape[0], steps = rt.shape[1];
  const std::string cell = cfg.seq_encoder.family;
  DecState state = rnn_zero_state(g, cell, n, cfg.seq_encoder.hidden);
  bool lstm = cell == "LSTM";
  for (std::size_t t = 0; t < steps; ++t) {
    DecState next =
        rnn_cell_step(bind, "enc.vec.cell", cell, g.time_slice(rows, t), state);
    Value m = g.reshape(g.slice_cols(mask, t, t + 1), {n});
    DecState merged;
    merged.h = g.lerp_rows(state.h, next.h, m);
    if (lstm) merged.c = g.lerp_rows(state.c, next.c, m);
    state = merged;
  }
  return state.h;
}

Value vector_encode_transformer_graph(Binder& bind, const ModelConfig& cfg,
                                      Value rows, Value mask) {
  Graph& g = bind.graph();
  const Tensor& rt = g.value(rows);
  require(rt.rank() == 3 && rt.shape[2] == 5, ErrorCode::ShapeMismatch,
          "encode: rows must be [N,T,5]");
  std::size_t n = rt.shape[0], steps = rt.shape[1];
  require(steps <= static_cast<std::size_t>(cfg.t_max), ErrorCode::SequenceTooLong,
          "encode: sequence length " + std::to_string(steps) +
              " exceeds max positions " + std::to_string(cfg.t_max));
  const Tensor& mt = g.value(mask);
  check_mask_rows(mt);
  require(mt.shape[0] == n && mt.shape[1] == steps, ErrorCode::ShapeMismatch,
          "encode: mask shape must match rows");
  int dim = cfg.seq_encoder.hidden;

  Value flat = g.reshape(rows, {n * steps, 5});
  Value proj = g.linear(flat, bind("enc.tr.in.w"), bind("enc.tr.in.b"));
  Value x = g.reshape(proj, {n, steps, static_cast<std::size_t>(dim)});
  Value cls = g.reshape(g.tile_rows(bind("enc.tr.cls"), n),
                        {n, 1, static_cast<std::size_t>(dim)});
  x = g.concat_time(cls, x);

  std::vector<int> pos_idx(steps + 1);
  for (std::size_t i = 0; i <= steps; ++i) pos_idx[i] = static_cast<int>(i);
  x = g.add_timevec(x, g.gather_rows(bind("enc.tr.pos"), pos_idx));

  Value ones = g.constant(Tensor::full({n, 1}, 1.0));
  Value ext_mask = g.concat_cols(ones, mask);

  for (int l = 0; l < cfg.seq_encoder.layers; ++l) {
    std::string p = "enc.tr.l" + std::to_string(l);
    Value a = g.layer_norm(x, bind(p + ".ln1.g"), bind(p + ".ln1.b"));
    Value att = g.self_attention(a, ext_mask, bind(p + ".attn.wq"),
                                 bind(p + ".attn.bq"), bind(p + ".attn.wk"),
                                 bind(p + ".attn.bk"), bind(p + ".attn.wv"),
                                 bind(p + ".attn.bv"), bind(p + ".attn.wo"),
                                 bind(p + ".attn.bo"), cfg.seq_encoder.heads);
    x = g.add(x, att);
    Value m = g.layer_norm(x, bind(p + ".ln2.g"), bind(p + ".ln2.b"));
    Value mflat = g.reshape(m, {n * (steps + 1), static_cast<std::size_t>(dim)});
    Value hidden = g.relu(
        g.linear(mflat, bind(p + ".mlp.fc1.w"), bind(p + ".mlp.fc1.b")));
    Value mout = g.linear(hidden, bind(p + ".mlp.fc2.w"), bind(p + ".mlp.fc2.b"));
    x = g.add(x, g.reshape(mout, {n, steps + 1, static_cast<std::size_t>(dim)}));
  }
  x = g.layer_norm(x, bind("enc.tr.fin.g"), bind("enc.tr.fin.b"));
  return g.time_slice(x, 0);
}

// ------------------------------------------------------------ conv decoder

void init_conv_decoder(ParameterStore& store, const ModelConfig& cfg,
                       int out_channels, Rng& rng) {
  std::size_t before = store.total_params();
  const auto& dec = cfg.conv_decoder;
  int s = dec.start_resolution;
  init_linear(store, "dec.img.fc", s * s * dec.widths[0], cfg.seq_encoder.hidden,
              rng);
  for (int i = 0; i < dec.upsample_stages; ++i) {
    // conv_transpose2d weights are [C_in, C_out, kh, kw].
    store.add("dec.img.up" + std::to_string(i) + ".w",
              he_normal({static_cast<std::size_t>(dec.widths[i]),
                         static_cast<std::size_t>(dec.widths[i + 1]), 4, 4},
                        dec.widths[i] * 16, rng));
    store.add("dec.img.up" + std::to_string(i) + ".b",
              Tensor::zeros({static_cast<std::size_t>(dec.widths[i + 1])}));
  }
  init_conv(store, "dec.img.out", out_channels, dec.widths.back(), 3, rng);
  assert(store.total_params() - before ==
         conv_decoder_param_count(cfg, out_channels));
  (void)before;
}

std::size_t conv_decoder_param_count(const ModelConfig& cfg, int out_channels) {
  const auto& dec = cfg.conv_decoder;
  int s = dec.start_resolution;
  std::size_t total =
      linear_count(s * s * dec.widths[0], cfg.seq_encoder.hidden);
  for (int i = 0; i < dec.upsample_stages; ++i)
    total += static_cast<std::size_t>(dec.widths[i]) * dec.widths[i + 1] * 16 +
             dec.widths[i + 1];
  total += conv_count(out_channels, dec.widths.back(), 3);
  return total;
}

Value conv_decode_graph(Binder& bind, const ModelConfig& cfg, Value latent,
                        int out_channels) {
  Graph& g = bind.graph();
  const auto& dec = cfg.conv_decoder;
  const Tensor& lt = g.value(latent);
  require(lt.rank() == 2, ErrorCode::ShapeMismatch, "decode: latent must be [N,d]");
  std::size_t n = lt.shape[0];
  require(g.value(bind("dec.img.out.w")).shape[0] ==
              static_cast<std::size_t>(out_channels),
          ErrorCode::ShapeMismatch, "decode: output channel mismatch");
  std::size_t s = dec.start_resolution;
  Value x = g.relu(g.linear(latent, bind("dec.img.fc.w"), bind("dec.img.fc.b")));
  x = g.reshape(x, {n, static_cast<std::size_t>(dec.widths[0]), s, s});
  for (int i = 0; i < dec.upsample_stages; ++i) {
    std::string p = "dec.img.up" + std::to_string(i);
    x = g.relu(g.conv_transpose2d(x, bind(p + ".w"), bind(p + ".b"), 2, 1));
  }
  x = g.conv2d(x, bind("dec.img.out.w"), bind("dec.img.out.b"), 1, 1);
  return g.sigmoid(x);
}

// --------------------------------------------------------- host wrappers

namespace {

Tensor image_to_nchw(const RasterImage& image) {
  Tensor t({1, static_cast<std::size_t>(image.channels),
            static_cast<std::size_t>(image.height),
            static_cast<std::size_t>(image.width)});
  std::size_t hw = static_cast<std::size_t>(image.height) * image.width;
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < image.channels; ++c)
        t.data[static_cast<std::size_t>(c) * hw + y * image.width + x] =
            image.at(y, x, c);
  return t;
}

}  // namespace

std::pair<FeatureMap, LatentVector> image_encode(const RasterImage& image,
                                                 const ParameterStore& store,
                                                 const ModelConfig& cfg) {
  const auto& img = cfg.image_encoder;
  bool word = img.family == "word-conv-blstm";
  const Tensor& w0 =
      store.at(word ? "enc.img.word.c0.w" : "enc.img.s0.down.w");
  require(static_cast<std::size_t>(image.channels) == w0.shape[1],
          ErrorCode::ShapeMismatch,
          "image_encode: channel count does not match trained parameters");
  int down = power_of_two(word ? 3 : img.blocks);
  require(image.height % down == 0 && image.width % down == 0 &&
              image.height >= down && image.width >= down,
          ErrorCode::ShapeMismatch,
          "image_encode: image dims not divisible by the encoder stride");

  Graph g;
  Binder bind(g, store, /*trainable=*/false);
  EncodedImage enc = image_encode_graph(bind, cfg, g.constant(image_to_nchw(image)));

  LatentVector latent;
  latent.source = "image";
  latent.values = g.value(enc.latent).data;

  FeatureMap fm;
  if (word) {
    const Tensor& ss = g.value(enc.step_states);  // [1,T,2H]
    fm.h = 1;
    fm.w = ss.shape[1];
    fm.d = ss.shape[2];
    fm.grid = ss.data;
  } else {
    const Tensor& ft = g.value(enc.feature_map);  // [1,C,H,W]
    fm.h = ft.shape[2];
    fm.w = ft.shape[3];
    fm.d = ft.shape[1];
    fm.grid.resize(fm.h * fm.w * fm.d);
    for (std::size_t y = 0; y < fm.h; ++y)
      for (std::size_t x = 0; x < fm.w; ++x)
        for (std::size_t k = 0; k < fm.d; ++k)
          fm.grid[(y * fm.w + x) * fm.d + k] =
              ft.data[k * fm.h * fm.w + y * fm.w + x];
  }
  return {fm, latent};
}

Tensor init_decoder_state(const LatentVector& latent,
                          const ParameterStore& store, const ModelConfig& cfg) {
  const Tensor& w = store.at("dec.h0.w");
  const Tensor& b = store.at("dec.h0.b");
  require(latent.values.size() == w.shape[1], ErrorCode::ShapeMismatch,
          "init_decoder_state: latent dim does not match W_h");
  std::size_t hidden = w.shape[0];
  (void)cfg;
  Tensor h0({hidden});
  for (std::size_t i = 0; i < hidden; ++i) {
    double acc = b.data[i];
    for (std::size_t j = 0; j < w.shape[1]; ++j)
      acc += w.data[i * w.shape[1] + j] * latent.values[j];
    h0.data[i] = acc;
  }
  return h0;
}

namespace {

LatentVector encode_padded(const PaddedSequence& padded,
                           const ParameterStore& store, const ModelConfig& cfg,
                           bool transformer) {
  auto [rows, mask] = sequence_batch_tensors({padded});
  Graph g;
  Binder bind(g, store, /*trainable=*/false);
  Value rv = g.constant(std::move(rows));
  Value mv = g.constant(std::move(mask));
  Value lat = transformer ? vector_encode_transformer_graph(bind, cfg, rv, mv)
                          : vector_encode_rnn_graph(bind, cfg, rv, mv);
  LatentVector out;
  out.source = "vector";
  out.values = g.value(lat).data;
  return out;
}

}  // namespace

LatentVector vector_encode_rnn(const PaddedSequence& padded,
                               const ParameterStore& store,
                               const ModelConfig& cfg) {
  return encode_padded(padded, store, cfg, /*transformer=*/false);
}

LatentVector vector_encode_transformer(const PaddedSequence& padded,
                                       const ParameterStore& store,
                                       const ModelConfig& cfg) {
  return encode_padded(padded, store, cfg, /*transformer=*/true);
}

RasterImage conv_decode(const LatentVector& latent, const ParameterStore& store,
                        const ModelConfig& cfg, const RasterConfig& raster) {
  const Tensor& fcw = store.at("dec.img.fc.w");
  require(latent.values.size() == fcw.shape[1], ErrorCode::ShapeMismatch,
          "conv_decode: latent dim does not match the decoder input");
  const Tensor& ow = store.at("dec.img.out.w");
  require(ow.shape[0] == static_cast<std::size_t>(raster.channels),
          ErrorCode::ShapeMismatch, "conv_decode: channel mismatch with canvas");
  int side = cfg.conv_decoder.start_resolution *
             power_of_two(cfg.conv_decoder.upsample_stages);
  require(side == raster.height && side == raster.width,
          ErrorCode::ShapeMismatch,
          "conv_decode: decoder stages do not reproduce the canvas");

  Graph g;
  Binder bind(g, store, /*trainable=*/false);
  Value lat = g.constant(Tensor({1, latent.values.size()}, latent.values));
  Value imgv = conv_decode_graph(bind, cfg, lat, raster.channels);
  const Tensor& it = g.value(imgv);  // [1,C,H,W]

  RasterImage out;
  out.height = raster.height;
  out.width = raster.width;
  out.channels = raster.channels;
  out.pixels.resize(static_cast<std::size_t>(out.height) * out.width *
                    out.channels);
  std::size_t hw = static_cast<std::size_t>(out.height) * out.width;
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < out.channels; ++c)
        out.pixels[(static_cast<std::size_t>(y) * out.width + x) * out.channels +
                   c] = it.data[c * hw + static_cast<std::size_t>(y) * out.width + x];
  return out;
}

std::pair<Tensor, Tensor> sequence_batch_tensors(
    const std::vector<PaddedSequence>& batch) {
  require(!batch.empty(), ErrorCode::EmptyInput,
          "sequence batch: no sequences given");
  std::size_t n = batch.size(), steps = batch[0].mask.size();
  Tensor rows({n, steps, 5});
  Tensor mask({n, steps});
  for (std::size_t b = 0; b < n; ++b) {
    const auto& p = batch[b];
    require(p.mask.size() == steps && p.sequence.points.size() == steps,
            ErrorCode::ShapeMismatch,
            "sequence batch: all sequences must share one padded length");
    for (std::size_t t = 0; t < steps; ++t) {
      auto row = point_row(p.sequence.points[t]);
      for (std::size_t k = 0; k < 5; ++k) rows.data[(b * steps + t) * 5 + k] = row[k];
      mask.data[b * steps + t] = p.mask[t] ? 1.0 : 0.0;
    }
  }
  return {std::move(rows), std::move(mask)};
}

}  // namespace sketchssl
