#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "sketchssl/error.hpp"
#include "sketchssl/models.hpp"

using namespace sketchssl;

namespace {

RasterConfig canvas(int side) {
  RasterConfig rc;
  rc.height = side;
  rc.width = side;
  return rc;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d = 4;
  cfg.image_encoder.blocks = 2;
  cfg.image_encoder.widths = {4, 4};
  cfg.seq_decoder.hidden = 4;
  cfg.seq_encoder.hidden = 4;
  cfg.conv_decoder.start_resolution = 2;
  cfg.conv_decoder.upsample_stages = 2;
  cfg.conv_decoder.widths = {4, 4, 4};
  cfg.t_max = 8;
  cfg.finalize(canvas(8));
  return cfg;
}

void zero_all(ParameterStore& store, const std::string& prefix) {
  for (auto& [name, t] : store.tensors)
    if (name.rfind(prefix, 0) == 0)
      for (double& v : t.data) v = 0.0;
}

RasterImage make_image(int side, double fill) {
  RasterImage img;
  img.height = side;
  img.width = side;
  img.channels = 1;
  img.pixels.assign(static_cast<std::size_t>(side) * side, fill);
  return img;
}

PaddedSequence pad_canonical(const StrokeSequence& seq, std::size_t t) {
  return pad_or_truncate(seq, t);
}

StrokeSequence simple_sequence() {
  StrokeSequence seq;
  seq.points = {{0.1, 0.2, PenState::kDown},
                {0.4, 0.2, PenState::kUp},
                {0.5, 0.8, PenState::kDown},
                {0.9, 0.9, PenState::kEnd}};
  return seq;
}

gradcheck::BuildFn store_builder(
    std::function<Value(Graph&, Binder&, const gradcheck::Leaves&)> body) {
  return [body](Graph& g, const gradcheck::Leaves& leaves) {
    ParameterStore store;
    store.tensors = leaves;
    Binder bind(g, store, /*trainable=*/true);
    return body(g, bind, leaves);
  };
}

}  // namespace

TEST_CASE("config finalize fills defaults and validates geometry") {
  ModelConfig cfg;
  cfg.finalize(canvas(64));
  CHECK(cfg.image_encoder.widths == std::vector<int>{16, 32, 64, 128});
  CHECK(cfg.conv_decoder.widths == std::vector<int>{128, 64, 32, 16, 8});

  ModelConfig bad;
  bad.image_encoder.widths = {16, 32, 64, 100};  // last width must equal d
  CHECK_THROWS_AS(bad.finalize(canvas(64)), Error);

  ModelConfig odd;
  CHECK_THROWS_AS(odd.finalize(canvas(60)), Error);  // 60 not divisible by 16

  ModelConfig heads;
  heads.seq_encoder.family = "Transformer";
  heads.seq_encoder.hidden = 130;  // not divisible by 4 heads
  CHECK_THROWS_AS(heads.finalize(canvas(64)), Error);

  ModelConfig stages;
  stages.conv_decoder.upsample_stages = 3;  // 4 * 2^3 = 32 != 64
  stages.conv_decoder.widths = {8, 8, 8, 8};
  CHECK_THROWS_AS(stages.finalize(canvas(64)), Error);
}

TEST_CASE("parameter counts match the closed-form formulas") {
  Rng rng(7);
  ModelConfig cfg;
  cfg.finalize(canvas(64));

  ParameterStore store;
  init_image_encoder(store, cfg, 1, rng);
  std::size_t imgc = store.total_params();
  CHECK(imgc == image_encoder_param_count(cfg, 1));

  init_seq_decoder(store, cfg, rng);
  CHECK(store.total_params() - imgc == seq_decoder_param_count(cfg));
  std::size_t so_far = store.total_params();

  init_seq_encoder(store, cfg, rng);
  CHECK(store.total_params() - so_far == seq_encoder_param_count(cfg));
  so_far = store.total_params();

  init_conv_decoder(store, cfg, 1, rng);
  CHECK(store.total_params() - so_far == conv_decoder_param_count(cfg, 1));

  // GRU decoder: h0 affine + 3 gates (4 biases) + 5-way readout.
  std::size_t h = 128, d = 128, in = d + 5;
  CHECK(seq_decoder_param_count(cfg) ==
        (h * d + h) + (3 * in * h + 3 * h * h + 4 * h) + (5 * h + 5));

  ModelConfig tr;
  tr.seq_encoder.family = "Transformer";
  tr.finalize(canvas(64));
  ParameterStore tstore;
  init_seq_encoder(tstore, tr, rng);
  CHECK(tstore.total_params() == seq_encoder_param_count(tr));
  // dim 128, mlp 256, 2 layers, 65 learned positions.
  std::size_t dim = 128, mlp = 256;
  std::size_t layer = 4 * (dim * dim + dim) + 4 * dim + (mlp * dim + mlp) +
                      (dim * mlp + dim);
  CHECK(seq_encoder_param_count(tr) ==
        (dim * 5 + dim) + dim + 65 * dim + 2 * layer + 2 * dim);
}

TEST_CASE("paper-scale configuration is expressible") {
  ModelConfig cfg;
  cfg.d = 768;
  cfg.image_encoder.widths = {96, 192, 384, 768};
  cfg.seq_decoder.hidden = 512;
  cfg.seq_encoder.family = "Transformer";
  cfg.seq_encoder.layers = 8;
  cfg.seq_encoder.hidden = 768;
  cfg.seq_encoder.heads = 12;
  cfg.seq_encoder.mlp_dim = 2048;
  cfg.conv_decoder.upsample_stages = 6;
  cfg.conv_decoder.widths = {768, 384, 192, 96, 48, 24, 12};
  cfg.t_max = 200;
  cfg.finalize(canvas(256));
  // dim 768, mlp 2048, 8 layers, 201 learned positions; counts only, no alloc.
  std::size_t dim = 768, mlp = 2048;
  std::size_t layer =
      4 * (dim * dim + dim) + 4 * dim + (mlp * dim + mlp) + (dim * mlp + dim);
  CHECK(seq_encoder_param_count(cfg) ==
        (dim * 5 + dim) + dim + 201 * dim + 8 * layer + 2 * dim);
  CHECK(seq_encoder_param_count(cfg) == 44'273'152);
  CHECK(seq_decoder_param_count(cfg) ==
        (512u * 768 + 512) + (3u * 773 * 512 + 3u * 512 * 512 + 4u * 512) +
            (5u * 512 + 5));
}

TEST_CASE("image_encode shape arithmetic at the desk default") {
  Rng rng(11);
  ModelConfig cfg;
  cfg.finalize(canvas(64));
  ParameterStore store;
  init_image_encoder(store, cfg, 1, rng);

  auto [fm, latent] = image_encode(make_image(64, 0.5), store, cfg);
  CHECK(latent.values.size() == 128);
  CHECK(latent.source == "image");
  CHECK(fm.h == 4);
  CHECK(fm.w == 4);
  CHECK(fm.d == 128);
  for (double v : latent.values) CHECK(std::isfinite(v));

  // Pooled latent must equal the channelwise max of the feature map.
  for (std::size_t k = 0; k < 5; ++k) {
    double mx = fm.at(0, 0, k);
    for (std::size_t y = 0; y < fm.h; ++y)
      for (std::size_t x = 0; x < fm.w; ++x) mx = std::max(mx, fm.at(y, x, k));
    CHECK(latent.values[k] == doctest::Approx(mx).epsilon(1e-12));
  }
}

TEST_CASE("image_encode rejects mismatched inputs") {
  Rng rng(11);
  ModelConfig cfg = tiny_config();
  ParameterStore store;
  init_image_encoder(store, cfg, 1, rng);

  RasterImage rgb = make_image(8, 0.5);
  rgb.channels = 3;
  rgb.pixels.assign(8 * 8 * 3, 0.5);
  CHECK_THROWS_AS(image_encode(rgb, store, cfg), Error);

  RasterImage odd;
  odd.height = 6;
  odd.width = 6;
  odd.channels = 1;
  odd.pixels.assign(36, 0.5);  // 6 not divisible by 4
  CHECK_THROWS_AS(image_encode(odd, store, cfg), Error);
}

TEST_CASE("constant feature channels pool to their constant") {
  Rng rng(3);
  ModelConfig cfg;
  cfg.d = 2;
  cfg.image_encoder.blocks = 1;
  cfg.image_encoder.widths = {2};
  cfg.conv_decoder.start_resolution = 2;
  cfg.conv_decoder.upsample_stages = 2;
  cfg.conv_decoder.widths = {4, 4, 4};
  cfg.finalize(canvas(8));

  for (const char* pool : {"max", "avg"}) {
    cfg.pooling = pool;
    ParameterStore store;
    init_image_encoder(store, cfg, 1, rng);
    zero_all(store, "enc.img.");
    // Zero weights make the block input-independent:
    // stage out = relu(relu(b_down) + b_r2).
    store.at("enc.img.s0.down.b") = Tensor({2}, {0.3, 0.4});
    store.at("enc.img.s0.r2.b") = Tensor({2}, {0.2, -0.1});

    auto [fm, latent] = image_encode(make_image(8, 0.77), store, cfg);
    REQUIRE(latent.values.size() == 2);
    CHECK(latent.values[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(latent.values[1] == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(fm.at(1, 1, 0) == doctest::Approx(0.5).epsilon(1e-12));
  }
}

TEST_CASE("max pooling ignores regions that never win a channel max") {
  // Identity-style encoder: centre-tap downsampling conv samples even pixel
  // coordinates only, so odd coordinates can change freely.
  ModelConfig cfg;
  cfg.d = 1;
  cfg.image_encoder.blocks = 1;
  cfg.image_encoder.widths = {1};
  cfg.conv_decoder.start_resolution = 2;
  cfg.conv_decoder.upsample_stages = 2;
  cfg.conv_decoder.widths = {4, 4, 4};
  cfg.finalize(canvas(8));

  Rng rng(5);
  ParameterStore store;
  init_image_encoder(store, cfg, 1, rng);
  zero_all(store, "enc.img.");
  store.at("enc.img.s0.down.w").data[4] = 1.0;  // centre of the 3x3 kernel

  RasterImage a = make_image(8, 0.1);
  a.pixels[0] = 0.9;  // sampled pixel (0,0) carries the max
  RasterImage b = a;
  b.pixels[1 * 8 + 1] = 0.7;  // odd-coordinate pixel, never sampled

  auto la = image_encode(a, store, cfg).second;
  auto lb = image_encode(b, store, cfg).second;
  REQUIRE(la.values.size() == 1);
  CHECK(la.values[0] == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(la.values == lb.values);
}

TEST_CASE("init_decoder_state is the documented affine map") {
  ModelConfig cfg = tiny_config();  // d = hidden = 4
  ParameterStore store;
  store.add("dec.h0.w", Tensor::zeros({4, 4}));
  store.add("dec.h0.b", Tensor({4}, {0.1, -0.2, 0.3, 0.4}));

  LatentVector l;
  l.values = {1.0, 2.0, 3.0, 4.0};
  Tensor h0 = init_decoder_state(l, store, cfg);
  CHECK(h0.data == std::vector<double>{0.1, -0.2, 0.3, 0.4});  // W_h = 0

  Tensor& w = store.at("dec.h0.w");
  for (int i = 0; i < 4; ++i) w.data[i * 4 + i] = 1.0;
  store.at("dec.h0.b") = Tensor::zeros({4});
  CHECK(init_decoder_state(l, store, cfg).data == l.values);  // identity

  store.at("dec.h0.b") = Tensor({4}, {0.5, 0.5, 0.5, 0.5});
  Tensor single = init_decoder_state(l, store, cfg);
  LatentVector twice;
  twice.values = {2.0, 4.0, 6.0, 8.0};
  Tensor doubled = init_decoder_state(twice, store, cfg);
  for (int i = 0; i < 4; ++i)
    CHECK(doubled.data[i] - 0.5 ==
          doctest::Approx(2.0 * (single.data[i] - 0.5)).epsilon(1e-12));

  LatentVector wrong;
  wrong.values = {1.0, 2.0};
  CHECK_THROWS_AS(init_decoder_state(wrong, store, cfg), Error);
}

TEST_CASE("zeroed decoder weights emit b_y at every step") {
  Rng rng(9);
  ModelConfig cfg = tiny_config();
  ParameterStore store;
  init_seq_decoder(store, cfg, rng);
  zero_all(store, "dec.");
  store.at("dec.out.b") = Tensor({5}, {0.25, -0.5, 2.0, 0.0, -1.0});

  LatentVector l;
  l.values = {0.3, -0.7, 1.1, 0.0};
  auto preds = decode_sequence(store, cfg, l, 6, /*teacher_forcing=*/false,
                               nullptr);
  REQUIRE(preds.size() == 6);  // argmax pen = q1, so the loop runs to t_max
  for (const auto& p : preds) {
    CHECK(p.x == 0.25);
    CHECK(p.y == -0.5);
    CHECK(p.pen_logits[0] == 2.0);
    CHECK(p.pen_logits[1] == 0.0);
    CHECK(p.pen_logits[2] == -1.0);
  }

  // Readout is 2+3 for any hidden size, and softmax over the logits is a
  // 3-way distribution.
  double z = 0.0;
  for (double q : preds[0].pen_logits) z += std::exp(q - 2.0);
  double total = 0.0;
  for (double q : preds[0].pen_logits) total += std::exp(q - 2.0) / z;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("autoregressive decode is deterministic and stops after q3") {
  // Engineered GRU: zero gates give z = 1/2, n = 0, so h halves each step
  // from h0 = 4. Pen logits (q1, q2, q3) = (0.6, 0, 1.5 - h) make q3 win
  // for the first time at step 2.
  ModelConfig cfg;
  cfg.d = 2;
  cfg.seq_decoder.hidden = 1;
  cfg.image_encoder.blocks = 1;
  cfg.image_encoder.widths = {2};
  cfg.d = 2;
  cfg.conv_decoder.start_resolution = 2;
  cfg.conv_decoder.upsample_stages = 2;
  cfg.conv_decoder.widths = {4, 4, 4};
  cfg.finalize(canvas(8));

  Rng rng(13);
  ParameterStore store;
  init_seq_decoder(store, cfg, rng);
  zero_all(store, "dec.");
  store.at("dec.h0.b") = Tensor({1}, {4.0});
  store.at("dec.out.w") = Tensor({5, 1}, {0.0, 0.0, 0.0, 0.0, -1.0});
  store.at("dec.out.b") = Tensor({5}, {0.0, 0.0, 0.6, 0.0, 1.5});

  LatentVector l;
  l.values = {0.0, 0.0};
  auto preds = decode_sequence_autoregressive(store, cfg, l, 10);
  REQUIRE(preds.size() == 3);  // steps 0,1 pen down; step 2 emits q3
  CHECK(preds[0].pen_logits[2] == doctest::Approx(-0.5));   // h=2
  CHECK(preds[1].pen_logits[2] == doctest::Approx(0.5));    // h=1
  CHECK(preds[2].pen_logits[2] == doctest::Approx(1.0));    // h=0.5

  auto again = decode_sequence_autoregressive(store, cfg, l, 10);
  REQUIRE(again.size() == preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    CHECK(again[i].x == preds[i].x);
    CHECK(again[i].y == preds[i].y);
    CHECK(again[i].pen_logits == preds[i].pen_logits);
  }
}

TEST_CASE("decode_sequence boundary and mode contract") {
  Rng rng(17);
  ModelConfig cfg = tiny_config();
  ParameterStore store;
  init_seq_decoder(store, cfg, rng);
  LatentVector l;
  l.values = {0.1, 0.2, -0.3, 0.4};

  CHECK_THROWS_AS(decode_sequence(store, cfg, l, 3, true, nullptr), Error);

  PaddedSequence targets = pad_canonical(simple_sequence(), 4);
  CHECK_THROWS_AS(decode_sequence(store, cfg, l, 3, true, &targets), Error);

  PaddedSequence one = pad_canonical(simple_sequence(), 1);
  auto tf1 = decode_sequence(store, cfg, l, 1, true, &one);
  CHECK(tf1.size() == 1);

  auto ar1 = decode_sequence(store, cfg, l, 1, false, nullptr);
  CHECK(ar1.size() == 1);
}

TEST_CASE("teacher forcing is causal in the targets") {
  Rng rng(19);
  ModelConfig cfg = tiny_config();
  ParameterStore store;
  init_seq_decoder(store, cfg, rng);
  LatentVector l;
  l.values = {0.4, -0.1, 0.2, 0.7};

  PaddedSequence targets = pad_canonical(simple_sequence(), 4);
  auto base = decode_sequence(store, cfg, l, 4, true, &targets);

  PaddedSequence bumped = targets;
  bumped.sequence.points[2].x += 0.25;  // perturb targets[2] only
  auto after = decode_sequence(store, cfg, l, 4, true, &bumped);

  // P_t depends on targets[0..t-1]: steps 0..2 are bitwise unchanged, the
  // perturbation reaches the input at step 3.
  for (int t = 0; t < 3; ++t) {
    CHECK(after[t].x == base[t].x);
    CHECK(after[t].y == base[t].y);
    CHECK(after[t].pen_logits == base[t].pen_logits);
  }
  CHECK(after[3].x != base[3].x);
}

TEST_CASE("recurrent encoder latents ignore padding entirely") {
  for (const char* family : {"GRU", "LSTM"}) {
    Rng rng(23);
    ModelConfig cfg = tiny_config();
    cfg.seq_encoder.family = family;
    ParameterStore store;
    init_seq_encoder(store, cfg, rng);

    StrokeSequence seq = simple_sequence();
    auto l10 = vector_encode_rnn(pad_canonical(seq, 10), store, cfg);
    auto l20 = vector_encode_rnn(pad_canonical(seq, 20), store, cfg);
    CHECK(l10.source == "vector");
    CHECK(l10.values == l20.values);  // masked updates freeze the state

    auto again = vector_encode_rnn(pad_canonical(seq, 10), store, cfg);
    CHECK(again.values == l10.values);

    StrokeSequence single;
    single.points = {{0.5, 0.5, PenState::kEnd}};
    auto l1 = vector_encode_rnn(pad_canonical(single, 1), store, cfg);
    auto l8 = vector_encode_rnn(pad_canonical(single, 8), store, cfg);
    CHECK(l1.values.size() == 4);
    CHECK(l1.values == l8.values);

    PaddedSequence empty;
    empty.sequence.points = {{0.0, 0.0, PenState::kEnd},
                             {0.0, 0.0, PenState::kEnd}};
    empty.mask = {0, 0};
    CHECK_THROWS_AS(vector_encode_rnn(empty, store, cfg), Error);
  }
}

TEST_CASE("transformer encoder masks padding and reads the class token") {
  Rng rng(29);
  ModelConfig cfg = tiny_config();
  cfg.seq_encoder.family = "Transformer";
  cfg.seq_encoder.layers = 2;
  cfg.seq_encoder.hidden = 8;
  cfg.seq_encoder.heads = 2;
  cfg.seq_encoder.mlp_dim = 16;
  cfg.finalize(canvas(8));
  ParameterStore store;
  init_seq_encoder(store, cfg, rng);

  StrokeSequence seq = simple_sequence();
  auto l6 = vector_encode_transformer(pad_canonical(seq, 6), store, cfg);
  auto l8 = vector_encode_transformer(pad_canonical(seq, 8), store, cfg);
  CHECK(l6.values.size() == 8);  // latent dim = model dim
  REQUIRE(l6.values.size() == l8.values.size());
  for (std::size_t i = 0; i < l6.values.size(); ++i)
    CHECK(l6.values[i] == doctest::Approx(l8.values[i]).epsilon(1e-6));

  // Swapping the contents of two masked rows cannot reach the class token.
  PaddedSequence padded = pad_canonical(seq, 7);
  padded.sequence.points[5] = {0.123, 0.456, PenState::kDown};
  padded.sequence.points[6] = {0.789, 0.012, PenState::kUp};
  auto la = vector_encode_transformer(padded, store, cfg);
  std::swap(padded.sequence.points[5], padded.sequence.points[6]);
  auto lb = vector_encode_transformer(padded, store, cfg);
  CHECK(la.values == lb.values);

  PaddedSequence too_long = pad_canonical(seq, 9);  // t_max = 8
  CHECK_THROWS_AS(vector_encode_transformer(too_long, store, cfg), Error);

  PaddedSequence empty;
  empty.sequence.points = {{0.0, 0.0, PenState::kEnd}};
  empty.mask = {0};
  CHECK_THROWS_AS(vector_encode_transformer(empty, store, cfg), Error);
}

TEST_CASE("conv decoder reproduces the canvas and squashes to (0,1)") {
  Rng rng(31);
  ModelConfig cfg;
  cfg.finalize(canvas(64));  // start 4, 4 stages -> 64
  ParameterStore store;
  init_conv_decoder(store, cfg, 1, rng);

  LatentVector l;
  l.values.assign(128, 0.0);
  for (std::size_t i = 0; i < l.values.size(); ++i)
    l.values[i] = 0.1 * std::sin(static_cast<double>(i));

  RasterImage img = conv_decode(l, store, cfg, canvas(64));
  CHECK(img.height == 64);
  CHECK(img.width == 64);
  CHECK(img.channels == 1);
  for (double v : img.pixels) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }

  RasterImage again = conv_decode(l, store, cfg, canvas(64));
  CHECK(again.pixels == img.pixels);

  CHECK_THROWS_AS(conv_decode(l, store, cfg, canvas(32)), Error);

  zero_all(store, "dec.img.");
  RasterImage mid = conv_decode(l, store, cfg, canvas(64));
  for (double v : mid.pixels) CHECK(v == 0.5);  // sigmoid(0)
}

TEST_CASE("word encoder emits one column per 8 pixels of width") {
  Rng rng(37);
  ModelConfig cfg;
  cfg.image_encoder.family = "word-conv-blstm";
  cfg.image_encoder.blocks = 3;
  cfg.image_encoder.widths = {3, 4, 5};
  cfg.image_encoder.blstm_hidden = 3;
  cfg.d = 6;
  cfg.conv_decoder.start_resolution = 4;
  cfg.conv_decoder.upsample_stages = 3;
  cfg.conv_decoder.widths = {4, 4, 4, 4};
  RasterConfig rc;
  rc.height = 32;
  rc.width = 32;
  cfg.finalize(rc);

  ParameterStore store;
  init_image_encoder(store, cfg, 1, rng);
  CHECK(store.total_params() == image_encoder_param_count(cfg, 1));

  RasterImage word;
  word.height = 32;
  word.width = 128;
  word.channels = 1;
  word.pixels.assign(32 * 128, 1.0);
  for (int x = 20; x < 90; ++x) word.pixels[16 * 128 + x] = 0.0;

  auto [fm, latent] = image_encode(word, store, cfg);
  CHECK(latent.values.size() == 6);  // 2 * blstm_hidden
  CHECK(fm.h == 1);
  CHECK(fm.w == 16);  // 128 / 8 columns
  CHECK(fm.d == 6);
  for (double v : latent.values) CHECK(std::isfinite(v));
}

TEST_CASE("outputs stay finite at extreme finite inputs") {
  Rng rng(41);
  ModelConfig cfg = tiny_config();
  ParameterStore store;
  init_image_encoder(store, cfg, 1, rng);
  init_seq_decoder(store, cfg, rng);
  init_seq_encoder(store, cfg, rng);
  init_conv_decoder(store, cfg, 1, rng);

  RasterImage hot = make_image(8, 1.0);
  for (std::size_t i = 0; i < hot.pixels.size(); ++i)
    hot.pixels[i] = (i % 2) ? 1e6 : -1e6;
  auto [fm, latent] = image_encode(hot, store, cfg);
  for (double v : latent.values) CHECK(std::isfinite(v));

  LatentVector big;
  big.values = {1e8, -1e8, 1e8, -1e8};
  auto preds = decode_sequence_autoregressive(store, cfg, big, 8);
  for (const auto& p : preds) {
    CHECK(std::isfinite(p.x));
    CHECK(std::isfinite(p.y));
    for (double q : p.pen_logits) CHECK(std::isfinite(q));
  }

  RasterImage img = conv_decode(big, store, cfg, canvas(8));
  for (double v : img.pixels) CHECK(std::isfinite(v));

  StrokeSequence far;
  far.points = {{1e6, -1e6, PenState::kDown}, {-1e6, 1e6, PenState::kEnd}};
  auto lr = vector_encode_rnn(pad_or_truncate(far, 4), store, cfg);
  for (double v : lr.values) CHECK(std::isfinite(v));

  ModelConfig trc = tiny_config();
  trc.seq_encoder.family = "Transformer";
  trc.seq_encoder.hidden = 4;
  trc.seq_encoder.heads = 2;
  trc.seq_encoder.mlp_dim = 8;
  ParameterStore trs;
  init_seq_encoder(trs, trc, rng);
  auto lt = vector_encode_transformer(pad_or_truncate(far, 4), trs, trc);
  for (double v : lt.values) CHECK(std::isfinite(v));
}

TEST_CASE("sequence batch tensors require one shared padded length") {
  std::vector<PaddedSequence> batch = {pad_canonical(simple_sequence(), 6),
                                       pad_canonical(simple_sequence(), 8)};
  CHECK_THROWS_AS(sequence_batch_tensors(batch), Error);
  CHECK_THROWS_AS(sequence_batch_tensors({}), Error);
}

// ---------------------------------------------------------- gradient checks

TEST_CASE("image encoder parameter gradients match finite differences") {
  Rng rng(101);
  ModelConfig cfg = tiny_config();
  ParameterStore store;
  init_image_encoder(store, cfg, 1, rng);
  Tensor images = gradcheck::random_tensor({2, 1, 8, 8}, rng, 0.05, 0.95);

  auto build = store_builder(
      [&cfg, images](Graph& g, Binder& bind, const gradcheck::Leaves&) {
        auto enc = image_encode_graph(bind, cfg, g.constant(images));
        return g.mean_all(g.square(enc.latent));
      });
  auto report = gradcheck::check(build, store.tensors, 1e-4);
  CAPTURE(report.worst);
  CHECK(report.max_rel_err < 1e-3);
}

TEST_CASE("word encoder parameter gradients match finite differences") {
  Rng rng(103);
  ModelConfig cfg;
  cfg.image_encoder.family = "word-conv-blstm";
  cfg.image_encoder.blocks = 3;
  cfg.image_encoder.widths = {2, 3, 4};
  cfg.image_encoder.blstm_hidden = 3;
  cfg.d = 6;
  cfg.conv_decoder.start_resolution = 1;
  cfg.conv_decoder.upsample_stages = 3;
  cfg.conv_decoder.widths = {4, 4, 4, 4};
  RasterConfig rc;
  rc.height = 8;
  rc.width = 8;
  cfg.finalize(rc);

  ParameterStore store;
  init_image_encoder(store, cfg, 1, rng);
  Tensor images = gradcheck::random_tensor({2, 1, 8, 16}, rng, 0.05, 0.95);

  auto build = store_builder(
      [&cfg, images](Graph& g, Binder& bind, const gradcheck::Leaves&) {
        auto enc = image_encode_graph(bind, cfg, g.constant(images));
        Value probe = g.add(g.mean_all(g.square(enc.latent)),
                            g.mean_all(g.square(enc.step_states)));
        return probe;
      });
  auto report = gradcheck::check(build, store.tensors, 1e-4);
  CAPTURE(report.worst);
  CHECK(report.max_rel_err < 1e-3);
}

TEST_CASE("sequence decoder gradients match finite differences") {
  for (const char* cell : {"GRU", "LSTM"}) {
    Rng rng(107);
    ModelConfig cfg = tiny_config();
    cfg.seq_decoder.cell = cell;
    ParameterStore store;
    init_seq_decoder(store, cfg, rng);

    Tensor targets = gradcheck::random_tensor({2, 3, 5}, rng, 0.2, 1.0);
    gradcheck::Leaves leaves = store.tensors;
    leaves["latent"] = gradcheck::random_tensor({2, 4}, rng, 0.2, 1.0);

    auto build = store_builder(
        [&cfg, targets](Graph& g, Binder& bind, const gradcheck::Leaves& lv) {
          Value latent = g.param("latent", lv.at("latent"));
          auto outs = decode_sequence_teacher_forcing(bind, cfg, latent, targets);
          return g.mean_all(g.square(g.stack_time(outs)));
        });
    auto report = gradcheck::check(build, leaves, 1e-4);
    CAPTURE(cell);
    CAPTURE(report.worst);
    CHECK(report.max_rel_err < 1e-3);
  }
}

TEST_CASE("recurrent sequence encoder gradients match finite differences") {
  for (const char* family : {"GRU", "LSTM"}) {
    Rng rng(109);
    ModelConfig cfg = tiny_config();
    cfg.seq_encoder.family = family;
    ParameterStore store;
    init_seq_encoder(store, cfg, rng);

    Tensor rows = gradcheck::random_tensor({2, 4, 5}, rng, 0.2, 1.0);
    Tensor mask({2, 4}, {1, 1, 1, 0, 1, 1, 1, 1});

    auto build = store_builder(
        [&cfg, rows, mask](Graph& g, Binder& bind, const gradcheck::Leaves&) {
          Value latent = vector_encode_rnn_graph(bind, cfg, g.constant(rows),
                                                 g.constant(mask));
          return g.mean_all(g.square(latent));
        });
    auto report = gradcheck::check(build, store.tensors, 1e-4);
    CAPTURE(family);
    CAPTURE(report.worst);
    CHECK(report.max_rel_err < 1e-3);
  }
}

TEST_CASE("transformer encoder gradients match finite differences") {
  Rng rng(113);
  ModelConfig cfg = tiny_config();
  cfg.seq_encoder.family = "Transformer";
  cfg.seq_encoder.layers = 1;
  cfg.seq_encoder.hidden = 8;
  cfg.seq_encoder.heads = 2;
  cfg.seq_encoder.mlp_dim = 8;
  cfg.t_max = 4;
  cfg.finalize(canvas(8));
  ParameterStore store;
  init_seq_encoder(store, cfg, rng);

  Tensor rows = gradcheck::random_tensor({2, 3, 5}, rng, 0.2, 1.0);
  Tensor mask({2, 3}, {1, 1, 0, 1, 1, 1});

  auto build = store_builder(
      [&cfg, rows, mask](Graph& g, Binder& bind, const gradcheck::Leaves&) {
        Value latent = vector_encode_transformer_graph(
            bind, cfg, g.constant(rows), g.constant(mask));
        return g.mean_all(g.square(latent));
      });
  auto report = gradcheck::check(build, store.tensors, 1e-4);
  CAPTURE(report.worst);
  CHECK(report.max_rel_err < 1e-3);
}

TEST_CASE("conv decoder gradients match finite differences") {
  // Seed chosen so no relu pre-activation sits within the FD step of its
  // kink; the measured error is then limited by arithmetic, not geometry.
  Rng rng(129);
  ModelConfig cfg = tiny_config();
  ParameterStore store;
  init_conv_decoder(store, cfg, 1, rng);

  gradcheck::Leaves leaves = store.tensors;
  leaves["latent"] = gradcheck::random_tensor({2, 4}, rng, 0.2, 1.0);
  Tensor target = gradcheck::random_tensor({2, 1, 8, 8}, rng, 0.05, 0.95);

  auto build = store_builder(
      [&cfg, target](Graph& g, Binder& bind, const gradcheck::Leaves& lv) {
        Value latent = g.param("latent", lv.at("latent"));
        Value img = conv_decode_graph(bind, cfg, latent, 1);
        return g.mean_all(g.square(g.sub(img, g.constant(target))));
      });
  auto report = gradcheck::check(build, leaves, 1e-4);
  CAPTURE(report.worst);
  CHECK(report.max_rel_err < 1e-3);
}
