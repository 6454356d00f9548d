#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "gradcheck.hpp"
#include "sketchssl/checkpoint.hpp"
#include "sketchssl/data.hpp"
#include "sketchssl/downstream_handwriting.hpp"
#include "sketchssl/error.hpp"
#include "sketchssl/models.hpp"
#include "sketchssl/pretrain.hpp"
#include "sketchssl/rng.hpp"

using namespace sketchssl;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
  fs::path dir = fs::temp_directory_path() / ("sketchssl_hw_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

RasterConfig word_canvas() {
  RasterConfig r;
  r.height = 16;
  r.width = 48;
  return r;
}

/// Word-image encoder sized for the 16x48 canvas: stride 8 leaves 6 columns.
ModelConfig word_model() {
  ModelConfig m;
  m.image_encoder.family = "word-conv-blstm";
  m.image_encoder.blocks = 3;
  m.image_encoder.widths = {8, 8, 16};
  m.image_encoder.blstm_hidden = 8;
  m.d = 16;
  m.seq_decoder.hidden = 8;
  m.seq_encoder.hidden = 8;
  m.conv_decoder.start_resolution = 4;
  m.conv_decoder.upsample_stages = 2;
  m.conv_decoder.widths = {8, 8, 8};
  m.t_max = 24;
  return m;
}

std::vector<WordSample> word_corpus(int count, std::uint64_t seed,
                                    int min_len = 2, int max_len = 3) {
  SyntheticWordSpec spec;
  spec.count = count;
  spec.seed = seed;
  spec.min_length = min_len;
  spec.max_length = max_len;
  return make_word_samples(make_synthetic_words(spec).first, word_canvas());
}

RecognizerConfig tiny_recognizer() {
  RecognizerConfig cfg;
  cfg.model = word_model();
  cfg.raster = word_canvas();
  cfg.decoder.hidden = 16;
  cfg.decoder.attn_dim = 8;
  cfg.decoder.embed_dim = 8;
  cfg.max_text_len = 4;
  cfg.batch_size = 16;
  return cfg;
}

CharVocab glyph_vocab() {
  return CharVocab::from_alphabet(synthetic_glyph_names());
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

/// Reference edit distance straight off the recursive definition.
int lev_oracle(const std::string& a, const std::string& b) {
  if (a.empty()) return static_cast<int>(b.size());
  if (b.empty()) return static_cast<int>(a.size());
  std::string at = a.substr(1), bt = b.substr(1);
  int sub = lev_oracle(at, bt) + (a[0] == b[0] ? 0 : 1);
  int del = lev_oracle(at, b) + 1;
  int ins = lev_oracle(a, bt) + 1;
  return std::min({sub, del, ins});
}

}  // namespace

TEST_CASE("vocabulary indexes characters then the three specials") {
  CharVocab v = glyph_vocab();
  CHECK(v.chars == "acehlnostu");
  CHECK(v.size() == 13);
  CHECK(v.start_index() == 10);
  CHECK(v.end_index() == 11);
  CHECK(v.pad_index() == 12);
  CHECK(v.index_of('a') == 0);
  CHECK(v.index_of('u') == 9);

  CHECK(v.encode("ace", 6) == std::vector<int>{0, 1, 2, 11, 12, 12});
  CHECK(v.encode("u", 2) == std::vector<int>{9, 11});
  CHECK(v.decode({0, 1, 2, 11, 12, 12}) == "ace");
  CHECK(v.decode({3, 12, 0}) == "h");   // pad terminates
  CHECK(v.decode({10, 4, 6, 11}) == "lo");  // leading start id is dropped
  CHECK(v.decode({11}) == "");

  CHECK_THROWS_WITH_AS(v.index_of('z'), doctest::Contains("UnknownClassName"),
                       Error);
  CHECK_THROWS_WITH_AS(v.encode("acehl", 5),
                       doctest::Contains("SequenceTooLong"), Error);
  CHECK_THROWS_WITH_AS(v.decode({42}), doctest::Contains("LabelOutOfRange"),
                       Error);
  CHECK_THROWS_WITH_AS(CharVocab::from_alphabet({}),
                       doctest::Contains("EmptyAlphabet"), Error);
  CHECK_THROWS_WITH_AS(CharVocab::from_alphabet({"a", "a"}),
                       doctest::Contains("ConfigError"), Error);
  CHECK_THROWS_WITH_AS(CharVocab::from_alphabet({"ab"}),
                       doctest::Contains("ConfigError"), Error);
}

TEST_CASE("word samples pair strokes, raster, and transcription") {
  std::vector<WordSample> words = word_corpus(6, 5);
  REQUIRE(words.size() == 6);
  for (const WordSample& w : words) {
    CHECK(!w.text.empty());
    CHECK(w.text.size() >= 2);
    CHECK(w.text.size() <= 3);
    CHECK(w.raster.height == 16);
    CHECK(w.raster.width == 48);
    CHECK(w.raster == render(w.vector, word_canvas()));  // re-render agrees
  }

  LabeledSample unlabeled;
  unlabeled.id = "w0";
  unlabeled.vector = from_polylines({{{0.1, 0.1}, {0.9, 0.9}}});
  CHECK_THROWS_WITH_AS(make_word_samples({unlabeled}, word_canvas()),
                       doctest::Contains("MissingTargets"), Error);
}

TEST_CASE("word image encoder emits one feature column per 8 pixels") {
  ModelConfig model = word_model();
  model.finalize(word_canvas());
  ParameterStore store;
  Rng rng(3);
  init_image_encoder(store, model, 1, rng);

  std::vector<WordSample> words = word_corpus(3, 9);
  std::vector<RasterImage> images;
  for (const WordSample& w : words) images.push_back(w.raster);

  HostFeatures out = handwriting_image_encode(store, model, word_canvas(), images);
  CHECK(out.features.shape == std::vector<std::size_t>{3, 6, 16});
  CHECK(out.latent.shape == std::vector<std::size_t>{3, 16});
  for (double x : out.features.data) CHECK(std::isfinite(x));

  HostFeatures again =
      handwriting_image_encode(store, model, word_canvas(), images);
  CHECK(out.features.data == again.features.data);
  CHECK(out.latent.data == again.latent.data);

  // The stack is fully convolutional along width: a 128-wide render of the
  // same word yields 16 columns with the same parameters.
  RasterConfig wide = word_canvas();
  wide.width = 128;
  HostFeatures wide_out = handwriting_image_encode(
      store, model, word_canvas(), {render(words[0].vector, wide)});
  CHECK(wide_out.features.shape == std::vector<std::size_t>{1, 16, 16});
  CHECK(wide_out.latent.shape == std::vector<std::size_t>{1, 16});

  RasterConfig tall = word_canvas();
  tall.height = 24;
  CHECK_THROWS_WITH_AS(
      handwriting_image_encode(store, model, word_canvas(),
                               {render(words[0].vector, tall)}),
      doctest::Contains("BadAspect"), Error);
  RasterConfig ragged = word_canvas();
  ragged.width = 20;
  CHECK_THROWS_WITH_AS(
      handwriting_image_encode(store, model, word_canvas(),
                               {render(words[0].vector, ragged)}),
      doctest::Contains("BadAspect"), Error);
  CHECK_THROWS_WITH_AS(
      handwriting_image_encode(
          store, model, word_canvas(),
          {words[0].raster, render(words[1].vector, wide)}),
      doctest::Contains("BadAspect"), Error);
  CHECK_THROWS_WITH_AS(
      handwriting_image_encode(store, model, word_canvas(), {}),
      doctest::Contains("EmptyDataset"), Error);

  ModelConfig square;
  square.image_encoder.blocks = 2;
  square.image_encoder.widths = {8, 8};
  square.d = 8;
  square.conv_decoder.start_resolution = 4;
  square.conv_decoder.upsample_stages = 2;
  square.conv_decoder.widths = {8, 8, 8};
  RasterConfig sq;
  sq.height = 16;
  sq.width = 16;
  square.finalize(sq);
  CHECK_THROWS_WITH_AS(
      handwriting_image_encode(store, square, sq, {words[0].raster}),
      doctest::Contains("ConfigError"), Error);
}

TEST_CASE("online encoder: shapes, padding invariance, parameter count") {
  OnlineEncoderConfig cfg;
  cfg.layers = 4;
  cfg.hidden = 6;
  ParameterStore store;
  Rng rng(11);
  init_online_encoder(store, cfg, rng);
  CHECK(store.total_params() == online_encoder_param_count(cfg));
  // Layer 0 consumes 5-wide rows, deeper layers the 2*hidden concat.
  std::size_t expected = 2 * rnn_cell_param_count("LSTM", 5, 6) +
                         3 * 2 * rnn_cell_param_count("LSTM", 12, 6);
  CHECK(online_encoder_param_count(cfg) == expected);

  StrokeSequence a = from_polylines({{{0.1, 0.1}, {0.5, 0.3}, {0.9, 0.8}}});
  StrokeSequence b = from_polylines({{{0.2, 0.7}, {0.8, 0.2}}});
  auto batch = [&](std::size_t t_max) {
    std::vector<PaddedSequence> padded{pad_or_truncate(a, t_max),
                                       pad_or_truncate(b, t_max)};
    return sequence_batch_tensors(padded);
  };

  auto [rows10, mask10] = batch(10);
  HostFeatures out10 = online_encode(store, cfg, rows10, mask10);
  CHECK(out10.features.shape == std::vector<std::size_t>{2, 10, 12});
  CHECK(out10.latent.shape == std::vector<std::size_t>{2, 12});

  // Right padding carries states through, so the final latent is bitwise
  // independent of the padded length.
  auto [rows16, mask16] = batch(16);
  HostFeatures out16 = online_encode(store, cfg, rows16, mask16);
  CHECK(out16.features.shape == std::vector<std::size_t>{2, 16, 12});
  CHECK(out10.latent.data == out16.latent.data);

  Tensor zero_mask = Tensor::zeros({2, 10});
  CHECK_THROWS_WITH_AS(online_encode(store, cfg, rows10, zero_mask),
                       doctest::Contains("EmptyMask"), Error);
  CHECK_THROWS_WITH_AS(online_encode(store, cfg, Tensor({2, 10, 4}), mask10),
                       doctest::Contains("ShapeMismatch"), Error);
}

TEST_CASE("online encoder gradients match finite differences") {
  OnlineEncoderConfig cfg;
  cfg.layers = 2;
  cfg.hidden = 3;
  ParameterStore proto;
  Rng rng(21);
  init_online_encoder(proto, cfg, rng);

  gradcheck::Leaves leaves = proto.tensors;
  Rng data_rng(22);
  leaves["rows"] = gradcheck::random_tensor({2, 4, 5}, data_rng);
  Tensor mask({2, 4}, {1, 1, 1, 0, 1, 1, 0, 0});

  auto build = store_builder([&](Graph& g, Binder& bind,
                                 const gradcheck::Leaves&) {
    EncodedSequence enc =
        online_encode_graph(bind, cfg, bind("rows"), g.constant(mask));
    return g.add(g.mean_all(g.square(enc.latent)),
                 g.mean_all(g.square(enc.features)));
  });
  gradcheck::Report rep = gradcheck::check(build, leaves);
  INFO(rep.worst);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("attention decoder: weights normalize and respect the mask") {
  DecoderConfig cfg;
  cfg.hidden = 5;
  cfg.attn_dim = 3;
  cfg.embed_dim = 4;
  CharVocab vocab = CharVocab::from_alphabet({"a", "b"});  // size 5
  const int feature_dim = 6;
  ParameterStore store;
  Rng rng(31);
  init_attn_decoder(store, cfg, feature_dim, vocab.size(), rng);
  CHECK(store.total_params() ==
        attn_decoder_param_count(cfg, feature_dim, vocab.size()));

  Rng data_rng(32);
  Tensor features = gradcheck::random_tensor({2, 5, 6}, data_rng);
  Tensor mask({2, 5}, {1, 1, 1, 0, 0, 1, 1, 1, 1, 1});
  // "ab" -> 0 1 end, "ba" -> 1 0 end (steps = 3)
  std::vector<int> targets = {0, 1, 3, 1, 0, 3};

  Graph g;
  Binder bind(g, store, false);
  DecodeGraph dec = attentional_decode_teacher_forcing(
      bind, cfg, vocab, g.constant(features), g.constant(mask), targets, 3);
  REQUIRE(dec.logits.size() == 3);
  REQUIRE(dec.attention.size() == 3);
  for (int t = 0; t < 3; ++t) {
    const Tensor& lt = g.value(dec.logits[t]);
    CHECK(lt.shape == std::vector<std::size_t>{2, 5});
    const Tensor& at = g.value(dec.attention[t]);
    CHECK(at.shape == std::vector<std::size_t>{2, 5});
    for (std::size_t i = 0; i < 2; ++i) {
      double sum = 0.0;
      for (std::size_t k = 0; k < 5; ++k) sum += at.at(i, k);
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
    // Sample 0 masks its last two columns; no weight may land there.
    CHECK(at.at(0, 3) < 1e-12);
    CHECK(at.at(0, 4) < 1e-12);
  }

  // A single memory position takes all the weight, exactly.
  Tensor single = gradcheck::random_tensor({1, 1, 6}, data_rng);
  Graph g1;
  Binder bind1(g1, store, false);
  DecodeGraph dec1 = attentional_decode_teacher_forcing(
      bind1, cfg, vocab, g1.constant(single), g1.constant(Tensor::full({1, 1}, 1.0)),
      {3}, 1);
  CHECK(g1.value(dec1.attention[0])[0] == 1.0);

  CHECK_THROWS_WITH_AS(
      attentional_decode_teacher_forcing(bind1, cfg, vocab,
                                         g1.constant(Tensor({0, 2, 6})),
                                         g1.constant(Tensor({0, 2})), {}, 1),
      doctest::Contains("EmptyFeatures"), Error);
  CHECK_THROWS_WITH_AS(
      attentional_decode_teacher_forcing(bind1, cfg, vocab,
                                         g1.constant(single),
                                         g1.constant(Tensor::full({1, 1}, 1.0)),
                                         {3, 3}, 1),
      doctest::Contains("ShapeMismatch"), Error);
}

TEST_CASE("greedy decoding stops at the end marker and caps the length") {
  DecoderConfig cfg;
  cfg.hidden = 5;
  cfg.attn_dim = 3;
  cfg.embed_dim = 4;
  CharVocab vocab = CharVocab::from_alphabet({"a", "b"});
  ParameterStore store;
  Rng rng(41);
  init_attn_decoder(store, cfg, 6, vocab.size(), rng);

  Rng data_rng(42);
  Tensor features = gradcheck::random_tensor({2, 4, 6}, data_rng);
  Tensor mask = Tensor::full({2, 4}, 1.0);

  // A large output bias on <end> forces it to win the first argmax, which
  // must produce the empty string after exactly one step.
  Tensor& bias = store.at("hw.dec.out.b");
  std::fill(bias.data.begin(), bias.data.end(), 0.0);
  bias.data[static_cast<std::size_t>(vocab.end_index())] = 50.0;
  RecognitionOutput stopped =
      attentional_decode_greedy(store, cfg, vocab, features, mask, 6);
  CHECK(stopped.decoded == std::vector<std::string>{"", ""});
  CHECK(stopped.attention.size() == 1);
  CHECK(stopped.attention[0].shape == std::vector<std::size_t>{2, 4});

  // Biasing a character instead never emits <end>, so max_len applies.
  bias.data[static_cast<std::size_t>(vocab.end_index())] = 0.0;
  bias.data[0] = 50.0;  // 'a'
  RecognitionOutput capped =
      attentional_decode_greedy(store, cfg, vocab, features, mask, 4);
  CHECK(capped.decoded == std::vector<std::string>{"aaaa", "aaaa"});
  CHECK(capped.attention.size() == 4);

  CHECK_THROWS_WITH_AS(
      attentional_decode_greedy(store, cfg, vocab, Tensor({2, 0, 6}),
                                Tensor({2, 0}), 4),
      doctest::Contains("EmptyFeatures"), Error);
  CHECK_THROWS_WITH_AS(
      attentional_decode_greedy(store, cfg, vocab, features, mask, 0),
      doctest::Contains("ConfigError"), Error);
}

TEST_CASE("attention decoder gradients match finite differences") {
  DecoderConfig cfg;
  cfg.hidden = 3;
  cfg.attn_dim = 2;
  cfg.embed_dim = 2;
  CharVocab vocab = CharVocab::from_alphabet({"a", "b"});
  const int feature_dim = 4;
  ParameterStore proto;
  Rng rng(51);
  init_attn_decoder(proto, cfg, feature_dim, vocab.size(), rng);

  gradcheck::Leaves leaves = proto.tensors;
  Rng data_rng(52);
  leaves["features"] = gradcheck::random_tensor({2, 3, 4}, data_rng);
  Tensor mask({2, 3}, {1, 1, 0, 1, 1, 1});
  std::vector<int> targets = {0, 3, 1, 3};  // "a", "b" with end markers

  auto build = store_builder([&](Graph& g, Binder& bind,
                                 const gradcheck::Leaves&) {
    DecodeGraph dec = attentional_decode_teacher_forcing(
        bind, cfg, vocab, bind("features"), g.constant(mask), targets, 2);
    Value total = g.sum_all(g.xent_rows(dec.logits[0], {0, 1}));
    total = g.add(total, g.sum_all(g.xent_rows(dec.logits[1], {3, 3})));
    return g.scale(total, 0.25);
  });
  gradcheck::Report rep = gradcheck::check(build, leaves);
  INFO(rep.worst);
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("edit distance matches the recursive definition") {
  CHECK(levenshtein("", "") == 0);
  CHECK(levenshtein("abc", "") == 3);
  CHECK(levenshtein("", "abc") == 3);
  CHECK(levenshtein("kitten", "sitting") == 3);
  CHECK(levenshtein("flaw", "lawn") == 2);
  CHECK(levenshtein("lo", "lo") == 0);
  CHECK(levenshtein("l0", "lo") == 1);
  CHECK(levenshtein("l0", "ll") == 1);

  Rng rng(61);
  const std::string alphabet = "abc";
  for (int trial = 0; trial < 200; ++trial) {
    auto word = [&] {
      std::string s;
      std::size_t len = rng.below(7);
      for (std::size_t i = 0; i < len; ++i)
        s += alphabet[static_cast<std::size_t>(rng.below(3))];
      return s;
    };
    std::string a = word(), b = word();
    INFO(a, " vs ", b);
    CHECK(levenshtein(a, b) == lev_oracle(a, b));
    CHECK(levenshtein(a, b) == levenshtein(b, a));
  }
}

TEST_CASE("lexicon correction picks the closest word, ties lexicographically") {
  CHECK(lexicon_correct("l0", {"lo", "hi"}) == "lo");   // distances 1 vs 2
  CHECK(lexicon_correct("l0", {"lo", "ll"}) == "ll");   // tie at 1; "ll" < "lo"
  CHECK(lexicon_correct("lo", {"lo", "ll"}) == "lo");   // exact match wins
  CHECK(lexicon_correct("zzz", {"a", "b"}) == "a");
  CHECK_THROWS_WITH_AS(lexicon_correct("lo", {}),
                       doctest::Contains("EmptyLexicon"), Error);
}

TEST_CASE("word recognition accuracy with and without a lexicon") {
  CHECK(evaluate_wra({"lo", "ol"}, {"lo", "lo"}) == 0.5);
  CHECK(evaluate_wra({"l0", "loo"}, {"lo", "lo"}, {"lo", "hi"}) == 1.0);
  // Equidistant candidates snap to the lexicographically smallest, which can
  // also correct away from the reference.
  CHECK(evaluate_wra({"ol"}, {"lo"}, {"lo", "hi"}) == 0.0);
  CHECK_THROWS_WITH_AS(evaluate_wra({"a"}, {"a", "b"}),
                       doctest::Contains("LengthMismatch"), Error);
  CHECK_THROWS_WITH_AS(evaluate_wra({}, {}),
                       doctest::Contains("EmptyDataset"), Error);
  CHECK_THROWS_WITH_AS(evaluate_wra({"a"}, {"a"}, {}),
                       doctest::Contains("EmptyLexicon"), Error);

  // When every reference is in the lexicon, snapping predictions onto it can
  // never lose an exact match, so corrected accuracy is at least the raw one.
  // Verified against an independent scan over all candidates.
  Rng rng(71);
  std::vector<std::string> lexicon = {"ace",  "ach", "cat", "eel", "hen",
                                      "lot",  "net", "oat", "sun", "tea",
                                      "toe",  "use", "ah",  "el",  "no",
                                      "on",   "so",  "to",  "us",  "ut"};
  const std::string alphabet = "acehlnostu";
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::string> refs, preds;
    for (int i = 0; i < 8; ++i) {
      refs.push_back(lexicon[static_cast<std::size_t>(rng.below(lexicon.size()))]);
      std::string noisy = refs.back();
      for (char& c : noisy)
        if (rng.uniform() < 0.3)
          c = alphabet[static_cast<std::size_t>(rng.below(alphabet.size()))];
      preds.push_back(noisy);
    }
    double raw = evaluate_wra(preds, refs);
    double corrected = evaluate_wra(preds, refs, lexicon);
    CHECK(corrected >= raw);

    std::size_t hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const std::string* best = nullptr;
      int best_d = 0;
      for (const std::string& cand : lexicon) {
        int d = lev_oracle(preds[i], cand);
        if (!best || d < best_d || (d == best_d && cand < *best)) {
          best = &cand;
          best_d = d;
        }
      }
      if (*best == refs[i]) ++hits;
    }
    CHECK(corrected ==
          doctest::Approx(static_cast<double>(hits) / preds.size()).epsilon(1e-12));
  }
}

TEST_CASE("recognizer overfits ten words from images") {
  std::vector<WordSample> words = word_corpus(10, 7);
  CharVocab vocab = glyph_vocab();
  RecognizerConfig cfg = tiny_recognizer();
  cfg.lr = 5e-3;
  cfg.epochs = 500;
  cfg.seed = 13;

  std::vector<RecognizerEpoch> history;
  Recognizer rec = train_recognizer(words, vocab, cfg, &history);
  REQUIRE(history.size() == 500);
  CHECK(history.back().loss < history.front().loss);

  double acc = teacher_forced_accuracy(rec, words);
  CHECK(acc == 1.0);

  std::vector<std::string> decoded = recognize(rec, words);
  std::vector<std::string> refs;
  for (const WordSample& w : words) refs.push_back(w.text);
  CHECK(evaluate_wra(decoded, refs) >= 0.9);
}

TEST_CASE("recognizer trains on raw stroke sequences") {
  std::vector<WordSample> words = word_corpus(6, 17, 2, 2);
  CharVocab vocab = glyph_vocab();
  RecognizerConfig cfg = tiny_recognizer();
  cfg.encoder = "online";
  cfg.online.layers = 2;
  cfg.online.hidden = 8;
  cfg.t_max = 48;
  cfg.max_text_len = 3;
  cfg.lr = 5e-3;
  cfg.epochs = 60;
  cfg.seed = 19;

  std::vector<RecognizerEpoch> history;
  Recognizer rec = train_recognizer(words, vocab, cfg, &history);
  REQUIRE(history.size() == 60);
  CHECK(history.back().loss < 0.7 * history.front().loss);
  CHECK(history.back().tf_char_accuracy > history.front().tf_char_accuracy);

  std::vector<std::string> decoded = recognize(rec, words);
  CHECK(decoded.size() == words.size());
  for (const std::string& s : decoded)
    for (char c : s) CHECK(vocab.chars.find(c) != std::string::npos);
}

TEST_CASE("encoder warm start copies pretrained image parameters") {
  ModelConfig model = word_model();
  PretrainConfig pre;
  pre.task = "vectorization";
  pre.model = model;
  pre.raster = word_canvas();
  pre.t_max = 24;

  ModelConfig finalized = model;
  finalized.t_max = 24;
  finalized.finalize(word_canvas());
  ParameterStore pre_store;
  Rng rng(77);
  init_image_encoder(pre_store, finalized, 1, rng);
  init_seq_decoder(pre_store, finalized, rng);
  CheckpointMeta meta;
  meta.task = "vectorization";
  meta.config = pretrain_config_json(pre);
  fs::path ckpt = fresh_dir("warm_vect");
  save_checkpoint(ckpt, pre_store, meta);

  std::vector<WordSample> words = word_corpus(4, 23);
  CharVocab vocab = glyph_vocab();
  RecognizerConfig cfg = tiny_recognizer();
  cfg.epochs = 0;  // inspect the initialization itself
  cfg.seed = 99;   // different stream from the checkpoint's
  cfg.init_checkpoint = ckpt.string();

  Recognizer rec = train_recognizer(words, vocab, cfg);
  std::size_t copied = 0;
  for (const auto& [name, tensor] : pre_store.tensors) {
    if (name.rfind("enc.img.", 0) != 0) continue;
    CHECK(rec.store.at(name).data == tensor.data);
    ++copied;
  }
  CHECK(copied > 0);
  CHECK(rec.store.has("hw.dec.embed"));  // decoder stays freshly initialized

  RecognizerConfig cold = cfg;
  cold.init_checkpoint.clear();
  Recognizer fresh = train_recognizer(words, vocab, cold);
  CHECK(fresh.store.at("enc.img.word.c0.w").data !=
        pre_store.at("enc.img.word.c0.w").data);

  // A foreign pretext task cannot seed the image encoder.
  CheckpointMeta raster_meta;
  raster_meta.task = "rasterization";
  raster_meta.config = pretrain_config_json(pre);
  fs::path raster_ckpt = fresh_dir("warm_rast");
  save_checkpoint(raster_ckpt, pre_store, raster_meta);
  RecognizerConfig bad = cfg;
  bad.init_checkpoint = raster_ckpt.string();
  CHECK_THROWS_WITH_AS(train_recognizer(words, vocab, bad),
                       doctest::Contains("ModalityMismatch"), Error);

  // Geometry drift between checkpoint and model is rejected, not truncated.
  RecognizerConfig narrow = cfg;
  narrow.model.image_encoder.blstm_hidden = 4;
  narrow.model.d = 8;
  CHECK_THROWS_WITH_AS(train_recognizer(words, vocab, narrow),
                       doctest::Contains("ShapeMismatch"), Error);

  RecognizerConfig online_warm = cfg;
  online_warm.encoder = "online";
  CHECK_THROWS_WITH_AS(train_recognizer(words, vocab, online_warm),
                       doctest::Contains("ConfigError"), Error);
}

TEST_CASE("recognizer rejects unusable inputs") {
  CharVocab vocab = glyph_vocab();
  RecognizerConfig cfg = tiny_recognizer();
  cfg.epochs = 1;

  CHECK_THROWS_WITH_AS(train_recognizer({}, vocab, cfg),
                       doctest::Contains("EmptyDataset"), Error);

  std::vector<WordSample> words = word_corpus(2, 29);
  WordSample mute = words[0];
  mute.text.clear();
  CHECK_THROWS_WITH_AS(train_recognizer({mute}, vocab, cfg),
                       doctest::Contains("MissingTargets"), Error);

  WordSample foreign = words[0];
  foreign.text = "zz";
  CHECK_THROWS_WITH_AS(train_recognizer({foreign}, vocab, cfg),
                       doctest::Contains("UnknownClassName"), Error);

  RecognizerConfig short_budget = cfg;
  short_budget.max_text_len = 2;  // corpus words have two or three characters
  CHECK_THROWS_WITH_AS(train_recognizer(words, vocab, short_budget),
                       doctest::Contains("SequenceTooLong"), Error);

  RecognizerConfig bad_encoder = cfg;
  bad_encoder.encoder = "offline";
  CHECK_THROWS_WITH_AS(train_recognizer(words, vocab, bad_encoder),
                       doctest::Contains("ConfigError"), Error);
}
