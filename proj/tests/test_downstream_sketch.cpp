#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "sketchssl/checkpoint.hpp"
#include "sketchssl/data.hpp"
#include "sketchssl/downstream_sketch.hpp"
#include "sketchssl/error.hpp"
#include "sketchssl/models.hpp"
#include "sketchssl/pretrain.hpp"
#include "sketchssl/rng.hpp"

using namespace sketchssl;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
  fs::path dir = fs::temp_directory_path() / ("sketchssl_ds_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

PretrainConfig tiny_config(const std::string& task) {
  PretrainConfig cfg;
  cfg.task = task;
  cfg.raster.height = 16;
  cfg.raster.width = 16;
  cfg.model.image_encoder.blocks = 2;
  cfg.model.image_encoder.widths = {8, 8};
  cfg.model.d = 8;
  cfg.model.seq_decoder.hidden = 8;
  cfg.model.seq_encoder.hidden = 8;
  cfg.model.conv_decoder.start_resolution = 4;
  cfg.model.conv_decoder.upsample_stages = 2;
  cfg.model.conv_decoder.widths = {8, 8, 8};
  cfg.t_max = 24;
  return cfg;
}

std::vector<LabeledSample> tiny_corpus() {
  SyntheticSketchSpec spec;
  spec.classes = {"square", "cross"};
  spec.per_class = 5;
  spec.seed = 42;
  return make_synthetic_sketches(spec).first;
}

/// One short real pretraining run per task, shared across cases.
const std::string& trained_checkpoint(const std::string& task) {
  static std::map<std::string, std::string> cache;
  auto it = cache.find(task);
  if (it != cache.end()) return it->second;
  PretrainConfig cfg = tiny_config(task);
  cfg.lr = task == "vectorization" ? 0.01 : 0.005;
  cfg.batch_size = 10;
  cfg.epochs = 2;
  cfg.seed = 9;
  cfg.out_dir = fresh_dir("trained_" + task).string();
  PretrainResult res = pretrain(tiny_corpus(), cfg);
  return cache[task] = res.checkpoint_dir;
}

/// Saves an untrained encoder checkpoint: random init, zero optimizer state.
std::string random_checkpoint(const std::string& tag, PretrainConfig cfg,
                              std::uint64_t seed) {
  ModelConfig model = cfg.model;
  model.t_max = cfg.t_max;
  model.finalize(cfg.raster);
  ParameterStore store;
  Rng rng(seed);
  init_image_encoder(store, model, cfg.raster.channels, rng);
  init_seq_decoder(store, model, rng);
  CheckpointMeta meta;
  meta.task = "vectorization";
  meta.config = pretrain_config_json(cfg);
  fs::path dir = fresh_dir(tag);
  save_checkpoint(dir, store, meta);
  return dir.string();
}

FeatureTable make_table(const std::vector<double>& flat, std::size_t n,
                        std::size_t d, const std::vector<int>& labels,
                        const std::string& prefix) {
  FeatureTable t;
  t.features = Tensor({n, d}, flat);
  t.labels = labels;
  for (std::size_t i = 0; i < n; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%02zu", prefix.c_str(), i);
    t.ids.push_back(buf);
  }
  t.depth_tag = "final";
  return t;
}

double euclid(const FeatureTable& a, std::size_t i, const FeatureTable& b,
              std::size_t j) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.dim(); ++k) {
    double diff = a.features.data[i * a.dim() + k] -
                  b.features.data[j * b.dim() + k];
    s += diff * diff;
  }
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("feature extraction: shapes, depths, determinism") {
  const std::string& ckpt = trained_checkpoint("vectorization");
  std::vector<LabeledSample> data = tiny_corpus();

  FeatureTable final_t = extract_features(ckpt, data, "final", "raster");
  CHECK(final_t.size() == data.size());
  CHECK(final_t.dim() == 8);
  CHECK(final_t.depth_tag == "final");
  CHECK(final_t.ids[0] == data[0].id);
  CHECK(final_t.labels[3] == data[3].label);

  FeatureTable b0 = extract_features(ckpt, data, "block0", "raster");
  FeatureTable b1 = extract_features(ckpt, data, "block1", "raster");
  CHECK(b0.dim() == 8);
  CHECK(b1.dim() == 8);
  CHECK(b0.features.data != b1.features.data);

  FeatureTable again = extract_features(ckpt, data, "final", "raster");
  CHECK(again.features.data == final_t.features.data);

  CHECK_THROWS_WITH_AS(extract_features(ckpt, data, "block2", "raster"),
                       doctest::Contains("UnknownDepth"), Error);
  CHECK_THROWS_WITH_AS(extract_features(ckpt, data, "pool1", "raster"),
                       doctest::Contains("UnknownDepth"), Error);
  CHECK_THROWS_WITH_AS(extract_features(ckpt, data, "final", "vector"),
                       doctest::Contains("ModalityMismatch"), Error);
  CHECK_THROWS_WITH_AS(extract_features(ckpt, {}, "final", "raster"),
                       doctest::Contains("EmptyDataset"), Error);
}

TEST_CASE("feature extraction: wide latent and the vector side") {
  PretrainConfig wide = tiny_config("vectorization");
  wide.model.image_encoder.widths = {16, 128};
  wide.model.d = 128;
  std::string ckpt = random_checkpoint("wide", wide, 5);
  std::vector<LabeledSample> corpus = tiny_corpus();
  std::vector<LabeledSample> data(corpus.begin(), corpus.begin() + 3);
  FeatureTable t = extract_features(ckpt, data, "final", "raster");
  CHECK(t.features.shape == std::vector<std::size_t>{3, 128});

  const std::string& ras = trained_checkpoint("rasterization");
  FeatureTable tv = extract_features(ras, data, "final", "vector");
  CHECK(tv.dim() == 8);
  CHECK_THROWS_WITH_AS(extract_features(ras, data, "final", "raster"),
                       doctest::Contains("ModalityMismatch"), Error);
  CHECK_THROWS_WITH_AS(extract_features(ras, data, "block0", "vector"),
                       doctest::Contains("UnknownDepth"), Error);
}

TEST_CASE("linear probe: separable case, exhaustive k, class checks") {
  std::vector<double> flat;
  std::vector<int> labels;
  for (int i = 0; i < 20; ++i) {
    flat.push_back(-1.0 - 0.01 * i);
    labels.push_back(0);
    flat.push_back(1.0 + 0.01 * i);
    labels.push_back(1);
  }
  FeatureTable table = make_table(flat, 40, 1, labels, "s");
  LinearProbe probe = train_linear_probe(table);
  CHECK(probe.classes() == 2);
  auto acc = eval_topk(probe, table, {1, 2});
  CHECK(acc.at(1) == 1.0);
  CHECK(acc.at(2) == 1.0);

  Rng rng(3);
  std::vector<double> rnd;
  std::vector<int> rlabels;
  for (int i = 0; i < 30; ++i) {
    for (int j = 0; j < 4; ++j) rnd.push_back(rng.normal());
    rlabels.push_back(i % 3);
  }
  FeatureTable rtable = make_table(rnd, 30, 4, rlabels, "r");
  LinearProbe rprobe = train_linear_probe(rtable, 20, 1e-2);
  CHECK(eval_topk(rprobe, rtable, {3}).at(3) == 1.0);

  FeatureTable bad = rtable;
  bad.labels[0] = 7;
  CHECK_THROWS_WITH_AS(eval_topk(rprobe, bad, {1}),
                       doctest::Contains("ClassMismatch"), Error);
  CHECK_THROWS_WITH_AS(eval_topk(rprobe, table, {1}),
                       doctest::Contains("ClassMismatch"), Error);
  CHECK_THROWS_WITH_AS(eval_topk(rprobe, rtable, {4}),
                       doctest::Contains("ConfigError"), Error);
  FeatureTable unlabeled = rtable;
  unlabeled.labels[5] = -1;
  CHECK_THROWS_WITH_AS(train_linear_probe(unlabeled),
                       doctest::Contains("ClassMismatch"), Error);
}

TEST_CASE("linear probe: duplicated features with halved lr trace the same "
          "trajectory") {
  Rng rng(11);
  const std::size_t n = 60, d = 6;
  std::vector<double> flat;
  std::vector<int> labels;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) flat.push_back(rng.normal());
    labels.push_back(static_cast<int>(i % 3));
  }
  std::vector<double> dup;
  for (std::size_t i = 0; i < n; ++i) {
    for (int rep = 0; rep < 2; ++rep)
      for (std::size_t j = 0; j < d; ++j) dup.push_back(flat[i * d + j]);
  }
  FeatureTable base = make_table(flat, n, d, labels, "b");
  FeatureTable twice = make_table(dup, n, 2 * d, labels, "t");

  LinearProbe p1 = train_linear_probe(base, 40, 1e-2);
  LinearProbe p2 = train_linear_probe(twice, 40, 5e-3);

  auto a1 = eval_topk(p1, base, {1, 2});
  auto a2 = eval_topk(p2, twice, {1, 2});
  CHECK(a1.at(1) == a2.at(1));
  CHECK(a1.at(2) == a2.at(2));

  // Both halves of the duplicated weight matrix march in lockstep at half
  // the step size, so their sum reproduces the original weights.
  double max_diff = 0.0;
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t c = 0; c < 3; ++c) {
      double merged =
          p2.w.data[j * 3 + c] + p2.w.data[(d + j) * 3 + c];
      max_diff = std::max(max_diff, std::abs(merged - p1.w.data[j * 3 + c]));
    }
  CHECK(max_diff < 1e-12);
}

TEST_CASE("linear probe: untrained encoder features score near chance") {
  PretrainConfig cfg = tiny_config("vectorization");
  SyntheticSketchSpec spec;
  spec.classes = {"circle", "square", "triangle", "star", "zigzag"};
  spec.per_class = 100;
  spec.jitter = 0.05;
  spec.seed = 11;
  auto [samples, split] = make_synthetic_sketches(spec);
  std::set<std::string> tr(split.train.begin(), split.train.end());
  std::set<std::string> te(split.test.begin(), split.test.end());
  std::vector<LabeledSample> train, test;
  for (const auto& s : samples) {
    if (tr.count(s.id)) train.push_back(s);
    if (te.count(s.id)) test.push_back(s);
  }

  double mean_top1 = 0.0;
  for (std::uint64_t seed : {1, 2, 3}) {
    std::string ckpt =
        random_checkpoint("chance_" + std::to_string(seed), cfg, seed);
    FeatureTable ftr = extract_features(ckpt, train, "final", "raster");
    FeatureTable fte = extract_features(ckpt, test, "final", "raster");
    LinearProbe probe = train_linear_probe(ftr);
    mean_top1 += eval_topk(probe, fte, {1}).at(1);
  }
  mean_top1 /= 3.0;
  // 5 classes: chance is 0.20; random features must stay within 15 points.
  CHECK(mean_top1 > 0.05);
  CHECK(mean_top1 < 0.35);
}

TEST_CASE("retrieval head: embedding dim, training effect, degenerate data") {
  Rng rng(4);
  const int per_class = 8;
  std::vector<double> flat;
  std::vector<int> labels;
  double centers[3][2] = {{0, 0}, {10, 0}, {0, 10}};
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < per_class; ++i) {
      flat.push_back(centers[c][0] + 0.1 * rng.normal());
      flat.push_back(centers[c][1] + 0.1 * rng.normal());
      labels.push_back(c);
    }
  FeatureTable table = make_table(flat, 24, 2, labels, "e");

  RetrievalHeadConfig cfg;
  cfg.seed = 7;
  RetrievalHead head = train_retrieval_head(table, cfg);
  CHECK(head.w.shape == std::vector<std::size_t>{2, 256});
  FeatureTable emb = embed_features(head, table);
  CHECK(emb.features.shape == std::vector<std::size_t>{24, 256});
  CHECK(emb.ids == table.ids);

  double intra = 0.0, inter = 0.0;
  int n_intra = 0, n_inter = 0;
  for (std::size_t i = 0; i < emb.size(); ++i)
    for (std::size_t j = i + 1; j < emb.size(); ++j) {
      double dist = euclid(emb, i, emb, j);
      if (emb.labels[i] == emb.labels[j]) {
        intra += dist;
        ++n_intra;
      } else {
        inter += dist;
        ++n_inter;
      }
    }
  CHECK(intra / n_intra < inter / n_inter);

  FeatureTable singles = make_table({0.0, 1.0, 2.0}, 3, 1, {0, 1, 2}, "s");
  CHECK_THROWS_WITH_AS(train_retrieval_head(singles, cfg),
                       doctest::Contains("InsufficientClassSamples"), Error);
  FeatureTable one_class = make_table({0.0, 1.0}, 2, 1, {0, 0}, "o");
  CHECK_THROWS_WITH_AS(train_retrieval_head(one_class, cfg),
                       doctest::Contains("InsufficientClassSamples"), Error);
  FeatureTable narrow = make_table({0.0}, 1, 1, {0}, "n");
  CHECK_THROWS_WITH_AS(embed_features(head, narrow),
                       doctest::Contains("ShapeMismatch"), Error);
}

TEST_CASE("retrieval metrics: hand-computed average precision") {
  FeatureTable query = make_table({0.0}, 1, 1, {0}, "q");
  // Ranks 1..10 at increasing distance with labels A,B,A,B,B,...
  std::vector<double> gflat;
  std::vector<int> glabels;
  for (int i = 0; i < 10; ++i) {
    gflat.push_back(1.0 + i);
    glabels.push_back(i == 0 || i == 2 ? 0 : 1);
  }
  FeatureTable gallery = make_table(gflat, 10, 1, glabels, "g");

  RetrievalResult res = eval_retrieval(query, gallery);
  CHECK(res.acc_at_top1 == 1.0);
  CHECK(res.map_at_top10 == doctest::Approx((1.0 + 2.0 / 3.0) / 2.0)
                                .epsilon(1e-12));
  REQUIRE(res.rankings.size() == 1);
  REQUIRE(res.rankings[0].size() == 10);
  CHECK(res.rankings[0][0] == "g00");
  CHECK(res.rankings[0][9] == "g09");

  FeatureTable all_rel = gallery;
  std::fill(all_rel.labels.begin(), all_rel.labels.end(), 0);
  RetrievalResult rel = eval_retrieval(query, all_rel);
  CHECK(rel.acc_at_top1 == 1.0);
  CHECK(rel.map_at_top10 == 1.0);

  FeatureTable none_rel = gallery;
  std::fill(none_rel.labels.begin(), none_rel.labels.end(), 1);
  RetrievalResult none = eval_retrieval(query, none_rel);
  CHECK(none.acc_at_top1 == 0.0);
  CHECK(none.map_at_top10 == 0.0);
}

TEST_CASE("retrieval metrics: self-exclusion, ties, empty gallery") {
  FeatureTable query = make_table({0.0}, 1, 1, {0}, "q");
  FeatureTable gallery = make_table({1.0, 2.0, 3.0}, 3, 1, {0, 1, 0}, "g");
  RetrievalResult base = eval_retrieval(query, gallery);

  FeatureTable with_self = gallery;
  with_self.ids.push_back("q00");
  with_self.labels.push_back(0);
  with_self.features = Tensor({4, 1}, {1.0, 2.0, 3.0, 0.0});
  RetrievalResult shadowed = eval_retrieval(query, with_self);
  CHECK(shadowed.acc_at_top1 == base.acc_at_top1);
  CHECK(shadowed.map_at_top10 == base.map_at_top10);
  CHECK(shadowed.rankings == base.rankings);

  FeatureTable tied;
  tied.features = Tensor({2, 1}, {1.0, -1.0});
  tied.ids = {"b", "a"};
  tied.labels = {0, 1};
  RetrievalResult tie_res = eval_retrieval(query, tied);
  CHECK(tie_res.rankings[0][0] == "a");
  CHECK(tie_res.acc_at_top1 == 0.0);
  std::swap(tied.labels[0], tied.labels[1]);
  CHECK(eval_retrieval(query, tied).acc_at_top1 == 1.0);

  FeatureTable empty;
  CHECK_THROWS_WITH_AS(eval_retrieval(query, empty),
                       doctest::Contains("EmptyGallery"), Error);
  FeatureTable only_self = make_table({5.0}, 1, 1, {0}, "q");
  CHECK_THROWS_WITH_AS(eval_retrieval(query, only_self),
                       doctest::Contains("EmptyGallery"), Error);
  CHECK_THROWS_WITH_AS(eval_retrieval(query, gallery, "manhattan"),
                       doctest::Contains("ConfigError"), Error);
}

TEST_CASE("retrieval metrics: brute-force oracle agreement") {
  for (int variant = 0; variant < 60; ++variant) {
    const std::string metric = variant < 50 ? "euclidean" : "cosine";
    Rng rng(1000 + static_cast<std::uint64_t>(variant));
    std::size_t n_gallery = 2 + rng.below(19);
    std::size_t n_query = 1 + rng.below(8);
    std::size_t d = 1 + rng.below(4);
    int classes = 2 + static_cast<int>(rng.below(3));

    std::vector<double> gflat;
    std::vector<int> glabels;
    for (std::size_t i = 0; i < n_gallery; ++i) {
      if (i > 0 && rng.uniform() < 0.3) {
        // Duplicate an earlier row so distance ties actually occur.
        std::size_t src = rng.below(i);
        for (std::size_t j = 0; j < d; ++j)
          gflat.push_back(gflat[src * d + j]);
      } else {
        for (std::size_t j = 0; j < d; ++j) gflat.push_back(rng.normal());
      }
      glabels.push_back(static_cast<int>(rng.below(classes)));
    }
    FeatureTable gallery = make_table(gflat, n_gallery, d, glabels, "g");

    std::vector<double> qflat;
    std::vector<int> qlabels;
    FeatureTable queries;
    for (std::size_t i = 0; i < n_query; ++i) {
      char buf[16];
      if (rng.uniform() < 0.25) {
        // Borrow a gallery identity to exercise self-exclusion.
        std::size_t src = rng.below(n_gallery);
        queries.ids.push_back(gallery.ids[src]);
        for (std::size_t j = 0; j < d; ++j)
          qflat.push_back(gflat[src * d + j]);
        qlabels.push_back(glabels[src]);
      } else {
        std::snprintf(buf, sizeof buf, "q%02zu", i);
        queries.ids.push_back(buf);
        for (std::size_t j = 0; j < d; ++j) qflat.push_back(rng.normal());
        qlabels.push_back(static_cast<int>(rng.below(classes)));
      }
    }
    queries.features = Tensor({n_query, d}, qflat);
    queries.labels = qlabels;

    bool excluded_everything = false;
    for (std::size_t q = 0; q < n_query && !excluded_everything; ++q) {
      std::size_t left = 0;
      for (std::size_t i = 0; i < n_gallery; ++i)
        if (gallery.ids[i] != queries.ids[q]) ++left;
      excluded_everything = left == 0;
    }
    if (excluded_everything) continue;

    RetrievalResult res = eval_retrieval(queries, gallery, metric);

    double oracle_acc = 0.0, oracle_map = 0.0;
    for (std::size_t q = 0; q < n_query; ++q) {
      struct Row {
        double dist;
        std::string id;
        int label;
      };
      std::vector<Row> rows;
      for (std::size_t i = 0; i < n_gallery; ++i) {
        if (gallery.ids[i] == queries.ids[q]) continue;
        double dist = 0.0;
        if (metric == "euclidean") {
          for (std::size_t j = 0; j < d; ++j) {
            double diff = qflat[q * d + j] - gflat[i * d + j];
            dist += diff * diff;
          }
          dist = std::sqrt(dist);
        } else {
          double dot = 0, nq = 0, ng = 0;
          for (std::size_t j = 0; j < d; ++j) {
            dot += qflat[q * d + j] * gflat[i * d + j];
            nq += qflat[q * d + j] * qflat[q * d + j];
            ng += gflat[i * d + j] * gflat[i * d + j];
          }
          // Same association as the library so exact tie clusters match.
          dist = (nq == 0 || ng == 0)
                     ? 1.0
                     : 1.0 - dot / (std::sqrt(nq) * std::sqrt(ng));
        }
        rows.push_back({dist, gallery.ids[i], glabels[i]});
      }
      std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
        return a.dist != b.dist ? a.dist < b.dist : a.id < b.id;
      });
      if (rows[0].label == qlabels[q]) oracle_acc += 1.0;
      std::size_t horizon = std::min<std::size_t>(10, rows.size());
      double precision_sum = 0.0;
      int hits = 0;
      for (std::size_t r = 0; r < horizon; ++r) {
        CHECK(res.rankings[q][r] == rows[r].id);
        if (rows[r].label == qlabels[q]) {
          ++hits;
          precision_sum += static_cast<double>(hits) / (r + 1);
        }
      }
      oracle_map += hits > 0 ? precision_sum / hits : 0.0;
    }
    oracle_acc /= static_cast<double>(n_query);
    oracle_map /= static_cast<double>(n_query);
    CHECK(std::abs(res.acc_at_top1 - oracle_acc) < 1e-12);
    CHECK(std::abs(res.map_at_top10 - oracle_map) < 1e-12);
  }
}

TEST_CASE("stratified subsampling arithmetic") {
  std::vector<LabeledSample> samples;
  for (int c = 0; c < 5; ++c)
    for (int i = 0; i < 100; ++i) {
      LabeledSample s;
      s.id = "x";
      s.label = c;
      samples.push_back(s);
    }

  std::vector<std::size_t> idx = stratified_subsample(samples, 0.1, 3);
  CHECK(idx.size() == 50);
  std::map<int, int> counts;
  for (std::size_t i : idx) counts[samples[i].label] += 1;
  for (int c = 0; c < 5; ++c) CHECK(counts[c] == 10);
  CHECK(std::is_sorted(idx.begin(), idx.end()));
  CHECK(stratified_subsample(samples, 0.1, 3) == idx);

  std::vector<std::size_t> all = stratified_subsample(samples, 1.0, 3);
  CHECK(all.size() == samples.size());

  CHECK_THROWS_WITH_AS(stratified_subsample(samples, 0.002, 3),
                       doctest::Contains("FractionTooSmall"), Error);
  CHECK_THROWS_WITH_AS(stratified_subsample(samples, 0.0, 3),
                       doctest::Contains("ConfigError"), Error);
  CHECK_THROWS_WITH_AS(stratified_subsample(samples, 1.5, 3),
                       doctest::Contains("ConfigError"), Error);

  // Minority classes keep at least one sample.
  std::vector<LabeledSample> skewed;
  for (int i = 0; i < 50; ++i) {
    LabeledSample s;
    s.label = 0;
    skewed.push_back(s);
  }
  for (int i = 0; i < 3; ++i) {
    LabeledSample s;
    s.label = 1;
    skewed.push_back(s);
  }
  std::vector<std::size_t> sk = stratified_subsample(skewed, 0.1, 1);
  std::map<int, int> sk_counts;
  for (std::size_t i : sk) sk_counts[skewed[i].label] += 1;
  CHECK(sk_counts[0] == 5);
  CHECK(sk_counts[1] == 1);
}

TEST_CASE("finetune: frozen-everything path equals the probe path") {
  const std::string& ckpt = trained_checkpoint("vectorization");
  std::vector<LabeledSample> data = tiny_corpus();

  FinetuneConfig cfg;
  cfg.fraction = 1.0;
  cfg.freeze_depth = 2;  // both conv stages: nothing left to train
  cfg.seed = 21;
  FinetuneResult frozen = finetune(ckpt, data, data, cfg);

  std::vector<std::size_t> idx = stratified_subsample(data, 1.0, 21);
  std::vector<LabeledSample> labeled;
  for (std::size_t i : idx) labeled.push_back(data[i]);
  FeatureTable ftr = extract_features(ckpt, labeled, "final", "raster");
  FeatureTable fte = extract_features(ckpt, data, "final", "raster");
  LinearProbe probe = train_linear_probe(ftr, cfg.probe_epochs, cfg.probe_lr);
  auto acc = eval_topk(probe, fte, {1, 2});
  CHECK(frozen.top1 == acc.at(1));
  CHECK(frozen.top5 == acc.at(2));
  CHECK(frozen.labeled_used == data.size());
  CHECK(frozen.per_class_counts.at(0) == 5);
  CHECK(frozen.per_class_counts.at(1) == 5);
}

TEST_CASE("finetune: joint training path and error contracts") {
  const std::string& ckpt = trained_checkpoint("vectorization");
  std::vector<LabeledSample> data = tiny_corpus();

  FinetuneConfig cfg;
  cfg.fraction = 0.6;
  cfg.freeze_depth = 0;  // stage 0 frozen, stage 1 + head trained
  cfg.epochs = 3;
  cfg.lr = 1e-3;
  cfg.batch_size = 4;
  cfg.seed = 2;
  FinetuneResult res = finetune(ckpt, data, data, cfg);
  CHECK(res.top1 >= 0.0);
  CHECK(res.top1 <= 1.0);
  CHECK(res.top5 >= res.top1);
  CHECK(res.labeled_used == 6);
  std::size_t counted = 0;
  for (const auto& [label, c] : res.per_class_counts) counted += c;
  CHECK(counted == res.labeled_used);

  const std::string& ras = trained_checkpoint("rasterization");
  CHECK_THROWS_WITH_AS(finetune(ras, data, data, cfg),
                       doctest::Contains("ModalityMismatch"), Error);

  FinetuneConfig tiny_frac = cfg;
  tiny_frac.fraction = 0.05;  // 0.05 * 10 = 0.5 < 2 classes
  CHECK_THROWS_WITH_AS(finetune(ckpt, data, data, tiny_frac),
                       doctest::Contains("FractionTooSmall"), Error);
}
