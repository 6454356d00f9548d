#include "sketchssl/downstream_sketch.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "sketchssl/checkpoint.hpp"
#include "sketchssl/error.hpp"
#include "sketchssl/graph.hpp"
#include "sketchssl/losses.hpp"
#include "sketchssl/models.hpp"
#include "sketchssl/params.hpp"
#include "sketchssl/pretrain.hpp"
#include "sketchssl/rng.hpp"

namespace sketchssl {

namespace {

constexpr std::size_t kEncodeChunk = 32;

struct LoadedEncoder {
  ParameterStore store;
  ModelConfig model;
  RasterConfig raster;
  std::string task;
};

LoadedEncoder load_encoder(const std::string& checkpoint_dir) {
  LoadedCheckpoint ck = load_checkpoint(checkpoint_dir);
  PretrainConfig run_cfg = pretrain_config_from_json(ck.meta.config);
  LoadedEncoder enc;
  enc.store = std::move(ck.store);
  enc.model = run_cfg.model;
  enc.model.t_max = run_cfg.t_max;
  enc.raster = run_cfg.raster;
  enc.task = ck.meta.task;
  enc.model.finalize(enc.raster);
  return enc;
}

Tensor chunk_images(const std::vector<const LabeledSample*>& chunk,
                    const RasterConfig& raster) {
  std::size_t n = chunk.size();
  std::size_t c = static_cast<std::size_t>(raster.channels);
  std::size_t h = static_cast<std::size_t>(raster.height);
  std::size_t w = static_cast<std::size_t>(raster.width);
  Tensor images({n, c, h, w});
  for (std::size_t i = 0; i < n; ++i) {
    RasterImage img = render(chunk[i]->vector, raster);
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          images.data[((i * c + k) * h + y) * w + x] =
              img.pixels[(y * w + x) * c + k];
  }
  return images;
}

// depth "final" -> -1, "block<k>" -> k. Anything else is unknown.
int parse_depth(const std::string& depth) {
  if (depth == "final") return -1;
  if (depth.rfind("block", 0) == 0 && depth.size() > 5 &&
      depth.find_first_not_of("0123456789", 5) == std::string::npos)
    return std::stoi(depth.substr(5));
  fail(ErrorCode::UnknownDepth,
       "features: depth must be 'final' or 'block<k>', got '" + depth + "'");
}

/// Encoder forward over the matching modality; shared by the disk-checkpoint
/// path and in-memory fine-tuned stores.
Tensor encode_features(const ParameterStore& store, const ModelConfig& model,
                       const RasterConfig& raster, const std::string& task,
                       const std::vector<LabeledSample>& dataset,
                       int depth_index) {
  Tensor features;
  std::size_t n = dataset.size();
  for (std::size_t begin = 0; begin < n; begin += kEncodeChunk) {
    std::size_t end = std::min(n, begin + kEncodeChunk);
    Graph g;
    Binder bind(g, store, false);
    Tensor chunk_out;
    if (task == "vectorization") {
      std::vector<const LabeledSample*> chunk;
      for (std::size_t i = begin; i < end; ++i) chunk.push_back(&dataset[i]);
      EncodedImage enc =
          image_encode_graph(bind, model, g.constant(chunk_images(chunk, raster)));
      if (depth_index < 0) {
        chunk_out = g.value(enc.latent);
      } else {
        require(depth_index < static_cast<int>(enc.block_outputs.size()),
                ErrorCode::UnknownDepth,
                "features: block index " + std::to_string(depth_index) +
                    " out of range; encoder has " +
                    std::to_string(enc.block_outputs.size()) + " blocks");
        chunk_out = g.value(g.global_max_pool(enc.block_outputs[depth_index]));
      }
    } else {
      require(depth_index < 0, ErrorCode::UnknownDepth,
              "features: vector encoders expose only the 'final' depth");
      std::vector<PaddedSequence> padded;
      for (std::size_t i = begin; i < end; ++i)
        padded.push_back(pad_or_truncate(
            model_coordinate_view(dataset[i].vector, model.coordinate_mode),
            static_cast<std::size_t>(model.t_max)));
      auto [rows, mask] = sequence_batch_tensors(padded);
      Value latent =
          model.seq_encoder.family == "Transformer"
              ? vector_encode_transformer_graph(bind, model, g.constant(rows),
                                                g.constant(mask))
              : vector_encode_rnn_graph(bind, model, g.constant(rows),
                                        g.constant(mask));
      chunk_out = g.value(latent);
    }
    if (features.shape.empty()) {
      features = Tensor({n, chunk_out.shape[1]});
    }
    std::copy(chunk_out.data.begin(), chunk_out.data.end(),
              features.data.begin() +
                  static_cast<std::ptrdiff_t>(begin * chunk_out.shape[1]));
  }
  for (double v : features.data)
    require(std::isfinite(v), ErrorCode::DivergedLoss,
            "features: non-finite activation; encoder parameters are "
            "unusable");
  return features;
}

std::map<int, std::vector<std::size_t>> group_by_label(
    const std::vector<int>& labels, const char* who) {
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0, ErrorCode::ClassMismatch,
            std::string(who) + ": sample " + std::to_string(i) +
                " has no label");
    groups[labels[i]].push_back(i);
  }
  return groups;
}

int class_count(const std::vector<int>& labels, const char* who) {
  int k = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0, ErrorCode::ClassMismatch,
            std::string(who) + ": sample " + std::to_string(i) +
                " has no label");
    k = std::max(k, labels[i] + 1);
  }
  return k;
}

/// True when the row's true class ranks within the top k logits; equal
/// logits rank by ascending class index, so "better" means strictly greater.
bool topk_hit(const double* logits, int classes, int label, int k) {
  int better = 0;
  for (int c = 0; c < classes; ++c) {
    if (logits[c] > logits[label]) ++better;
    if (logits[c] == logits[label] && c < label) ++better;
  }
  return better < k;
}

}  // namespace

FeatureTable extract_features(const std::string& checkpoint_dir,
                              const std::vector<LabeledSample>& dataset,
                              const std::string& depth,
                              const std::string& modality) {
  require(modality == "raster" || modality == "vector", ErrorCode::ConfigError,
          "features: modality must be 'raster' or 'vector', got '" + modality +
              "'");
  require(!dataset.empty(), ErrorCode::EmptyDataset,
          "features: dataset has no samples");
  LoadedEncoder enc = load_encoder(checkpoint_dir);
  const std::string expected = enc.task == "vectorization" ? "raster" : "vector";
  require(modality == expected, ErrorCode::ModalityMismatch,
          "features: a " + enc.task + " checkpoint encodes " + expected +
              " inputs, not " + modality);
  int depth_index = parse_depth(depth);

  FeatureTable table;
  table.depth_tag = depth;
  table.features = encode_features(enc.store, enc.model, enc.raster, enc.task,
                                   dataset, depth_index);
  for (const auto& s : dataset) {
    table.ids.push_back(s.id);
    table.labels.push_back(s.label);
  }
  return table;
}

LinearProbe train_linear_probe(const FeatureTable& table, int epochs,
                               double lr) {
  require(table.size() >= 1, ErrorCode::EmptyDataset,
          "probe: feature table is empty");
  require(epochs >= 1 && lr > 0.0, ErrorCode::ConfigError,
          "probe: epochs must be >= 1 and lr positive");
  int classes = class_count(table.labels, "probe");
  std::size_t d = table.dim();

  // The bias stays at zero: its gradient is invariant under feature
  // duplication, so a trained bias would break the exact equivalence
  // between a duplicated-feature run at half the learning rate and the
  // original run. The weight gradients double under duplication, which the
  // halved rate cancels exactly.
  LinearProbe probe;
  probe.w = Tensor({d, static_cast<std::size_t>(classes)});
  probe.b = Tensor({static_cast<std::size_t>(classes)});
  for (int epoch = 0; epoch < epochs; ++epoch) {
    Graph g;
    Value x = g.constant(table.features);
    Value w = g.param("probe.w", probe.w);
    Value logits = g.matmul(x, w);
    Value loss = classification_loss_graph(g, logits, table.labels);
    g.backward(loss);
    auto grads = g.param_grads();
    const Tensor& gw = grads.at("probe.w");
    for (std::size_t i = 0; i < probe.w.data.size(); ++i)
      probe.w.data[i] -= lr * gw.data[i];
  }
  return probe;
}

std::map<int, double> eval_topk(const LinearProbe& probe,
                                const FeatureTable& table,
                                const std::vector<int>& ks) {
  require(table.size() >= 1, ErrorCode::EmptyDataset,
          "probe eval: feature table is empty");
  int classes = static_cast<int>(probe.classes());
  require(classes >= 1, ErrorCode::ConfigError, "probe eval: untrained probe");
  require(table.dim() == probe.w.shape[0], ErrorCode::ClassMismatch,
          "probe eval: feature dimension " + std::to_string(table.dim()) +
              " does not match probe input " +
              std::to_string(probe.w.shape[0]));
  for (int k : ks)
    require(k >= 1 && k <= classes, ErrorCode::ConfigError,
            "probe eval: k must lie in [1, classes]");

  std::size_t n = table.size(), d = table.dim();
  std::vector<double> logits(static_cast<std::size_t>(classes));
  std::map<int, double> hits;
  for (int k : ks) hits[k] = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    int label = table.labels[i];
    require(label >= 0 && label < classes, ErrorCode::ClassMismatch,
            "probe eval: label " + std::to_string(label) +
                " outside the probe's class universe");
    for (int c = 0; c < classes; ++c) {
      double z = probe.b.data[c];
      for (std::size_t j = 0; j < d; ++j)
        z += table.features.data[i * d + j] * probe.w.data[j * classes + c];
      logits[c] = z;
    }
    for (int k : ks)
      if (topk_hit(logits.data(), classes, label, k)) hits[k] += 1.0;
  }
  for (auto& [k, v] : hits) v /= static_cast<double>(n);
  return hits;
}

RetrievalHead train_retrieval_head(const FeatureTable& table,
                                   const RetrievalHeadConfig& cfg) {
  require(cfg.embed_dim >= 1 && cfg.epochs >= 1 && cfg.lr > 0.0,
          ErrorCode::ConfigError, "retrieval head: invalid config");
  require(cfg.margin >= 0.0, ErrorCode::ConfigError,
          "retrieval head: margin must be non-negative");
  auto groups = group_by_label(table.labels, "retrieval head");
  require(groups.size() >= 2, ErrorCode::InsufficientClassSamples,
          "retrieval head: need at least two classes");
  for (const auto& [label, members] : groups)
    require(members.size() >= 2, ErrorCode::InsufficientClassSamples,
            "retrieval head: class " + std::to_string(label) +
                " has fewer than two samples");
  int classes = class_count(table.labels, "retrieval head");
  std::size_t n = table.size(), d = table.dim();
  std::size_t e = static_cast<std::size_t>(cfg.embed_dim);

  Rng master(cfg.seed);
  Rng init_rng = master.derive(1);
  ParameterStore store;
  store.add("ret.w", glorot_uniform({d, e}, d, e, init_rng));
  store.add("ret.b", Tensor({e}));
  store.add("ret.cls.w", glorot_uniform({e, static_cast<std::size_t>(classes)},
                                        e, classes, init_rng));
  store.add("ret.cls.b", Tensor({static_cast<std::size_t>(classes)}));
  Adam adam(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8, 1.0, true});

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng = master.derive(0x100 + static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> anchors(n);
    std::iota(anchors.begin(), anchors.end(), 0);
    rng.shuffle(anchors);

    Tensor xa({n, d}), xp({n, d}), xn({n, d});
    std::vector<int> anchor_labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t a = anchors[i];
      const auto& same = groups.at(table.labels[a]);
      std::size_t p = a;
      while (p == a) p = same[rng.below(same.size())];
      std::size_t neg = a;
      while (table.labels[neg] == table.labels[a])
        neg = rng.below(n);
      anchor_labels[i] = table.labels[a];
      for (std::size_t j = 0; j < d; ++j) {
        xa.data[i * d + j] = table.features.data[a * d + j];
        xp.data[i * d + j] = table.features.data[p * d + j];
        xn.data[i * d + j] = table.features.data[neg * d + j];
      }
    }

    Graph g;
    Value w = g.param("ret.w", store.at("ret.w"));
    Value b = g.param("ret.b", store.at("ret.b"));
    Value cw = g.param("ret.cls.w", store.at("ret.cls.w"));
    Value cb = g.param("ret.cls.b", store.at("ret.cls.b"));
    Value ea = g.add_rowvec(g.matmul(g.constant(xa), w), b);
    Value ep = g.add_rowvec(g.matmul(g.constant(xp), w), b);
    Value en = g.add_rowvec(g.matmul(g.constant(xn), w), b);
    Value trip = triplet_loss_graph(g, ea, ep, en, cfg.margin);
    Value logits = g.add_rowvec(g.matmul(ea, cw), cb);
    Value cls = classification_loss_graph(g, logits, anchor_labels);
    Value loss = g.add(trip, cls);
    g.backward(loss);
    adam.update(store, g.param_grads());
  }

  RetrievalHead head;
  head.w = store.at("ret.w");
  head.b = store.at("ret.b");
  head.cls_w = store.at("ret.cls.w");
  head.cls_b = store.at("ret.cls.b");
  head.margin = cfg.margin;
  return head;
}

FeatureTable embed_features(const RetrievalHead& head,
                            const FeatureTable& table) {
  require(table.dim() == head.w.shape[0], ErrorCode::ShapeMismatch,
          "embed: feature dim does not match the head projection");
  std::size_t n = table.size(), d = table.dim(), e = head.w.shape[1];
  FeatureTable out;
  out.ids = table.ids;
  out.labels = table.labels;
  out.depth_tag = table.depth_tag;
  out.features = Tensor({n, e});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < e; ++k) {
      double z = head.b.data[k];
      for (std::size_t j = 0; j < d; ++j)
        z += table.features.data[i * d + j] * head.w.data[j * e + k];
      out.features.data[i * e + k] = z;
    }
  return out;
}

RetrievalResult eval_retrieval(const FeatureTable& queries,
                               const FeatureTable& gallery,
                               const std::string& metric) {
  require(metric == "euclidean" || metric == "cosine", ErrorCode::ConfigError,
          "retrieval: metric must be 'euclidean' or 'cosine'");
  require(gallery.size() >= 1, ErrorCode::EmptyGallery,
          "retrieval: gallery is empty");
  require(queries.size() >= 1, ErrorCode::EmptyDataset,
          "retrieval: no queries");
  require(queries.dim() == gallery.dim(), ErrorCode::ShapeMismatch,
          "retrieval: query and gallery dimensions differ");
  class_count(queries.labels, "retrieval queries");
  class_count(gallery.labels, "retrieval gallery");

  std::size_t d = queries.dim();
  RetrievalResult result;
  double acc = 0.0, map10 = 0.0;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    std::vector<std::pair<double, std::size_t>> ranked;
    for (std::size_t gidx = 0; gidx < gallery.size(); ++gidx) {
      if (gallery.ids[gidx] == queries.ids[q]) continue;  // self-exclusion
      double dist = 0.0;
      if (metric == "euclidean") {
        for (std::size_t j = 0; j < d; ++j) {
          double diff = queries.features.data[q * d + j] -
                        gallery.features.data[gidx * d + j];
          dist += diff * diff;
        }
        dist = std::sqrt(dist);
      } else {
        double dot = 0.0, nq = 0.0, ng = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          double a = queries.features.data[q * d + j];
          double b = gallery.features.data[gidx * d + j];
          dot += a * b;
          nq += a * a;
          ng += b * b;
        }
        dist = (nq == 0.0 || ng == 0.0)
                   ? 1.0
                   : 1.0 - dot / (std::sqrt(nq) * std::sqrt(ng));
      }
      ranked.push_back({dist, gidx});
    }
    require(!ranked.empty(), ErrorCode::EmptyGallery,
            "retrieval: self-exclusion left no gallery for query '" +
                queries.ids[q] + "'");
    std::sort(ranked.begin(), ranked.end(),
              [&](const auto& a, const auto& b) {
                if (a.first != b.first) return a.first < b.first;
                return gallery.ids[a.second] < gallery.ids[b.second];
              });

    int query_label = queries.labels[q];
    if (gallery.labels[ranked[0].second] == query_label) acc += 1.0;

    std::size_t horizon = std::min<std::size_t>(10, ranked.size());
    double ap = 0.0;
    int relevant = 0;
    std::vector<std::string> top_ids;
    for (std::size_t r = 0; r < horizon; ++r) {
      top_ids.push_back(gallery.ids[ranked[r].second]);
      if (gallery.labels[ranked[r].second] == query_label) {
        ++relevant;
        ap += static_cast<double>(relevant) / static_cast<double>(r + 1);
      }
    }
    map10 += relevant > 0 ? ap / static_cast<double>(relevant) : 0.0;
    result.rankings.push_back(std::move(top_ids));
  }
  result.acc_at_top1 = acc / static_cast<double>(queries.size());
  result.map_at_top10 = map10 / static_cast<double>(queries.size());
  return result;
}

std::vector<std::size_t> stratified_subsample(
    const std::vector<LabeledSample>& samples, double fraction,
    std::uint64_t seed) {
  require(fraction > 0.0 && fraction <= 1.0, ErrorCode::ConfigError,
          "subsample: fraction must lie in (0, 1]");
  require(!samples.empty(), ErrorCode::EmptyDataset,
          "subsample: no samples");
  std::vector<int> labels;
  for (const auto& s : samples) labels.push_back(s.label);
  auto groups = group_by_label(labels, "subsample");
  require(fraction * static_cast<double>(samples.size()) >=
              static_cast<double>(groups.size()),
          ErrorCode::FractionTooSmall,
          "subsample: fraction * N is below the class count");

  Rng master(seed);
  std::vector<std::size_t> chosen;
  for (auto& [label, members] : groups) {
    Rng rng = master.derive(static_cast<std::uint64_t>(label));
    rng.shuffle(members);
    std::size_t want = std::max<std::size_t>(
        1, static_cast<std::size_t>(
               std::llround(fraction * static_cast<double>(members.size()))));
    want = std::min(want, members.size());
    chosen.insert(chosen.end(), members.begin(), members.begin() + want);
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

FinetuneResult finetune(const std::string& checkpoint_dir,
                        const std::vector<LabeledSample>& train,
                        const std::vector<LabeledSample>& eval,
                        const FinetuneConfig& cfg) {
  require(cfg.epochs >= 1 && cfg.lr > 0.0 && cfg.batch_size >= 1,
          ErrorCode::ConfigError, "finetune: invalid optimizer config");
  require(!eval.empty(), ErrorCode::EmptyDataset,
          "finetune: evaluation set is empty");
  LoadedEncoder enc = load_encoder(checkpoint_dir);
  require(enc.task == "vectorization", ErrorCode::ModalityMismatch,
          "finetune: drives the image encoder; needs a vectorization "
          "checkpoint");

  std::vector<std::size_t> chosen =
      stratified_subsample(train, cfg.fraction, cfg.seed);
  std::vector<LabeledSample> labeled;
  for (std::size_t idx : chosen) labeled.push_back(train[idx]);

  FinetuneResult result;
  result.labeled_used = labeled.size();
  for (const auto& s : labeled)
    result.per_class_counts[s.label] += 1;

  std::vector<int> labeled_labels, eval_labels;
  for (const auto& s : labeled) labeled_labels.push_back(s.label);
  for (const auto& s : eval) eval_labels.push_back(s.label);
  int classes = std::max(class_count(labeled_labels, "finetune"),
                         class_count(eval_labels, "finetune eval"));
  const int blocks = enc.model.image_encoder.blocks;
  const bool all_frozen = cfg.freeze_depth >= blocks;

  if (all_frozen) {
    // Exactly the frozen-feature probe path.
    FeatureTable train_table;
    train_table.features = encode_features(enc.store, enc.model, enc.raster,
                                           enc.task, labeled, -1);
    for (const auto& s : labeled) {
      train_table.ids.push_back(s.id);
      train_table.labels.push_back(s.label);
    }
    train_table.depth_tag = "final";
    LinearProbe probe =
        train_linear_probe(train_table, cfg.probe_epochs, cfg.probe_lr);

    FeatureTable eval_table;
    eval_table.features =
        encode_features(enc.store, enc.model, enc.raster, enc.task, eval, -1);
    for (const auto& s : eval) {
      eval_table.ids.push_back(s.id);
      eval_table.labels.push_back(s.label);
    }
    eval_table.depth_tag = "final";
    auto accs = eval_topk(probe, eval_table,
                          {1, std::min(5, static_cast<int>(probe.classes()))});
    result.top1 = accs.at(1);
    result.top5 = accs.at(std::min(5, static_cast<int>(probe.classes())));
    return result;
  }

  // Joint training of the unfrozen encoder tail plus a linear head.
  ParameterStore store = enc.store;
  std::size_t latent_dim = 0;
  {
    std::vector<LabeledSample> one = {labeled.front()};
    latent_dim =
        encode_features(store, enc.model, enc.raster, enc.task, one, -1)
            .shape[1];
  }
  store.add("ft.head.w",
            Tensor({latent_dim, static_cast<std::size_t>(classes)}));
  store.add("ft.head.b", Tensor({static_cast<std::size_t>(classes)}));
  Adam adam(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8, 1.0, true});

  std::vector<std::string> frozen_prefixes;
  for (int i = 0; i <= cfg.freeze_depth && i < blocks; ++i)
    frozen_prefixes.push_back("enc.img.s" + std::to_string(i) + ".");
  if (enc.model.image_encoder.family == "word-conv-blstm")
    for (int i = 0; i <= cfg.freeze_depth && i < blocks; ++i)
      frozen_prefixes.push_back("enc.img.word.c" + std::to_string(i) + ".");

  Rng master(cfg.seed);
  std::size_t n = labeled.size();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng order_rng = master.derive(0x200 + static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    order_rng.shuffle(order);
    for (std::size_t begin = 0; begin < n;
         begin += static_cast<std::size_t>(cfg.batch_size)) {
      std::size_t end =
          std::min(n, begin + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const LabeledSample*> chunk;
      std::vector<int> batch_labels;
      for (std::size_t i = begin; i < end; ++i) {
        chunk.push_back(&labeled[order[i]]);
        batch_labels.push_back(labeled[order[i]].label);
      }
      Graph g;
      Binder bind(g, store, true);
      EncodedImage encoded = image_encode_graph(
          bind, enc.model, g.constant(chunk_images(chunk, enc.raster)));
      Value logits = g.add_rowvec(
          g.matmul(encoded.latent, bind("ft.head.w")), bind("ft.head.b"));
      Value loss = classification_loss_graph(g, logits, batch_labels);
      g.backward(loss);
      require(std::isfinite(g.value(loss).data[0]), ErrorCode::DivergedLoss,
              "finetune: loss became non-finite");
      auto grads = g.param_grads();
      for (const auto& prefix : frozen_prefixes)
        for (auto it = grads.begin(); it != grads.end();)
          it = it->first.rfind(prefix, 0) == 0 ? grads.erase(it) : ++it;
      adam.update(store, std::move(grads));
    }
  }

  FeatureTable eval_table;
  eval_table.features =
      encode_features(store, enc.model, enc.raster, enc.task, eval, -1);
  for (const auto& s : eval) {
    eval_table.ids.push_back(s.id);
    eval_table.labels.push_back(s.label);
  }
  eval_table.depth_tag = "final";
  LinearProbe head;
  head.w = store.at("ft.head.w");
  head.b = store.at("ft.head.b");
  auto accs =
      eval_topk(head, eval_table, {1, std::min(5, classes)});
  result.top1 = accs.at(1);
  result.top5 = accs.at(std::min(5, classes));
  return result;
}

}  // namespace sketchssl
