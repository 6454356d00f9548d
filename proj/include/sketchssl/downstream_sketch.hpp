#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sketchssl/data.hpp"
#include "sketchssl/tensor.hpp"

namespace sketchssl {

struct FeatureTable {
  std::vector<std::string> ids;
  Tensor features;          // [N, d]
  std::vector<int> labels;  // class indices; -1 where unlabeled
  std::string depth_tag;    // "final" or "block<k>"

  std::size_t size() const { return ids.size(); }
  std::size_t dim() const { return features.shape.empty() ? 0 : features.shape[1]; }
};

/// Runs the checkpoint's encoder in inference mode over the dataset.
/// depth "final" yields the model latent; "block<k>" yields the k-th conv
/// stage output, globally max-pooled over space. modality names the input
/// view the caller intends to feed ("raster" or "vector") and must agree
/// with the checkpoint task: vectorization encodes rasters, rasterization
/// encodes vectors. Vector encoders have no spatial stages, so only "final"
/// is a valid depth for them.
FeatureTable extract_features(const std::string& checkpoint_dir,
                              const std::vector<LabeledSample>& dataset,
                              const std::string& depth,
                              const std::string& modality);

// ------------------------------------------------------------ linear probe

struct LinearProbe {
  Tensor w;  // [d, K]
  Tensor b;  // [K]
  std::size_t classes() const { return b.shape.empty() ? 0 : b.shape[0]; }
};

/// Zero-initialized softmax classifier trained with full-batch plain
/// gradient descent. Zero init + full batch makes the trajectory exactly
/// reproducible and optimizer-state-free. The bias is left at zero during
/// training (a trained bias would receive a duplication-invariant gradient,
/// breaking the exact duplicated-features/halved-lr equivalence); eval_topk
/// still applies it, so hand-built probes may set it.
LinearProbe train_linear_probe(const FeatureTable& table, int epochs = 100,
                               double lr = 1e-2);

/// Top-k accuracy for each k. A hit means the true class is among the k
/// highest logits; equal logits rank by ascending class index.
std::map<int, double> eval_topk(const LinearProbe& probe,
                                const FeatureTable& table,
                                const std::vector<int>& ks);

// --------------------------------------------------------- retrieval head

struct RetrievalHeadConfig {
  int embed_dim = 256;
  double margin = 0.2;
  int epochs = 50;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

struct RetrievalHead {
  Tensor w;      // [d, e] affine projection into the embedding space
  Tensor b;      // [e]
  Tensor cls_w;  // [e, K] auxiliary classifier head
  Tensor cls_b;  // [K]
  double margin = 0.2;
};

/// Joint triplet + classification training of the embedding projection.
/// Every epoch each sample anchors one triplet (positive from its class,
/// negative from another), sampled by the seeded rng.
RetrievalHead train_retrieval_head(const FeatureTable& table,
                                   const RetrievalHeadConfig& cfg);

/// Projects a feature table into the embedding space (ids/labels carried).
FeatureTable embed_features(const RetrievalHead& head, const FeatureTable& table);

// ------------------------------------------------------- retrieval metrics

struct RetrievalResult {
  std::vector<std::vector<std::string>> rankings;  // per query: top-10 gallery ids
  double acc_at_top1 = 0.0;
  double map_at_top10 = 0.0;
};

/// Euclidean (or cosine) nearest-neighbour retrieval. A gallery row whose id
/// equals the query id is skipped; distance ties rank by ascending gallery
/// id. AP@10 divides by the number of relevant items inside the top 10
/// (zero relevant means AP 0).
RetrievalResult eval_retrieval(const FeatureTable& queries,
                               const FeatureTable& gallery,
                               const std::string& metric = "euclidean");

// ------------------------------------------------------------- fine-tuning

struct FinetuneConfig {
  double fraction = 0.1;   // labeled share of the training set
  int freeze_depth = -1;   // -1 nothing frozen; k freezes stages 0..k;
                           // >= block count freezes the whole encoder
  int epochs = 30;
  double lr = 1e-3;
  int batch_size = 32;
  int probe_epochs = 100;  // head training when the encoder is fully frozen
  double probe_lr = 1e-2;
  std::uint64_t seed = 0;
};

struct FinetuneResult {
  double top1 = 0.0;
  double top5 = 0.0;
  std::size_t labeled_used = 0;
  std::map<int, std::size_t> per_class_counts;
};

/// Deterministic stratified label subset: per class, round(fraction * n_c)
/// but at least one sample. fraction * N below the class count fails.
std::vector<std::size_t> stratified_subsample(
    const std::vector<LabeledSample>& samples, double fraction,
    std::uint64_t seed);

/// Semi-supervised protocol: take the stratified labeled subset, train the
/// encoder tail (stages above freeze_depth) plus a linear head, and report
/// top-1/top-5 on the eval set. A fully frozen encoder reduces exactly to
/// the frozen-feature probe path.
FinetuneResult finetune(const std::string& checkpoint_dir,
                        const std::vector<LabeledSample>& train,
                        const std::vector<LabeledSample>& eval,
                        const FinetuneConfig& cfg);

}  // namespace sketchssl
