#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "sketchssl/data.hpp"
#include "sketchssl/models.hpp"
#include "sketchssl/raster.hpp"

namespace sketchssl {

struct PretrainConfig {
  std::string task = "vectorization";  // vectorization | rasterization
  ModelConfig model;
  double lr = 1e-4;
  int batch_size = 64;
  int epochs = 1;
  std::uint64_t seed = 0;
  int t_max = 64;          // sequence budget; overrides model.t_max
  RasterConfig raster;
  bool deterministic = true;  // bitwise-reproducible runs; wall_time logged as 0
  bool augment = false;       // horizontal flip + random crop; forced off when deterministic
  bool clip_gradients = true;
  bool resume = false;        // continue from the newest checkpoint in out_dir
  std::string out_dir;        // receives ckpt-NNNNNN/ dirs + metrics.ndjson

  void validate() const;
};

nlohmann::json pretrain_config_json(const PretrainConfig& cfg);
nlohmann::json model_config_json(const ModelConfig& cfg);
nlohmann::json raster_config_json(const RasterConfig& cfg);

/// Inverses of the serializers above; unknown keys are rejected so stale
/// configs fail loudly instead of silently defaulting.
PretrainConfig pretrain_config_from_json(const nlohmann::json& j);
ModelConfig model_config_from_json(const nlohmann::json& j);
RasterConfig raster_config_from_json(const nlohmann::json& j);

struct EpochRecord {
  long long epoch = 0;        // 1-based
  long long step = 0;         // optimizer steps completed since epoch 1
  double total = 0.0;         // sample-weighted mean batch loss
  double coord_term = 0.0;    // vectorization only
  double pen_term = 0.0;      // vectorization only
  double pen_accuracy = 0.0;  // masked argmax accuracy (vectorization only)
  double wall_time = 0.0;     // seconds; exactly 0.0 under deterministic

  nlohmann::json to_json(const std::string& task) const;
};

struct PretrainResult {
  std::string checkpoint_dir;        // newest checkpoint directory
  std::string metrics_path;          // ndjson log, one record per epoch
  std::vector<EpochRecord> history;  // epochs executed by this call
};

/// Trains image encoder + sequence decoder with teacher forcing on the
/// masked coordinate/pen loss. Raster inputs are rendered from each sample's
/// vector view, so the two views always correspond.
PretrainResult pretrain_vectorization(const std::vector<LabeledSample>& dataset,
                                      const PretrainConfig& cfg);

/// Trains sequence encoder + image decoder on mean squared pixel error.
PretrainResult pretrain_rasterization(const std::vector<LabeledSample>& dataset,
                                      const PretrainConfig& cfg);

/// Dispatch on cfg.task.
PretrainResult pretrain(const std::vector<LabeledSample>& dataset,
                        const PretrainConfig& cfg);

/// Rows fed to the models: the absolute sequence, or its delta coding
/// repacked point-for-point when mode is "offset".
StrokeSequence model_coordinate_view(const StrokeSequence& seq,
                                     const std::string& mode);

}  // namespace sketchssl
