#include "sketchssl/pretrain.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "sketchssl/checkpoint.hpp"
#include "sketchssl/error.hpp"
#include "sketchssl/graph.hpp"
#include "sketchssl/losses.hpp"
#include "sketchssl/params.hpp"
#include "sketchssl/rng.hpp"

namespace sketchssl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Stateless per-purpose rng streams make interrupted and uninterrupted runs
// draw identical values at every epoch.
constexpr std::uint64_t kInitStream = 0x1417ULL;
constexpr std::uint64_t kOrderStream = 0x0E00'0000ULL;
constexpr std::uint64_t kAugmentStream = 0xA000'0000ULL;

StrokeSequence augment_sequence(const StrokeSequence& seq, Rng& rng) {
  StrokeSequence out = seq;
  if (rng.uniform() < 0.5)
    for (auto& p : out.points) p.x = 1.0 - p.x;
  double scale = rng.uniform(0.9, 1.0);
  double ox = rng.uniform(0.0, 1.0 - scale);
  double oy = rng.uniform(0.0, 1.0 - scale);
  for (auto& p : out.points) {
    p.x = std::clamp((p.x - ox) / scale, 0.0, 1.0);
    p.y = std::clamp((p.y - oy) / scale, 0.0, 1.0);
  }
  return out;
}

Tensor batch_images(const std::vector<const StrokeSequence*>& seqs,
                    const RasterConfig& raster) {
  std::size_t n = seqs.size();
  std::size_t c = static_cast<std::size_t>(raster.channels);
  std::size_t h = static_cast<std::size_t>(raster.height);
  std::size_t w = static_cast<std::size_t>(raster.width);
  Tensor images({n, c, h, w});
  for (std::size_t i = 0; i < n; ++i) {
    RasterImage img = render(*seqs[i], raster);
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          images.data[((i * c + k) * h + y) * w + x] =
              img.pixels[(y * w + x) * c + k];
  }
  return images;
}

struct BatchStats {
  double total = 0.0;
  double coord = 0.0;
  double pen = 0.0;
  double pen_correct = 0.0;
  double pen_counted = 0.0;
};

fs::path checkpoint_dir_for_epoch(const fs::path& out, long long epoch) {
  char name[32];
  std::snprintf(name, sizeof name, "ckpt-%06lld", epoch);
  return out / name;
}

long long newest_checkpoint_epoch(const fs::path& out) {
  long long best = -1;
  if (!fs::is_directory(out)) return best;
  for (const auto& entry : fs::directory_iterator(out)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("ckpt-", 0) != 0 || name.size() == 5) continue;
    const std::string digits = name.substr(5);
    if (digits.find_first_not_of("0123456789") != std::string::npos) continue;
    if (!fs::exists(entry.path() / "manifest.json")) continue;
    best = std::max(best, std::stoll(digits));
  }
  return best;
}

void reject_unknown_keys(const json& j, const char* where,
                         std::initializer_list<const char*> allowed) {
  require(j.is_object(), ErrorCode::ConfigError,
          std::string(where) + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* a : allowed)
      if (key == a) known = true;
    require(known, ErrorCode::ConfigError,
            std::string(where) + ": unknown key '" + key + "'");
  }
}

}  // namespace

json raster_config_json(const RasterConfig& r) {
  return {{"height", r.height},
          {"width", r.width},
          {"channels", r.channels},
          {"stroke_width", r.stroke_width},
          {"background", r.background},
          {"ink", r.ink}};
}

json model_config_json(const ModelConfig& m) {
  return {{"image_encoder",
           {{"family", m.image_encoder.family},
            {"blocks", m.image_encoder.blocks},
            {"widths", m.image_encoder.widths},
            {"blstm_hidden", m.image_encoder.blstm_hidden}}},
          {"seq_decoder",
           {{"cell", m.seq_decoder.cell}, {"hidden", m.seq_decoder.hidden}}},
          {"seq_encoder",
           {{"family", m.seq_encoder.family},
            {"layers", m.seq_encoder.layers},
            {"hidden", m.seq_encoder.hidden},
            {"heads", m.seq_encoder.heads},
            {"mlp_dim", m.seq_encoder.mlp_dim}}},
          {"conv_decoder",
           {{"start_resolution", m.conv_decoder.start_resolution},
            {"upsample_stages", m.conv_decoder.upsample_stages},
            {"widths", m.conv_decoder.widths}}},
          {"coordinate_mode", m.coordinate_mode},
          {"pooling", m.pooling},
          {"d", m.d},
          {"t_max", m.t_max}};
}

RasterConfig raster_config_from_json(const json& j) {
  reject_unknown_keys(j, "raster config",
                      {"height", "width", "channels", "stroke_width",
                       "background", "ink"});
  RasterConfig r;
  r.height = j.value("height", r.height);
  r.width = j.value("width", r.width);
  r.channels = j.value("channels", r.channels);
  r.stroke_width = j.value("stroke_width", r.stroke_width);
  r.background = j.value("background", r.background);
  r.ink = j.value("ink", r.ink);
  return r;
}

ModelConfig model_config_from_json(const json& j) {
  reject_unknown_keys(j, "model config",
                      {"image_encoder", "seq_decoder", "seq_encoder",
                       "conv_decoder", "coordinate_mode", "pooling", "d",
                       "t_max"});
  ModelConfig m;
  if (j.contains("image_encoder")) {
    const json& e = j["image_encoder"];
    reject_unknown_keys(e, "image_encoder",
                        {"family", "blocks", "widths", "blstm_hidden"});
    m.image_encoder.family = e.value("family", m.image_encoder.family);
    m.image_encoder.blocks = e.value("blocks", m.image_encoder.blocks);
    m.image_encoder.widths = e.value("widths", m.image_encoder.widths);
    m.image_encoder.blstm_hidden =
        e.value("blstm_hidden", m.image_encoder.blstm_hidden);
  }
  if (j.contains("seq_decoder")) {
    const json& e = j["seq_decoder"];
    reject_unknown_keys(e, "seq_decoder", {"cell", "hidden"});
    m.seq_decoder.cell = e.value("cell", m.seq_decoder.cell);
    m.seq_decoder.hidden = e.value("hidden", m.seq_decoder.hidden);
  }
  if (j.contains("seq_encoder")) {
    const json& e = j["seq_encoder"];
    reject_unknown_keys(e, "seq_encoder",
                        {"family", "layers", "hidden", "heads", "mlp_dim"});
    m.seq_encoder.family = e.value("family", m.seq_encoder.family);
    m.seq_encoder.layers = e.value("layers", m.seq_encoder.layers);
    m.seq_encoder.hidden = e.value("hidden", m.seq_encoder.hidden);
    m.seq_encoder.heads = e.value("heads", m.seq_encoder.heads);
    m.seq_encoder.mlp_dim = e.value("mlp_dim", m.seq_encoder.mlp_dim);
  }
  if (j.contains("conv_decoder")) {
    const json& e = j["conv_decoder"];
    reject_unknown_keys(e, "conv_decoder",
                        {"start_resolution", "upsample_stages", "widths"});
    m.conv_decoder.start_resolution =
        e.value("start_resolution", m.conv_decoder.start_resolution);
    m.conv_decoder.upsample_stages =
        e.value("upsample_stages", m.conv_decoder.upsample_stages);
    m.conv_decoder.widths = e.value("widths", m.conv_decoder.widths);
  }
  m.coordinate_mode = j.value("coordinate_mode", m.coordinate_mode);
  m.pooling = j.value("pooling", m.pooling);
  m.d = j.value("d", m.d);
  m.t_max = j.value("t_max", m.t_max);
  return m;
}

PretrainConfig pretrain_config_from_json(const json& j) {
  reject_unknown_keys(j, "pretrain config",
                      {"task", "model", "lr", "batch_size", "epochs", "seed",
                       "t_max", "raster", "deterministic", "augment",
                       "clip_gradients", "resume", "out_dir"});
  PretrainConfig cfg;
  cfg.task = j.value("task", cfg.task);
  if (j.contains("model")) cfg.model = model_config_from_json(j["model"]);
  cfg.lr = j.value("lr", cfg.lr);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.t_max = j.value("t_max", cfg.t_max);
  if (j.contains("raster")) cfg.raster = raster_config_from_json(j["raster"]);
  cfg.deterministic = j.value("deterministic", cfg.deterministic);
  cfg.augment = j.value("augment", cfg.augment);
  cfg.clip_gradients = j.value("clip_gradients", cfg.clip_gradients);
  cfg.resume = j.value("resume", cfg.resume);
  cfg.out_dir = j.value("out_dir", cfg.out_dir);
  return cfg;
}

namespace {

struct RunState {
  ParameterStore store;
  Adam adam;
  long long start_epoch = 0;  // epochs already completed
  long long global_step = 0;
};

RunState start_or_resume(const PretrainConfig& cfg, const ModelConfig& model) {
  RunState run;
  run.adam = Adam(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8, 1.0, cfg.clip_gradients});
  if (cfg.resume) {
    long long epoch = newest_checkpoint_epoch(cfg.out_dir);
    require(epoch >= 0, ErrorCode::IoError,
            "pretrain: resume requested but no checkpoint under '" +
                cfg.out_dir + "'");
    LoadedCheckpoint loaded = load_checkpoint(checkpoint_dir_for_epoch(cfg.out_dir, epoch));
    require(loaded.meta.task == cfg.task, ErrorCode::ConfigError,
            "pretrain: checkpoint task '" + loaded.meta.task +
                "' does not match configured task '" + cfg.task + "'");
    run.store = std::move(loaded.store);
    run.adam.set_step_count(loaded.meta.adam_step);
    run.start_epoch = loaded.meta.epoch;
    run.global_step = loaded.meta.step;
    return run;
  }
  Rng init_rng = Rng(cfg.seed).derive(kInitStream);
  if (cfg.task == "vectorization") {
    init_image_encoder(run.store, model, cfg.raster.channels, init_rng);
    init_seq_decoder(run.store, model, init_rng);
  } else {
    init_seq_encoder(run.store, model, init_rng);
    init_conv_decoder(run.store, model, cfg.raster.channels, init_rng);
  }
  return run;
}

void append_metrics(const fs::path& path, const json& record) {
  std::ofstream out(path, std::ios::app);
  require(out.good(), ErrorCode::IoError,
          "pretrain: cannot append metrics to '" + path.string() + "'");
  out << record.dump() << "\n";
  out.flush();
  require(out.good(), ErrorCode::IoError, "pretrain: short metrics write");
}

PretrainResult run_pretraining(const std::vector<LabeledSample>& dataset,
                               const PretrainConfig& cfg) {
  cfg.validate();
  require(!dataset.empty(), ErrorCode::EmptyDataset,
          "pretrain: dataset has no samples");

  ModelConfig model = cfg.model;
  model.t_max = cfg.t_max;
  model.finalize(cfg.raster);
  const bool vectorize = cfg.task == "vectorization";
  const bool augment = cfg.augment && !cfg.deterministic;

  fs::create_directories(cfg.out_dir);
  PretrainResult result;
  result.metrics_path = (fs::path(cfg.out_dir) / "metrics.ndjson").string();

  RunState run = start_or_resume(cfg, model);
  result.checkpoint_dir =
      run.start_epoch > 0
          ? checkpoint_dir_for_epoch(cfg.out_dir, run.start_epoch).string()
          : "";

  Rng master(cfg.seed);
  const std::size_t n = dataset.size();

  for (long long epoch = run.start_epoch + 1; epoch <= cfg.epochs; ++epoch) {
    auto epoch_start = std::chrono::steady_clock::now();
    Rng order_rng = master.derive(kOrderStream + static_cast<std::uint64_t>(epoch));
    Rng aug_rng = master.derive(kAugmentStream + static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    order_rng.shuffle(order);

    BatchStats epoch_stats;
    for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
      std::size_t end = std::min(n, begin + static_cast<std::size_t>(cfg.batch_size));
      std::size_t bsz = end - begin;

      std::vector<StrokeSequence> seqs(bsz);
      std::vector<const StrokeSequence*> seq_ptrs(bsz);
      std::vector<PaddedSequence> padded(bsz);
      for (std::size_t i = 0; i < bsz; ++i) {
        const LabeledSample& s = dataset[order[begin + i]];
        seqs[i] = augment ? augment_sequence(s.vector, aug_rng) : s.vector;
        seq_ptrs[i] = &seqs[i];
        padded[i] = pad_or_truncate(
            model_coordinate_view(seqs[i], model.coordinate_mode),
            static_cast<std::size_t>(model.t_max));
      }
      auto [rows, mask] = sequence_batch_tensors(padded);
      Tensor images = batch_images(seq_ptrs, cfg.raster);

      Graph g;
      Binder bind(g, run.store, true);
      double batch_total = 0.0, batch_coord = 0.0, batch_pen = 0.0;
      Value loss;
      if (vectorize) {
        EncodedImage enc = image_encode_graph(bind, model, g.constant(images));
        std::vector<Value> outs =
            decode_sequence_teacher_forcing(bind, model, enc.latent, rows);
        VectorizationLossParts parts =
            vectorization_loss_graph(g, outs, rows, mask);
        loss = parts.total;
        batch_coord = g.value(parts.coord).data[0];
        batch_pen = g.value(parts.pen).data[0];
        // Masked pen-state accuracy from the same forward pass.
        std::size_t t_steps = outs.size();
        for (std::size_t t = 0; t < t_steps; ++t) {
          const Tensor& out_t = g.value(outs[t]);
          for (std::size_t i = 0; i < bsz; ++i) {
            if (mask.data[i * t_steps + t] == 0.0) continue;
            int pred = 0;
            for (int k = 1; k < 3; ++k)
              if (out_t.data[i * 5 + 2 + k] > out_t.data[i * 5 + 2 + pred])
                pred = k;
            int want = 0;
            for (int k = 1; k < 3; ++k)
              if (rows.data[(i * t_steps + t) * 5 + 2 + k] >
                  rows.data[(i * t_steps + t) * 5 + 2 + want])
                want = k;
            epoch_stats.pen_correct += (pred == want) ? 1.0 : 0.0;
            epoch_stats.pen_counted += 1.0;
          }
        }
      } else {
        Value latent =
            model.seq_encoder.family == "Transformer"
                ? vector_encode_transformer_graph(bind, model, g.constant(rows),
                                                  g.constant(mask))
                : vector_encode_rnn_graph(bind, model, g.constant(rows),
                                          g.constant(mask));
        Value pred = conv_decode_graph(bind, model, latent, cfg.raster.channels);
        loss = rasterization_loss_graph(g, pred, g.constant(images));
      }
      batch_total = g.value(loss).data[0];
      if (!std::isfinite(batch_total))
        fail(ErrorCode::DivergedLoss,
             "pretrain: non-finite loss at epoch " + std::to_string(epoch) +
                 "; last good checkpoint retained");

      g.backward(loss);
      run.adam.update(run.store, g.param_grads());
      ++run.global_step;

      epoch_stats.total += batch_total * static_cast<double>(bsz);
      epoch_stats.coord += batch_coord * static_cast<double>(bsz);
      epoch_stats.pen += batch_pen * static_cast<double>(bsz);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.step = run.global_step;
    rec.total = epoch_stats.total / static_cast<double>(n);
    rec.coord_term = epoch_stats.coord / static_cast<double>(n);
    rec.pen_term = epoch_stats.pen / static_cast<double>(n);
    rec.pen_accuracy = epoch_stats.pen_counted > 0
                           ? epoch_stats.pen_correct / epoch_stats.pen_counted
                           : 0.0;
    if (!cfg.deterministic)
      rec.wall_time =
          std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                        epoch_start)
              .count();
    result.history.push_back(rec);
    append_metrics(result.metrics_path, rec.to_json(cfg.task));

    CheckpointMeta meta;
    meta.task = cfg.task;
    meta.config = pretrain_config_json(cfg);
    meta.epoch = epoch;
    meta.step = run.global_step;
    meta.adam_step = run.adam.step_count();
    meta.metrics = rec.to_json(cfg.task);
    meta.rng_state = master.state();
    fs::path ckpt = checkpoint_dir_for_epoch(cfg.out_dir, epoch);
    save_checkpoint(ckpt, run.store, meta);
    result.checkpoint_dir = ckpt.string();
  }
  return result;
}

}  // namespace

void PretrainConfig::validate() const {
  require(task == "vectorization" || task == "rasterization",
          ErrorCode::ConfigError, "pretrain: unknown task '" + task + "'");
  require(lr > 0.0, ErrorCode::ConfigError, "pretrain: lr must be positive");
  require(batch_size >= 1, ErrorCode::ConfigError,
          "pretrain: batch_size must be at least 1");
  require(epochs >= 1, ErrorCode::ConfigError,
          "pretrain: epochs must be at least 1");
  require(t_max >= 1, ErrorCode::ConfigError,
          "pretrain: t_max must be at least 1");
  require(!out_dir.empty(), ErrorCode::ConfigError,
          "pretrain: out_dir is required");
  raster.validate();
}

json pretrain_config_json(const PretrainConfig& cfg) {
  return {{"task", cfg.task},
          {"model", model_config_json(cfg.model)},
          {"lr", cfg.lr},
          {"batch_size", cfg.batch_size},
          {"epochs", cfg.epochs},
          {"seed", cfg.seed},
          {"t_max", cfg.t_max},
          {"raster", raster_config_json(cfg.raster)},
          {"deterministic", cfg.deterministic},
          {"augment", cfg.augment},
          {"clip_gradients", cfg.clip_gradients}};
}

json EpochRecord::to_json(const std::string& task) const {
  json rec{{"epoch", epoch}, {"step", step}, {"total", total}};
  if (task == "vectorization") {
    rec["coord_term"] = coord_term;
    rec["pen_term"] = pen_term;
    rec["pen_accuracy"] = pen_accuracy;
  }
  rec["wall_time"] = wall_time;
  return rec;
}

StrokeSequence model_coordinate_view(const StrokeSequence& seq,
                                     const std::string& mode) {
  if (mode == "absolute") return seq;
  require(mode == "offset", ErrorCode::ConfigError,
          "pretrain: unknown coordinate mode '" + mode + "'");
  OffsetSequence off = to_offsets(seq);
  StrokeSequence out;
  out.points.reserve(off.deltas.size());
  for (const auto& d : off.deltas) out.points.push_back({d.dx, d.dy, d.state});
  return out;
}

PretrainResult pretrain_vectorization(const std::vector<LabeledSample>& dataset,
                                      const PretrainConfig& cfg) {
  PretrainConfig c = cfg;
  c.task = "vectorization";
  return run_pretraining(dataset, c);
}

PretrainResult pretrain_rasterization(const std::vector<LabeledSample>& dataset,
                                      const PretrainConfig& cfg) {
  PretrainConfig c = cfg;
  c.task = "rasterization";
  return run_pretraining(dataset, c);
}

PretrainResult pretrain(const std::vector<LabeledSample>& dataset,
                        const PretrainConfig& cfg) {
  return run_pretraining(dataset, cfg);
}

}  // namespace sketchssl
