#include "sketchssl/cli.hpp"

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sketchssl/checkpoint.hpp"
#include "sketchssl/data.hpp"
#include "sketchssl/downstream_handwriting.hpp"
#include "sketchssl/downstream_sketch.hpp"
#include "sketchssl/error.hpp"
#include "sketchssl/models.hpp"
#include "sketchssl/pretrain.hpp"
#include "sketchssl/raster.hpp"
#include "sketchssl/runconfig.hpp"
#include "sketchssl/stroke.hpp"

namespace sketchssl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::string checkpoint;
  std::string task;
  std::string depth;
  std::string modality;
  std::string metric;
  std::string lexicon;
  std::string coordinate_mode;
  std::string kind;
  double fraction = -1.0;
  int freeze_depth = std::numeric_limits<int>::min();
  int render_count = -1;
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool deterministic = false;
  bool no_teacher_forcing = false;
  std::vector<std::string> report_dirs;
};

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config,
                  "JSON config file merged over built-in defaults");
  sub->add_option("--seed", f.seed, "seed applied to every seeded section")
      ->each([&f](const std::string&) { f.seed_given = true; });
  sub->add_option("--out", f.out,
                  "exact output directory (bypasses the output root)");
}

json base_overrides(const Flags& f) {
  json o = json::object();
  if (f.seed_given) {
    o["data"]["seed"] = f.seed;
    o["pretrain"]["seed"] = f.seed;
    o["downstream"]["retrieval"]["seed"] = f.seed;
    o["downstream"]["finetune"]["seed"] = f.seed;
    o["downstream"]["recognizer"]["seed"] = f.seed;
  }
  if (!f.checkpoint.empty()) o["downstream"]["checkpoint"] = f.checkpoint;
  if (!f.depth.empty()) o["downstream"]["depth"] = f.depth;
  if (!f.modality.empty()) o["downstream"]["modality"] = f.modality;
  if (!f.metric.empty()) o["downstream"]["retrieval"]["metric"] = f.metric;
  if (!f.kind.empty()) o["data"]["kind"] = f.kind;
  return o;
}

std::vector<LabeledSample> select_samples(
    const std::vector<LabeledSample>& samples,
    const std::vector<std::string>& ids) {
  std::map<std::string, const LabeledSample*> by_id;
  for (const auto& s : samples) by_id[s.id] = &s;
  std::vector<LabeledSample> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    require(it != by_id.end(), ErrorCode::MalformedRecord,
            "cli: split references missing sample '" + id + "'");
    out.push_back(*it->second);
  }
  return out;
}

std::string run_dir_for(const Flags& f, const json& cfg, std::uint64_t seed) {
  if (!f.out.empty()) {
    fs::create_directories(f.out);
    return f.out;
  }
  return make_run_dir(resolve_output_root(cfg), seed);
}

void append_metrics(const std::string& dir, const json& record) {
  const std::string path = dir + "/metrics.ndjson";
  std::ofstream out(path, std::ios::app);
  require(static_cast<bool>(out), ErrorCode::IoError,
          "cli: cannot write '" + path + "'");
  out << record.dump() << '\n';
}

/// Accepts either a checkpoint directory (holds manifest.json) or a pretrain
/// run directory, in which case the newest ckpt-* child is used.
std::string resolve_checkpoint_arg(const std::string& path) {
  if (fs::exists(fs::path(path) / "manifest.json")) return path;
  std::string best;
  long long best_epoch = -1;
  if (fs::is_directory(path)) {
    for (const auto& entry : fs::directory_iterator(path)) {
      const std::string name = entry.path().filename().string();
      if (name.rfind("ckpt-", 0) != 0) continue;
      if (!fs::exists(entry.path() / "manifest.json")) continue;
      const std::string digits = name.substr(5);
      if (digits.empty() ||
          digits.find_first_not_of("0123456789") != std::string::npos)
        continue;
      const long long epoch = std::stoll(digits);
      if (epoch > best_epoch) {
        best_epoch = epoch;
        best = entry.path().string();
      }
    }
  }
  require(best_epoch >= 0, ErrorCode::IoError,
          "cli: no checkpoint found under '" + path + "'");
  return best;
}

std::string required_checkpoint(const json& cfg) {
  const std::string path = cfg.at("downstream").value("checkpoint", "");
  require(!path.empty(), ErrorCode::ConfigError,
          "cli: a checkpoint is required (--checkpoint PATH or "
          "downstream.checkpoint)");
  return resolve_checkpoint_arg(path);
}

std::vector<std::string> read_lexicon(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::IoError,
          "cli: cannot open lexicon '" + path + "'");
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' '))
      line.pop_back();
    if (!line.empty()) words.push_back(line);
  }
  require(!words.empty(), ErrorCode::EmptyLexicon,
          "cli: lexicon '" + path + "' has no entries");
  return words;
}

int argmax3(const std::array<double, 3>& v) {
  int best = 0;
  for (int k = 1; k < 3; ++k)
    if (v[static_cast<std::size_t>(k)] > v[static_cast<std::size_t>(best)])
      best = k;
  return best;
}

/// Converts raw decoder readouts into a drawable canonical sequence:
/// coordinates clamped to the canvas, offset predictions accumulated from
/// the reference origin, everything after the first End dropped, and a
/// terminal End enforced.
StrokeSequence predictions_to_sequence(const std::vector<PointPrediction>& preds,
                                       const std::string& mode,
                                       const StrokeSequence& reference) {
  const bool offset = mode == "offset";
  double ax = 0.0, ay = 0.0;
  if (offset && !reference.empty()) {
    ax = reference[0].x;
    ay = reference[0].y;
  }
  StrokeSequence seq;
  for (const auto& p : preds) {
    StrokePoint q;
    if (offset) {
      ax += p.x;
      ay += p.y;
      q.x = ax;
      q.y = ay;
    } else {
      q.x = p.x;
      q.y = p.y;
    }
    q.x = std::clamp(q.x, 0.0, 1.0);
    q.y = std::clamp(q.y, 0.0, 1.0);
    q.state = static_cast<PenState>(argmax3(p.pen_logits));
    seq.points.push_back(q);
    if (q.state == PenState::kEnd) break;
  }
  if (seq.empty()) seq.points.push_back({0.5, 0.5, PenState::kEnd});
  seq.points.back().state = PenState::kEnd;
  return seq;
}

// ------------------------------------------------------------ subcommands

int run_prepare_data(const Flags& f, std::ostream& out) {
  const json cfg = resolve_run_config(f.config, base_overrides(f));
  auto [samples, split] = load_dataset(cfg.at("data"));
  const auto seed = cfg.at("data").at("seed").get<std::uint64_t>();
  const std::string dir = run_dir_for(f, cfg, seed);
  save_corpus(dir, samples, split, cfg.at("data").dump());
  write_json_file(dir + "/config.json", cfg);
  append_metrics(dir, json{{"protocol", "prepare-data"},
                           {"samples", samples.size()},
                           {"classes", split.class_universe.size()},
                           {"train", split.train.size()},
                           {"val", split.val.size()},
                           {"test", split.test.size()}});
  out << "corpus: " << dir << " (" << samples.size() << " samples, "
      << split.class_universe.size() << " classes)\n";
  return 0;
}

int run_pretrain(const Flags& f, std::ostream& out) {
  json overrides = base_overrides(f);
  if (!f.task.empty()) overrides["pretrain"]["task"] = f.task;
  if (f.deterministic) overrides["pretrain"]["deterministic"] = true;
  if (!f.coordinate_mode.empty())
    overrides["model"]["coordinate_mode"] = f.coordinate_mode;
  const json cfg = resolve_run_config(f.config, overrides);

  PretrainConfig pc = pretrain_config_from_json(cfg.at("pretrain"));
  pc.model = model_config_from_json(cfg.at("model"));
  pc.raster = data_raster_config(cfg.at("data"));

  auto [samples, split] = load_dataset(cfg.at("data"));
  const std::vector<LabeledSample> train = select_samples(samples, split.train);

  const std::string dir = run_dir_for(f, cfg, pc.seed);
  pc.out_dir = dir;
  write_json_file(dir + "/config.json", cfg);

  const PretrainResult res = pretrain(train, pc);
  out << "run: " << dir << '\n';
  out << "checkpoint: " << res.checkpoint_dir << '\n';
  if (!res.history.empty())
    out << "final loss: " << res.history.back().total << '\n';
  return 0;
}

int run_probe(const Flags& f, std::ostream& out) {
  const json cfg = resolve_run_config(f.config, base_overrides(f));
  const json& ds = cfg.at("downstream");
  const std::string ckpt = required_checkpoint(cfg);
  const std::string depth = ds.value("depth", "final");
  const std::string modality = ds.value("modality", "raster");

  auto [samples, split] = load_dataset(cfg.at("data"));
  const FeatureTable train_tbl = extract_features(
      ckpt, select_samples(samples, split.train), depth, modality);
  const FeatureTable test_tbl = extract_features(
      ckpt, select_samples(samples, split.test), depth, modality);

  const json& pj = ds.at("probe");
  const LinearProbe probe =
      train_linear_probe(train_tbl, pj.value("epochs", 100), pj.value("lr", 1e-2));
  auto acc = eval_topk(probe, test_tbl, {1, 5});

  const auto seed = cfg.at("data").at("seed").get<std::uint64_t>();
  const std::string dir = run_dir_for(f, cfg, seed);
  write_json_file(dir + "/config.json", cfg);
  append_metrics(dir, json{{"protocol", "probe"},
                           {"checkpoint", ckpt},
                           {"depth", depth},
                           {"modality", modality},
                           {"top1", acc.at(1)},
                           {"top5", acc.at(5)},
                           {"train_size", train_tbl.size()},
                           {"eval_size", test_tbl.size()}});
  out << "run: " << dir << '\n';
  out << "probe top1 " << acc.at(1) << " top5 " << acc.at(5) << " (depth "
      << depth << ", " << modality << " features)\n";
  return 0;
}

int run_retrieve(const Flags& f, std::ostream& out) {
  const json cfg = resolve_run_config(f.config, base_overrides(f));
  const json& ds = cfg.at("downstream");
  const std::string ckpt = required_checkpoint(cfg);
  const std::string depth = ds.value("depth", "final");
  const std::string modality = ds.value("modality", "raster");

  auto [samples, split] = load_dataset(cfg.at("data"));
  const FeatureTable gallery_tbl = extract_features(
      ckpt, select_samples(samples, split.train), depth, modality);
  const FeatureTable query_tbl = extract_features(
      ckpt, select_samples(samples, split.test), depth, modality);

  const json& rj = ds.at("retrieval");
  RetrievalHeadConfig rc;
  rc.embed_dim = rj.value("embed_dim", rc.embed_dim);
  rc.margin = rj.value("margin", rc.margin);
  rc.epochs = rj.value("epochs", rc.epochs);
  rc.lr = rj.value("lr", rc.lr);
  rc.seed = rj.value("seed", rc.seed);
  const std::string metric = rj.value("metric", "euclidean");

  const RetrievalHead head = train_retrieval_head(gallery_tbl, rc);
  const FeatureTable emb_gallery = embed_features(head, gallery_tbl);
  const FeatureTable emb_query = embed_features(head, query_tbl);
  const RetrievalResult res = eval_retrieval(emb_query, emb_gallery, metric);

  const std::string dir = run_dir_for(f, cfg, rc.seed);
  write_json_file(dir + "/config.json", cfg);
  json rankings = json::array();
  for (std::size_t i = 0; i < res.rankings.size(); ++i)
    rankings.push_back(
        json{{"query", emb_query.ids[i]}, {"top", res.rankings[i]}});
  write_json_file(dir + "/rankings.json", rankings);
  append_metrics(dir, json{{"protocol", "retrieve"},
                           {"checkpoint", ckpt},
                           {"metric", metric},
                           {"acc_at_top1", res.acc_at_top1},
                           {"map_at_top10", res.map_at_top10},
                           {"queries", emb_query.size()},
                           {"gallery", emb_gallery.size()}});
  out << "run: " << dir << '\n';
  out << "retrieval acc@1 " << res.acc_at_top1 << " mAP@10 "
      << res.map_at_top10 << " (" << metric << ")\n";
  return 0;
}

int run_finetune(const Flags& f, std::ostream& out) {
  json overrides = base_overrides(f);
  if (f.fraction >= 0.0) overrides["downstream"]["finetune"]["fraction"] = f.fraction;
  if (f.freeze_depth != std::numeric_limits<int>::min())
    overrides["downstream"]["finetune"]["freeze_depth"] = f.freeze_depth;
  const json cfg = resolve_run_config(f.config, overrides);
  const std::string ckpt = required_checkpoint(cfg);

  const json& fj = cfg.at("downstream").at("finetune");
  FinetuneConfig fc;
  fc.fraction = fj.value("fraction", fc.fraction);
  fc.freeze_depth = fj.value("freeze_depth", fc.freeze_depth);
  fc.epochs = fj.value("epochs", fc.epochs);
  fc.lr = fj.value("lr", fc.lr);
  fc.batch_size = fj.value("batch_size", fc.batch_size);
  fc.probe_epochs = fj.value("probe_epochs", fc.probe_epochs);
  fc.probe_lr = fj.value("probe_lr", fc.probe_lr);
  fc.seed = fj.value("seed", fc.seed);

  auto [samples, split] = load_dataset(cfg.at("data"));
  const FinetuneResult res =
      finetune(ckpt, select_samples(samples, split.train),
               select_samples(samples, split.test), fc);

  const std::string dir = run_dir_for(f, cfg, fc.seed);
  write_json_file(dir + "/config.json", cfg);
  append_metrics(dir, json{{"protocol", "finetune"},
                           {"checkpoint", ckpt},
                           {"fraction", fc.fraction},
                           {"freeze_depth", fc.freeze_depth},
                           {"top1", res.top1},
                           {"top5", res.top5},
                           {"labeled_used", res.labeled_used}});
  out << "run: " << dir << '\n';
  out << "finetune top1 " << res.top1 << " top5 " << res.top5 << " ("
      << res.labeled_used << " labeled)\n";
  return 0;
}

int run_recognize(const Flags& f, std::ostream& out) {
  json overrides = base_overrides(f);
  if (!f.lexicon.empty())
    overrides["downstream"]["recognizer"]["lexicon"] = f.lexicon;
  if (f.no_teacher_forcing)
    overrides["downstream"]["recognizer"]["teacher_forcing_eval"] = false;
  if (!f.checkpoint.empty()) {
    // For the recognizer the checkpoint seeds the encoder.
    overrides["downstream"].erase("checkpoint");
    overrides["downstream"]["recognizer"]["init_checkpoint"] = f.checkpoint;
  }
  const json cfg = resolve_run_config(f.config, overrides);
  const json& rj = cfg.at("downstream").at("recognizer");

  RecognizerConfig rc;
  rc.encoder = rj.value("encoder", rc.encoder);
  rc.model = model_config_from_json(rj.at("model"));
  rc.online.layers = rj.at("online").value("layers", rc.online.layers);
  rc.online.hidden = rj.at("online").value("hidden", rc.online.hidden);
  rc.decoder.hidden = rj.at("decoder").value("hidden", rc.decoder.hidden);
  rc.decoder.attn_dim = rj.at("decoder").value("attn_dim", rc.decoder.attn_dim);
  rc.decoder.embed_dim =
      rj.at("decoder").value("embed_dim", rc.decoder.embed_dim);
  rc.raster = data_raster_config(cfg.at("data"));
  rc.t_max = rj.value("t_max", rc.t_max);
  rc.max_text_len = rj.value("max_text_len", rc.max_text_len);
  rc.lr = rj.value("lr", rc.lr);
  rc.batch_size = rj.value("batch_size", rc.batch_size);
  rc.epochs = rj.value("epochs", rc.epochs);
  rc.seed = rj.value("seed", rc.seed);
  rc.init_checkpoint = rj.value("init_checkpoint", "");
  if (!rc.init_checkpoint.empty())
    rc.init_checkpoint = resolve_checkpoint_arg(rc.init_checkpoint);

  auto [samples, split] = load_dataset(cfg.at("data"));
  const std::vector<std::string>& alphabet = split.class_universe.empty()
                                                 ? synthetic_glyph_names()
                                                 : split.class_universe;
  const CharVocab vocab = CharVocab::from_alphabet(alphabet);
  const auto train_words =
      make_word_samples(select_samples(samples, split.train), rc.raster);
  const auto test_words =
      make_word_samples(select_samples(samples, split.test), rc.raster);

  const std::string dir = run_dir_for(f, cfg, rc.seed);
  write_json_file(dir + "/config.json", cfg);

  std::vector<RecognizerEpoch> history;
  const Recognizer rec = train_recognizer(train_words, vocab, rc, &history);
  for (const auto& e : history)
    append_metrics(dir, json{{"epoch", e.epoch},
                             {"loss", e.loss},
                             {"tf_char_accuracy", e.tf_char_accuracy}});

  const std::vector<std::string> raw = recognize(rec, test_words);
  std::vector<std::string> refs;
  refs.reserve(test_words.size());
  for (const auto& w : test_words) refs.push_back(w.text);

  const std::string lexicon_path = rj.value("lexicon", "");
  std::vector<std::string> lexicon;
  if (!lexicon_path.empty()) lexicon = read_lexicon(lexicon_path);

  json report = json::array();
  for (std::size_t i = 0; i < test_words.size(); ++i) {
    const std::string corrected =
        lexicon.empty() ? raw[i] : lexicon_correct(raw[i], lexicon);
    report.push_back(json{{"id", test_words[i].id},
                          {"reference", refs[i]},
                          {"raw", raw[i]},
                          {"corrected", corrected},
                          {"edit_distance", levenshtein(raw[i], refs[i])}});
  }
  write_json_file(dir + "/recognition.json", report);

  const double wra_raw = evaluate_wra(raw, refs);
  json summary{{"protocol", "recognize"},
               {"wra_raw", wra_raw},
               {"eval_size", test_words.size()},
               {"epochs", rc.epochs}};
  summary["wra_lexicon"] =
      lexicon.empty() ? json() : json(evaluate_wra(raw, refs, lexicon));
  if (rj.value("teacher_forcing_eval", true))
    summary["tf_char_accuracy"] = teacher_forced_accuracy(rec, test_words);
  append_metrics(dir, summary);

  out << "run: " << dir << '\n';
  out << "recognize wra " << wra_raw;
  if (!lexicon.empty())
    out << " (lexicon-corrected " << summary["wra_lexicon"].get<double>()
        << ")";
  out << " over " << test_words.size() << " words\n";
  return 0;
}

int run_render(const Flags& f, std::ostream& out) {
  json overrides = base_overrides(f);
  if (f.render_count >= 0)
    overrides["downstream"]["render"]["count"] = f.render_count;
  const json cfg = resolve_run_config(f.config, overrides);
  const std::string ckpt = required_checkpoint(cfg);

  const LoadedCheckpoint loaded = load_checkpoint(ckpt);
  const std::string task = loaded.meta.task;
  require(task == "vectorization" || task == "rasterization",
          ErrorCode::ModalityMismatch,
          "cli: cannot render from a '" + task + "' checkpoint");
  ModelConfig model = model_config_from_json(loaded.meta.config.at("model"));
  const RasterConfig raster =
      raster_config_from_json(loaded.meta.config.at("raster"));
  const int t_max = loaded.meta.config.value("t_max", model.t_max);
  model.t_max = t_max;
  model.finalize(raster);

  auto [samples, split] = load_dataset(cfg.at("data"));
  const int count = cfg.at("downstream").at("render").value("count", 4);
  require(count >= 1, ErrorCode::ConfigError,
          "cli: render count must be at least 1");
  const std::size_t k =
      std::min<std::size_t>(static_cast<std::size_t>(count), split.test.size());
  require(k > 0, ErrorCode::EmptyDataset, "cli: no test samples to render");
  const auto subjects = select_samples(
      samples, {split.test.begin(), split.test.begin() + static_cast<long>(k)});

  const auto seed = cfg.at("data").at("seed").get<std::uint64_t>();
  const std::string dir = run_dir_for(f, cfg, seed);
  write_json_file(dir + "/config.json", cfg);
  const bool teacher_forcing = !f.no_teacher_forcing;

  for (const auto& sample : subjects) {
    const StrokeSequence view =
        model_coordinate_view(sample.vector, model.coordinate_mode);
    const std::string stem = dir + "/" + sample.id;
    if (task == "vectorization") {
      const RasterImage input = sample_raster(sample, raster);
      write_pnm(input, stem + ".input.pgm");
      const auto encoded = image_encode(input, loaded.store, model);
      const PaddedSequence padded =
          pad_or_truncate(view, static_cast<std::size_t>(t_max));
      const auto preds = decode_sequence(loaded.store, model, encoded.second,
                                         t_max, teacher_forcing,
                                         teacher_forcing ? &padded : nullptr);
      const StrokeSequence pred = predictions_to_sequence(
          preds, model.coordinate_mode, sample.vector);
      write_pnm(render(pred, raster), stem + ".pred.pgm");
    } else {
      const PaddedSequence padded =
          pad_or_truncate(view, static_cast<std::size_t>(t_max));
      const LatentVector latent =
          model.seq_encoder.family == "Transformer"
              ? vector_encode_transformer(padded, loaded.store, model)
              : vector_encode_rnn(padded, loaded.store, model);
      write_pnm(conv_decode(latent, loaded.store, model, raster),
                stem + ".pred.pgm");
      write_pnm(sample_raster(sample, raster), stem + ".target.pgm");
    }
  }

  append_metrics(dir, json{{"protocol", "render"},
                           {"task", task},
                           {"checkpoint", ckpt},
                           {"samples", k},
                           {"teacher_forcing", teacher_forcing}});
  out << "run: " << dir << '\n';
  out << "rendered " << k << " samples from a " << task << " checkpoint\n";
  return 0;
}

int run_report(const Flags& f, std::ostream& out) {
  json runs = json::array();
  for (const auto& dir : f.report_dirs) {
    const fs::path metrics_path = fs::path(dir) / "metrics.ndjson";
    require(fs::exists(metrics_path), ErrorCode::IoError,
            "report: '" + dir + "' has no metrics.ndjson");
    std::ifstream in(metrics_path);
    require(static_cast<bool>(in), ErrorCode::IoError,
            "report: cannot open '" + metrics_path.string() + "'");
    json last;
    std::size_t records = 0;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      try {
        last = json::parse(line);
      } catch (const json::parse_error& e) {
        fail(ErrorCode::IoError, "report: malformed metrics line in '" + dir +
                                     "': " + e.what());
      }
      ++records;
    }
    require(records > 0, ErrorCode::IoError,
            "report: '" + dir + "' has an empty metrics log");

    json config = json::object();
    if (fs::exists(fs::path(dir) / "config.json"))
      config = read_json_file((fs::path(dir) / "config.json").string());

    std::string protocol = last.value("protocol", "");
    if (protocol.empty()) {
      protocol = "pretrain";
      if (config.contains("pretrain") && config["pretrain"].contains("task"))
        protocol += ":" + config["pretrain"]["task"].get<std::string>();
    }
    runs.push_back(json{{"dir", dir},
                        {"protocol", protocol},
                        {"records", records},
                        {"metrics", last}});
  }

  const std::string outdir = f.out.empty() ? std::string(".") : f.out;
  fs::create_directories(outdir);
  write_json_file(outdir + "/summary.json", json{{"runs", runs}});

  std::string md = "# Run summary\n\n| run | protocol | records | metrics |\n";
  md += "|---|---|---|---|\n";
  for (const auto& r : runs) {
    std::string cell;
    for (const auto& [key, value] : r.at("metrics").items()) {
      if (key == "protocol") continue;
      if (!value.is_number() && !value.is_boolean() && !value.is_string())
        continue;
      if (!cell.empty()) cell += ", ";
      cell += key + "=" + value.dump();
    }
    md += "| " + r.at("dir").get<std::string>() + " | " +
          r.at("protocol").get<std::string>() + " | " +
          std::to_string(r.at("records").get<std::size_t>()) + " | " + cell +
          " |\n";
  }
  {
    const std::string path = outdir + "/summary.md";
    std::ofstream md_out(path, std::ios::trunc);
    require(static_cast<bool>(md_out), ErrorCode::IoError,
            "report: cannot write '" + path + "'");
    md_out << md;
  }
  out << "report: " << outdir << "/summary.md (" << runs.size() << " runs)\n";
  return 0;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out,
             std::ostream& err) {
  CLI::App app{"cross-modal pretraining and evaluation for hand-drawn data"};
  app.name("sketchssl");
  app.require_subcommand(1);
  Flags f;

  CLI::App* prepare = app.add_subcommand(
      "prepare-data", "generate or repackage a stroke corpus");
  add_common(prepare, f);
  prepare->add_option("--kind", f.kind, "corpus kind: sketches | words | dir");

  CLI::App* pretrain_cmd = app.add_subcommand(
      "pretrain", "train a cross-modal pretext model");
  add_common(pretrain_cmd, f);
  pretrain_cmd->add_option("--task", f.task,
                           "pretext task: vectorization | rasterization");
  pretrain_cmd->add_flag("--deterministic", f.deterministic,
                         "bitwise-reproducible run");
  pretrain_cmd->add_option("--coordinate-mode", f.coordinate_mode,
                           "sequence coordinates: absolute | offset");

  CLI::App* probe_cmd = app.add_subcommand(
      "probe", "linear probe on frozen checkpoint features");
  add_common(probe_cmd, f);
  probe_cmd->add_option("--checkpoint", f.checkpoint,
                        "checkpoint or pretrain run directory");
  probe_cmd->add_option("--depth", f.depth, "feature depth: final | block<k>");
  probe_cmd->add_option("--modality", f.modality,
                        "input view: raster | vector");

  CLI::App* retrieve_cmd = app.add_subcommand(
      "retrieve", "train an embedding head and rank the gallery");
  add_common(retrieve_cmd, f);
  retrieve_cmd->add_option("--checkpoint", f.checkpoint,
                           "checkpoint or pretrain run directory");
  retrieve_cmd->add_option("--depth", f.depth,
                           "feature depth: final | block<k>");
  retrieve_cmd->add_option("--modality", f.modality,
                           "input view: raster | vector");
  retrieve_cmd->add_option("--metric", f.metric,
                           "distance metric: euclidean | cosine");

  CLI::App* finetune_cmd = app.add_subcommand(
      "finetune", "semi-supervised fine-tuning from a checkpoint");
  add_common(finetune_cmd, f);
  finetune_cmd->add_option("--checkpoint", f.checkpoint,
                           "checkpoint or pretrain run directory");
  finetune_cmd->add_option("--fraction", f.fraction,
                           "labeled fraction of the training split");
  finetune_cmd->add_option("--freeze-depth", f.freeze_depth,
                           "-1 trains everything; k freezes stages 0..k");

  CLI::App* recognize_cmd = app.add_subcommand(
      "recognize", "train and evaluate the handwriting recognizer");
  add_common(recognize_cmd, f);
  recognize_cmd->add_option("--checkpoint", f.checkpoint,
                            "vectorization checkpoint seeding the encoder");
  recognize_cmd->add_option("--lexicon", f.lexicon,
                            "newline-delimited lexicon for correction");
  recognize_cmd->add_flag("--no-teacher-forcing", f.no_teacher_forcing,
                          "skip the teacher-forced accuracy metric");

  CLI::App* render_cmd = app.add_subcommand(
      "render", "write qualitative reconstructions from a checkpoint");
  add_common(render_cmd, f);
  render_cmd->add_option("--checkpoint", f.checkpoint,
                         "checkpoint or pretrain run directory");
  render_cmd->add_option("--count", f.render_count,
                         "number of test samples to render");
  render_cmd->add_flag("--no-teacher-forcing", f.no_teacher_forcing,
                       "decode autoregressively instead of teacher-forced");

  CLI::App* report_cmd = app.add_subcommand(
      "report", "aggregate run directories into a summary table");
  report_cmd->add_option("dirs", f.report_dirs, "run directories")->required();
  report_cmd->add_option("--out", f.out, "directory receiving the summary");

  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("sketchssl");
  for (const auto& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 1;
  }

  try {
    if (prepare->parsed()) return run_prepare_data(f, out);
    if (pretrain_cmd->parsed()) return run_pretrain(f, out);
    if (probe_cmd->parsed()) return run_probe(f, out);
    if (retrieve_cmd->parsed()) return run_retrieve(f, out);
    if (finetune_cmd->parsed()) return run_finetune(f, out);
    if (recognize_cmd->parsed()) return run_recognize(f, out);
    if (render_cmd->parsed()) return run_render(f, out);
    if (report_cmd->parsed()) return run_report(f, out);
    err << "sketchssl: no subcommand selected\n" << app.help();
    return 1;
  } catch (const Error& e) {
    err << "sketchssl: " << e.what() << '\n';
    if (e.code() == ErrorCode::DivergedLoss) return 3;
    if (e.code() == ErrorCode::ConfigError) {
      err << "run 'sketchssl --help' for usage\n";
      return 1;
    }
    return 2;
  } catch (const std::exception& e) {
    err << "sketchssl: " << e.what() << '\n';
    return 2;
  }
}

int dispatch(const std::vector<std::string>& args) {
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace sketchssl
