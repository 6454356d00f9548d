#include "sketchssl/runconfig.hpp"

#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>

#include "sketchssl/error.hpp"
#include "sketchssl/pretrain.hpp"

namespace sketchssl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json default_recognizer_model() {
  ModelConfig m;
  m.image_encoder.family = "word-conv-blstm";
  m.image_encoder.blocks = 3;
  m.image_encoder.blstm_hidden = m.d / 2;
  return model_config_json(m);
}

void merge_into(json& base, const json& overlay) {
  for (const auto& [key, value] : overlay.items()) {
    if (value.is_object() && base[key].is_object())
      merge_into(base[key], value);
    else
      base[key] = value;
  }
}

}  // namespace

json default_run_config() {
  json pretrain = pretrain_config_json(PretrainConfig{});
  json model = pretrain["model"];
  json raster = pretrain["raster"];
  // Geometry and run-dir placement live in their own sections.
  pretrain.erase("model");
  pretrain.erase("raster");
  pretrain.erase("out_dir");

  json data{{"kind", "sketches"},
            {"path", ""},
            {"classes", json::array()},
            {"per_class", 100},
            {"jitter", 0.01},
            {"rdp_epsilon", 0.01},
            {"alphabet", json::array()},
            {"count", 100},
            {"min_length", 2},
            {"max_length", 5},
            {"t_max", 64},
            {"seed", 0},
            {"raster", raster}};

  json downstream{
      {"checkpoint", ""},
      {"depth", "final"},
      {"modality", "raster"},
      {"probe", {{"epochs", 100}, {"lr", 1e-2}}},
      {"retrieval",
       {{"embed_dim", 256},
        {"margin", 0.2},
        {"epochs", 50},
        {"lr", 1e-3},
        {"seed", 0},
        {"metric", "euclidean"}}},
      {"finetune",
       {{"fraction", 0.1},
        {"freeze_depth", -1},
        {"epochs", 30},
        {"lr", 1e-3},
        {"batch_size", 32},
        {"probe_epochs", 100},
        {"probe_lr", 1e-2},
        {"seed", 0}}},
      {"recognizer",
       {{"encoder", "image"},
        {"model", default_recognizer_model()},
        {"online", {{"layers", 4}, {"hidden", 32}}},
        {"decoder", {{"hidden", 64}, {"attn_dim", 32}, {"embed_dim", 16}}},
        {"t_max", 64},
        {"max_text_len", 8},
        {"lr", 1e-3},
        {"batch_size", 8},
        {"epochs", 200},
        {"seed", 0},
        {"init_checkpoint", ""},
        {"lexicon", ""},
        {"teacher_forcing_eval", true}}},
      {"render", {{"count", 4}}}};

  return json{{"data", data},
              {"model", model},
              {"pretrain", pretrain},
              {"downstream", downstream},
              {"output", {{"root", "runs"}}}};
}

void check_known_keys(const json& doc, const json& schema,
                      const std::string& where) {
  require(doc.is_object(), ErrorCode::ConfigError,
          where + ": expected a JSON object");
  for (const auto& [key, value] : doc.items()) {
    require(schema.contains(key), ErrorCode::ConfigError,
            where + ": unknown key '" + key + "'");
    const json& sv = schema.at(key);
    if (sv.is_object()) {
      require(value.is_object(), ErrorCode::ConfigError,
              where + "." + key + ": expected an object");
      check_known_keys(value, sv, where + "." + key);
    } else {
      require(!value.is_object(), ErrorCode::ConfigError,
              where + "." + key + ": unexpected object");
    }
  }
}

json merge_config(const json& base, const json& overlay,
                  const std::string& where) {
  check_known_keys(overlay, base, where);
  json out = base;
  merge_into(out, overlay);
  return out;
}

json resolve_run_config(const std::string& config_path, const json& overrides) {
  json cfg = default_run_config();
  if (!config_path.empty())
    cfg = merge_config(cfg, read_json_file(config_path), "config");
  if (!overrides.is_null() && !overrides.empty())
    cfg = merge_config(cfg, overrides, "flags");
  return cfg;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::IoError,
          "config: cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorCode::ConfigError,
         "config: '" + path + "' is not valid JSON: " + e.what());
  }
}

void write_json_file(const std::string& path, const json& doc) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::IoError,
          "config: cannot write '" + path + "'");
  out << doc.dump(2) << '\n';
  require(static_cast<bool>(out), ErrorCode::IoError,
          "config: failed writing '" + path + "'");
}

std::string resolve_output_root(const json& config) {
  if (const char* env = std::getenv("SKETCHSSL_OUT"); env && *env)
    return env;
  return config.at("output").value("root", "runs");
}

std::string make_run_dir(const std::string& root, std::uint64_t seed) {
  require(!root.empty(), ErrorCode::ConfigError,
          "run config: output root is empty");
  std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
  fs::path base =
      fs::path(root) / (std::string(stamp) + "-seed" + std::to_string(seed));
  fs::path dir = base;
  for (int n = 2; fs::exists(dir); ++n)
    dir = fs::path(base.string() + "-" + std::to_string(n));
  fs::create_directories(dir);
  return dir.string();
}

std::pair<std::vector<LabeledSample>, DatasetSplit> load_dataset(
    const json& data) {
  const std::string kind = data.value("kind", "sketches");
  if (kind == "sketches") {
    SyntheticSketchSpec spec;
    auto classes = data.value("classes", std::vector<std::string>{});
    if (!classes.empty()) spec.classes = std::move(classes);
    spec.per_class = data.value("per_class", spec.per_class);
    spec.jitter = data.value("jitter", spec.jitter);
    spec.rdp_epsilon = data.value("rdp_epsilon", spec.rdp_epsilon);
    spec.t_max = data.value("t_max", spec.t_max);
    spec.seed = data.value("seed", spec.seed);
    return make_synthetic_sketches(spec);
  }
  if (kind == "words") {
    SyntheticWordSpec spec;
    auto alphabet = data.value("alphabet", std::vector<std::string>{});
    if (!alphabet.empty()) spec.alphabet = std::move(alphabet);
    spec.count = data.value("count", spec.count);
    spec.min_length = data.value("min_length", spec.min_length);
    spec.max_length = data.value("max_length", spec.max_length);
    spec.seed = data.value("seed", spec.seed);
    return make_synthetic_words(spec);
  }
  if (kind == "dir") {
    const std::string path = data.value("path", "");
    require(!path.empty(), ErrorCode::ConfigError,
            "data: kind 'dir' requires data.path");
    return load_corpus(path);
  }
  fail(ErrorCode::ConfigError,
       "data: unknown kind '" + kind + "' (expected sketches, words, or dir)");
}

RasterConfig data_raster_config(const json& data) {
  return raster_config_from_json(data.at("raster"));
}

}  // namespace sketchssl
