#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sketchssl/data.hpp"

namespace sketchssl {

/// Baseline configuration document shared by every subcommand. Sections:
/// data (source + canvas), model (pretext architecture), pretrain (optimizer
/// and schedule), downstream (probe / retrieval / finetune / recognizer),
/// output (run directory root). Merge order is defaults < config file <
/// command-line overrides.
nlohmann::json default_run_config();

/// Recursively verifies that every key in doc also exists in schema at the
/// same nesting level. Unknown keys fail loudly instead of silently
/// defaulting.
void check_known_keys(const nlohmann::json& doc, const nlohmann::json& schema,
                      const std::string& where);

/// Deep merge: objects merge key-by-key, everything else (scalars, arrays)
/// is replaced wholesale. Overlay keys must already exist in base.
nlohmann::json merge_config(const nlohmann::json& base,
                            const nlohmann::json& overlay,
                            const std::string& where);

/// defaults < optional config file < overrides. The result carries every
/// section of default_run_config().
nlohmann::json resolve_run_config(const std::string& config_path,
                                  const nlohmann::json& overrides);

nlohmann::json read_json_file(const std::string& path);
void write_json_file(const std::string& path, const nlohmann::json& doc);

/// Output root precedence: SKETCHSSL_OUT environment variable, then the
/// config's output.root. An explicit --out directory bypasses the root
/// entirely (handled by the caller).
std::string resolve_output_root(const nlohmann::json& config);

/// Creates <root>/<UTC stamp>-seed<seed> and returns its path. Collisions
/// append -2, -3, ... so rapid launches never share a directory.
std::string make_run_dir(const std::string& root, std::uint64_t seed);

/// Materializes the data section: kind "sketches" or "words" generates the
/// synthetic corpus, kind "dir" loads a saved corpus from data.path.
std::pair<std::vector<LabeledSample>, DatasetSplit> load_dataset(
    const nlohmann::json& data);

/// Canvas geometry of the data section.
RasterConfig data_raster_config(const nlohmann::json& data);

}  // namespace sketchssl
