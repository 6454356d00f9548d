#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "sketchssl/params.hpp"

namespace sketchssl {

inline constexpr int kCheckpointFormatVersion = 1;

/// Everything in a checkpoint besides the tensors themselves.
struct CheckpointMeta {
  int format_version = kCheckpointFormatVersion;
  std::string task;
  nlohmann::json config = nlohmann::json::object();   // full run config echo
  long long epoch = 0;
  long long step = 0;
  long long adam_step = 0;
  nlohmann::json metrics = nlohmann::json::object();  // last logged record
  std::array<std::uint64_t, 4> rng_state{};
};

/// Writes manifest.json + params.bin into dir. Tensors are raw little-endian
/// float64 blobs, concatenated in manifest order (parameters sorted by name,
/// then Adam moments under opt.m. / opt.v. prefixes), each indexed with
/// shape, byte range, and SHA-256. Files land via write-temp + rename, and
/// the manifest is renamed last so a visible manifest always references a
/// complete blob.
void save_checkpoint(const std::filesystem::path& dir,
                     const ParameterStore& store, const CheckpointMeta& meta);

struct LoadedCheckpoint {
  ParameterStore store;
  CheckpointMeta meta;
};

/// Verifies per-tensor hashes and the blob length before returning.
/// Throws VersionMismatch for a foreign format_version and CorruptCheckpoint
/// for anything torn, truncated, or hash-inconsistent.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

/// Hex SHA-256 of a byte range (exposed for tests and the report command).
std::string sha256_hex(const void* bytes, std::size_t len);

}  // namespace sketchssl
