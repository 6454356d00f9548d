#include "sketchssl/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstdio>
#include <fstream>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian raw doubles");

namespace sketchssl {
namespace {

using nlohmann::json;

struct BlobEntry {
  std::string name;
  const Tensor* tensor;
};

std::vector<BlobEntry> blob_order(const ParameterStore& store) {
  std::vector<BlobEntry> entries;
  for (const auto& [name, t] : store.tensors) entries.push_back({name, &t});
  for (const auto& [name, t] : store.adam_m)
    entries.push_back({"opt.m." + name, &t});
  for (const auto& [name, t] : store.adam_v)
    entries.push_back({"opt.v." + name, &t});
  return entries;
}

void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorCode::IoError, "cannot open " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(out.good(), ErrorCode::IoError, "short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  require(!ec, ErrorCode::IoError,
          "rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

}  // namespace

std::string sha256_hex(const void* bytes, std::size_t len) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int digest_len = 0;
  require(EVP_Digest(bytes, len, digest, &digest_len, EVP_sha256(), nullptr) == 1,
          ErrorCode::IoError, "SHA-256 computation failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(digest_len * 2);
  for (unsigned int i = 0; i < digest_len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xf];
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& dir,
                     const ParameterStore& store, const CheckpointMeta& meta) {
  std::filesystem::create_directories(dir);

  std::string blob;
  json index = json::array();
  for (const auto& entry : blob_order(store)) {
    const Tensor& t = *entry.tensor;
    const std::size_t nbytes = t.numel() * sizeof(double);
    json item;
    item["name"] = entry.name;
    item["dtype"] = "f64";
    item["shape"] = t.shape;
    item["offset"] = blob.size();
    item["nbytes"] = nbytes;
    item["sha256"] = sha256_hex(t.data.data(), nbytes);
    index.push_back(std::move(item));
    blob.append(reinterpret_cast<const char*>(t.data.data()), nbytes);
  }

  json manifest;
  manifest["format_version"] = meta.format_version;
  manifest["task"] = meta.task;
  manifest["config"] = meta.config;
  manifest["epoch"] = meta.epoch;
  manifest["step"] = meta.step;
  manifest["adam_step"] = meta.adam_step;
  manifest["metrics"] = meta.metrics;
  // u64 does not survive JSON's double representation; keep decimal strings.
  json rng = json::array();
  for (std::uint64_t w : meta.rng_state) rng.push_back(std::to_string(w));
  manifest["rng_state"] = std::move(rng);
  manifest["tensors"] = std::move(index);
  manifest["blob_bytes"] = blob.size();

  atomic_write(dir / "params.bin", blob);
  atomic_write(dir / "manifest.json", manifest.dump(2) + "\n");
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  require(mf.good(), ErrorCode::CorruptCheckpoint,
          "missing manifest.json in " + dir.string());
  json manifest;
  try {
    mf >> manifest;
  } catch (const json::exception& e) {
    fail(ErrorCode::CorruptCheckpoint,
         "unparseable manifest in " + dir.string() + ": " + e.what());
  }

  require(manifest.contains("format_version") &&
              manifest["format_version"].is_number_integer(),
          ErrorCode::CorruptCheckpoint, "manifest lacks format_version");
  const int version = manifest["format_version"].get<int>();
  require(version == kCheckpointFormatVersion, ErrorCode::VersionMismatch,
          "checkpoint format_version " + std::to_string(version) +
              ", expected " + std::to_string(kCheckpointFormatVersion));

  std::ifstream bf(dir / "params.bin", std::ios::binary);
  require(bf.good(), ErrorCode::CorruptCheckpoint,
          "missing params.bin in " + dir.string());
  std::string blob((std::istreambuf_iterator<char>(bf)),
                   std::istreambuf_iterator<char>());

  LoadedCheckpoint out;
  out.meta.format_version = version;
  try {
    out.meta.task = manifest.at("task").get<std::string>();
    out.meta.config = manifest.at("config");
    out.meta.epoch = manifest.at("epoch").get<long long>();
    out.meta.step = manifest.at("step").get<long long>();
    out.meta.adam_step = manifest.at("adam_step").get<long long>();
    out.meta.metrics = manifest.at("metrics");
    const auto& rng = manifest.at("rng_state");
    require(rng.is_array() && rng.size() == 4, ErrorCode::CorruptCheckpoint,
            "rng_state must have 4 words");
    for (std::size_t i = 0; i < 4; ++i)
      out.meta.rng_state[i] = std::stoull(rng[i].get<std::string>());

    const std::size_t blob_bytes = manifest.at("blob_bytes").get<std::size_t>();
    require(blob.size() == blob_bytes, ErrorCode::CorruptCheckpoint,
            "params.bin is " + std::to_string(blob.size()) + " bytes, manifest says " +
                std::to_string(blob_bytes));

    std::size_t covered = 0;
    for (const auto& item : manifest.at("tensors")) {
      const std::string name = item.at("name").get<std::string>();
      require(item.at("dtype").get<std::string>() == "f64",
              ErrorCode::CorruptCheckpoint, "unsupported dtype for " + name);
      const auto shape = item.at("shape").get<std::vector<std::size_t>>();
      const std::size_t offset = item.at("offset").get<std::size_t>();
      const std::size_t nbytes = item.at("nbytes").get<std::size_t>();
      require(offset == covered, ErrorCode::CorruptCheckpoint,
              "tensor '" + name + "' offset overlaps or leaves a gap");
      require(offset + nbytes <= blob.size(), ErrorCode::CorruptCheckpoint,
              "tensor '" + name + "' extends past params.bin (truncated blob)");
      require(nbytes == Tensor::numel_of(shape) * sizeof(double),
              ErrorCode::CorruptCheckpoint,
              "tensor '" + name + "' byte length does not match its shape");
      require(sha256_hex(blob.data() + offset, nbytes) ==
                  item.at("sha256").get<std::string>(),
              ErrorCode::CorruptCheckpoint, "hash mismatch for '" + name + "'");
      covered = offset + nbytes;

      Tensor t(shape);
      std::memcpy(t.data.data(), blob.data() + offset, nbytes);
      if (name.rfind("opt.m.", 0) == 0) {
        out.store.adam_m[name.substr(6)] = std::move(t);
      } else if (name.rfind("opt.v.", 0) == 0) {
        out.store.adam_v[name.substr(6)] = std::move(t);
      } else {
        out.store.tensors[name] = std::move(t);
      }
    }
    require(covered == blob.size(), ErrorCode::CorruptCheckpoint,
            "params.bin has trailing bytes not covered by the manifest");
  } catch (const json::exception& e) {
    fail(ErrorCode::CorruptCheckpoint,
         "malformed manifest in " + dir.string() + ": " + e.what());
  }
  return out;
}

}  // namespace sketchssl
