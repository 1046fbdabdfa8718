#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "spiga/backbone.hpp"
#include "spiga/config.hpp"
#include "spiga/error.hpp"
#include "spiga/jsonio.hpp"
#include "spiga/regressor.hpp"
#include "spiga/synthdata.hpp"

namespace spiga {

// Checkpoint container: binary file with magic "SPGA", a format version, the
// model configuration as embedded JSON, and the parameter tensors as raw
// little-endian doubles in deterministic visit order. A JSON manifest written
// next to the binary (<path>.json) lists every block's name, shape and byte
// offset so the file can be inspected without this library.
inline constexpr char kCheckpointMagic[4] = {'S', 'P', 'G', 'A'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  CascadeModel cascade;
  std::optional<BackboneModel> backbone;
};

inline std::string checkpoint_manifest_path(const std::string& path) { return path + ".json"; }

inline void save_checkpoint(const std::string& path, Checkpoint& ckpt) {
  std::vector<NamedParam> params;
  ckpt.cascade.visit_params(params);
  if (ckpt.backbone) ckpt.backbone->visit_params(params);

  nlohmann::json config{{"model", cascade_config_to_json(ckpt.cascade.config)}};
  if (ckpt.backbone) config["backbone"] = backbone_config_to_json(ckpt.backbone->config);
  const std::string config_bytes = config.dump();

  std::string blob;
  blob.append(kCheckpointMagic, 4);
  detail::put_u32(blob, kCheckpointVersion);
  detail::put_u64(blob, config_bytes.size());
  blob += config_bytes;
  detail::put_u64(blob, params.size());

  nlohmann::json manifest{{"version", kCheckpointVersion}, {"blocks", nlohmann::json::array()}};
  for (const NamedParam& p : params) {
    detail::put_u64(blob, p.tensor->v.size());
    nlohmann::json block{{"name", p.name}, {"shape", p.tensor->shape},
                         {"offset", blob.size()}, {"count", p.tensor->v.size()}};
    manifest["blocks"].push_back(std::move(block));
    detail::put_doubles(blob, p.tensor->v);
  }

  write_file_atomic(path, blob);
  write_file_atomic(checkpoint_manifest_path(path), manifest.dump(2) + "\n");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (blob.size() < 16) throw ParseError(path + ": truncated checkpoint header");
  if (std::memcmp(blob.data(), kCheckpointMagic, 4) != 0)
    throw ParseError(path + ": bad checkpoint magic (expected SPGA)");
  const std::uint32_t version = detail::get_u32(blob, 4);
  if (version != kCheckpointVersion)
    throw ParseError(path + ": unsupported checkpoint version " + std::to_string(version) +
                     " (expected " + std::to_string(kCheckpointVersion) + ")");
  std::size_t pos = 8;
  const std::uint64_t config_len = detail::get_u64(blob, pos);
  pos += 8;
  // Compared this way round so absurd lengths cannot overflow the addition.
  if (config_len > blob.size() - pos) throw ParseError(path + ": truncated config block");
  nlohmann::json config;
  try {
    config = nlohmann::json::parse(blob.substr(pos, config_len));
  } catch (const std::exception& e) {
    throw ParseError(path + ": invalid config block: " + e.what());
  }
  pos += config_len;
  reject_unknown_keys(config, {"model", "backbone"}, path + " config");
  if (!config.contains("model")) throw ParseError(path + ": config is missing 'model'");

  Checkpoint ckpt;
  // Parameter storage is fully overwritten below, so the init seed is moot.
  ckpt.cascade =
      CascadeModel::init(cascade_config_from_json(config.at("model"), path + " config.model"), 0);
  if (config.contains("backbone"))
    ckpt.backbone = BackboneModel::init(
        backbone_config_from_json(config.at("backbone"), path + " config.backbone"), 0);

  std::vector<NamedParam> params;
  ckpt.cascade.visit_params(params);
  if (ckpt.backbone) ckpt.backbone->visit_params(params);

  if (pos + 8 > blob.size()) throw ParseError(path + ": truncated block table");
  const std::uint64_t block_count = detail::get_u64(blob, pos);
  pos += 8;
  if (block_count != params.size())
    throw ParseError(path + ": checkpoint has " + std::to_string(block_count) +
                     " parameter blocks but the config implies " + std::to_string(params.size()));
  for (NamedParam& p : params) {
    if (pos + 8 > blob.size()) throw ParseError(path + ": truncated block header for " + p.name);
    const std::uint64_t count = detail::get_u64(blob, pos);
    pos += 8;
    if (count != p.tensor->v.size())
      throw ParseError(path + ": block " + p.name + " has " + std::to_string(count) +
                       " values but the config implies " + std::to_string(p.tensor->v.size()));
    const std::size_t bytes = count * sizeof(double);
    if (pos + bytes > blob.size()) throw ParseError(path + ": truncated data for block " + p.name);
    std::memcpy(p.tensor->v.data(), blob.data() + pos, bytes);
    pos += bytes;
  }
  if (pos != blob.size())
    throw ParseError(path + ": " + std::to_string(blob.size() - pos) +
                     " trailing bytes after the last parameter block");
  return ckpt;
}

}  // namespace spiga
