// Checkpoint files: "GMCK" magic + version, JSON header (model config,
// section names/shapes, seed, step count, provenance), then a little-endian
// f64 payload of all sections in declared order. The header records the
// payload hash, so tampering is detected on load.

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gm/common.hpp"
#include "gm/model.hpp"

namespace gm {

inline constexpr char kCheckpointMagic[4] = {'G', 'M', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  std::string stage = "init";
  std::uint64_t parent_hash = 0;  // payload hash of the consumed checkpoint; 0 for roots
  std::uint64_t config_hash = 0;
};

template <typename R>
struct Checkpoint {
  ParamVector<R> params;
  CheckpointMeta meta;
  std::uint64_t payload_hash = 0;  // filled on save/load
};

template <typename R>
std::uint64_t save_checkpoint(const Checkpoint<R>& ckpt, const std::filesystem::path& path) {
  std::vector<double> payload;
  payload.reserve(static_cast<std::size_t>(ckpt.params.total_size()));
  for (std::size_t s = 0; s < ckpt.params.num_sections(); ++s) {
    const auto& t = ckpt.params.section_at(s).t;
    for (std::int64_t i = 0; i < t.numel(); ++i) payload.push_back(double(t[i]));
  }
  std::uint64_t hash = fnv1a64(payload.data(), payload.size() * sizeof(double));

  nlohmann::json sections = nlohmann::json::array();
  for (std::size_t s = 0; s < ckpt.params.num_sections(); ++s) {
    const auto& sec = ckpt.params.section_at(s);
    sections.push_back({{"name", sec.name}, {"shape", sec.t.shape()}});
  }
  nlohmann::json header{{"config", ckpt.params.config()},
                        {"sections", sections},
                        {"seed", ckpt.meta.seed},
                        {"step", ckpt.meta.step},
                        {"stage", ckpt.meta.stage},
                        {"parent_hash", ckpt.meta.parent_hash},
                        {"config_hash", ckpt.meta.config_hash},
                        {"payload_hash", hash}};
  std::string hj = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot write " + path.string());
  f.write(kCheckpointMagic, 4);
  std::uint32_t ver = kCheckpointVersion;
  f.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
  std::uint64_t len = hj.size();
  f.write(reinterpret_cast<const char*>(&len), sizeof(len));
  f.write(hj.data(), static_cast<std::streamsize>(hj.size()));
  f.write(reinterpret_cast<const char*>(payload.data()),
          static_cast<std::streamsize>(payload.size() * sizeof(double)));
  if (!f) throw IoError("checkpoint: write failed for " + path.string());
  return hash;
}

template <typename R>
Checkpoint<R> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot open " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw IoError("checkpoint: bad magic in " + path.string());
  std::uint32_t ver = 0;
  f.read(reinterpret_cast<char*>(&ver), sizeof(ver));
  if (ver != kCheckpointVersion) throw IoError("checkpoint: unsupported version");
  std::uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string hj(len, '\0');
  f.read(hj.data(), static_cast<std::streamsize>(len));
  if (!f) throw IoError("checkpoint: truncated header");
  nlohmann::json header = nlohmann::json::parse(hj);

  Checkpoint<R> ckpt;
  ModelConfig cfg = header.at("config").get<ModelConfig>();
  ckpt.params = ParamVector<R>(cfg);
  ckpt.meta.seed = header.at("seed").get<std::uint64_t>();
  ckpt.meta.step = header.at("step").get<std::int64_t>();
  ckpt.meta.stage = header.at("stage").get<std::string>();
  ckpt.meta.parent_hash = header.at("parent_hash").get<std::uint64_t>();
  ckpt.meta.config_hash = header.at("config_hash").get<std::uint64_t>();

  std::vector<double> payload(static_cast<std::size_t>(ckpt.params.total_size()));
  f.read(reinterpret_cast<char*>(payload.data()),
         static_cast<std::streamsize>(payload.size() * sizeof(double)));
  if (!f) throw IoError("checkpoint: truncated payload");
  std::uint64_t hash = fnv1a64(payload.data(), payload.size() * sizeof(double));
  if (hash != header.at("payload_hash").get<std::uint64_t>())
    throw IoError("checkpoint: payload hash mismatch (file tampered or corrupt): " +
                  path.string());
  ckpt.payload_hash = hash;

  // Stored section layout must match what the config reconstructs.
  const auto& sections = header.at("sections");
  if (sections.size() != ckpt.params.num_sections())
    throw IoError("checkpoint: section count mismatch");
  for (std::size_t s = 0; s < sections.size(); ++s) {
    if (sections[s].at("name").get<std::string>() != ckpt.params.section_at(s).name)
      throw IoError("checkpoint: section order mismatch");
  }

  std::vector<R> flat(payload.size());
  for (std::size_t i = 0; i < payload.size(); ++i) flat[i] = static_cast<R>(payload[i]);
  ckpt.params.unflatten(flat);
  return ckpt;
}

}  // namespace gm
