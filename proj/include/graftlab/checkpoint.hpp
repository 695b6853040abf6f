#pragma once

// Checkpoint file layout:
//   "GRAFTCKPT1"                  10 bytes
//   header length                 u64, little-endian
//   header                        JSON: format_version, config, manifest, meta
//   tensor data                   float64, little-endian, in manifest order
//
// Manifest entries: {component, part ("weight"|"bias"), shape, offset, count};
// offsets are byte offsets from the start of the tensor data.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "graftlab/error.hpp"
#include "graftlab/model.hpp"
#include "graftlab/util.hpp"
#include "json.hpp"

namespace graftlab {

inline constexpr char kCheckpointMagic[] = "GRAFTCKPT1";
inline constexpr std::size_t kCheckpointMagicLen = 10;
inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline void put_f64_le(std::string& out, double d) { put_u64_le(out, std::bit_cast<std::uint64_t>(d)); }

inline double get_f64_le(const unsigned char* p) { return std::bit_cast<double>(get_u64_le(p)); }

}  // namespace detail

// Stable content hash of a parameter table (config + every tensor).
inline std::string params_hash(const ModelParams& p) {
  Fnv1a h;
  h.update(nlohmann::json(p.config()).dump());
  for (std::size_t s = 0; s < p.slot_count(); ++s) {
    for (const Tensor* t : {&p.slot(s).weight, &p.slot(s).bias}) {
      h.update_u64(t->size());
      for (double v : t->data) h.update_u64(std::bit_cast<std::uint64_t>(v));
    }
  }
  return h.hex();
}

inline std::string encode_checkpoint(const ModelParams& params, const nlohmann::json& meta = {}) {
  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  const ModelConfig& cfg = params.config();
  for (std::size_t s = 0; s < params.slot_count(); ++s) {
    const auto& c = params.slot(s);
    for (auto [part, t] : {std::pair{"weight", &c.weight}, std::pair{"bias", &c.bias}}) {
      if (t->empty()) continue;
      manifest.push_back({{"component", cfg.component_at(s).name()},
                          {"part", part},
                          {"shape", t->shape},
                          {"offset", offset},
                          {"count", t->size()}});
      offset += t->size() * sizeof(double);
    }
  }
  nlohmann::json header = {{"format_version", kCheckpointVersion},
                           {"config", cfg},
                           {"manifest", manifest},
                           {"data_bytes", offset},
                           {"meta", meta.is_null() ? nlohmann::json::object() : meta}};
  std::string head = header.dump();
  std::string out(kCheckpointMagic, kCheckpointMagicLen);
  detail::put_u64_le(out, head.size());
  out += head;
  out.reserve(out.size() + offset);
  for (std::size_t s = 0; s < params.slot_count(); ++s) {
    for (const Tensor* t : {&params.slot(s).weight, &params.slot(s).bias})
      for (double v : t->data) detail::put_f64_le(out, v);
  }
  return out;
}

struct LoadedCheckpoint {
  ModelParams params;
  nlohmann::json meta;
};

// Throws FormatError on bad magic/version/truncation, ShapeError when the
// manifest disagrees with the embedded config or with `expected`.
inline LoadedCheckpoint decode_checkpoint(const std::string& bytes,
                                          const std::optional<ModelConfig>& expected = std::nullopt) {
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < kCheckpointMagicLen + 8 ||
      std::memcmp(bytes.data(), kCheckpointMagic, kCheckpointMagicLen) != 0) {
    throw FormatError("not a checkpoint: bad magic bytes");
  }
  std::uint64_t head_len = detail::get_u64_le(raw + kCheckpointMagicLen);
  const std::size_t data_start = kCheckpointMagicLen + 8 + head_len;
  if (head_len > bytes.size() || data_start > bytes.size()) {
    throw FormatError("checkpoint truncated inside header");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(kCheckpointMagicLen + 8, head_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is not JSON: ") + e.what());
  }
  if (header.value("format_version", -1) != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + header.value("format_version", nlohmann::json()).dump());
  }
  ModelConfig cfg;
  try {
    cfg = header.at("config").get<ModelConfig>();
    cfg.validate();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint config: ") + e.what());
  } catch (const ConfigError& e) {
    throw ShapeError(std::string("bad checkpoint config: ") + e.what());
  }
  if (expected && !(*expected == cfg)) {
    throw ShapeError("checkpoint config " + nlohmann::json(cfg).dump() + " differs from expected " +
                     nlohmann::json(*expected).dump());
  }
  ModelParams params(cfg);
  const std::size_t data_bytes = bytes.size() - data_start;
  std::vector<bool> seen(params.slot_count() * 2, false);
  for (const auto& e : header.at("manifest")) {
    ComponentId id = ComponentId::parse(e.at("component").get<std::string>());
    std::size_t slot;
    try {
      slot = cfg.slot(id);
    } catch (const ConfigError& err) {
      throw ShapeError(std::string("manifest component outside config: ") + err.what());
    }
    std::string part = e.at("part");
    if (part != "weight" && part != "bias") throw FormatError("bad manifest part " + part);
    Tensor& t = part == "weight" ? params.slot(slot).weight : params.slot(slot).bias;
    Shape shape = e.at("shape").get<Shape>();
    if (t.empty() || shape != t.shape) {
      throw ShapeError(id.name() + "." + part + ": file shape " + to_string(shape) +
                       " vs config shape " + to_string(t.shape));
    }
    std::uint64_t offset = e.at("offset"), count = e.at("count");
    if (count != t.size() || offset + count * 8 > data_bytes) {
      throw FormatError(id.name() + "." + part + ": buffer outside data section");
    }
    for (std::size_t i = 0; i < count; ++i)
      t.data[i] = detail::get_f64_le(raw + data_start + offset + i * 8);
    seen[slot * 2 + (part == "bias")] = true;
  }
  for (std::size_t s = 0; s < params.slot_count(); ++s) {
    if ((!params.slot(s).weight.empty() && !seen[s * 2]) ||
        (!params.slot(s).bias.empty() && !seen[s * 2 + 1])) {
      throw ShapeError("checkpoint is missing " + cfg.component_at(s).name());
    }
  }
  return {std::move(params), header.value("meta", nlohmann::json::object())};
}

inline void save_checkpoint(const ModelParams& params, const std::filesystem::path& path,
                            const nlohmann::json& meta = {}) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write checkpoint " + path.string());
  std::string bytes = encode_checkpoint(params, meta);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed for " + path.string());
}

inline LoadedCheckpoint load_checkpoint_with_meta(const std::filesystem::path& path,
                                                  const std::optional<ModelConfig>& expected = std::nullopt) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, expected);
}

inline ModelParams load_checkpoint(const std::filesystem::path& path,
                                   const std::optional<ModelConfig>& expected = std::nullopt) {
  return load_checkpoint_with_meta(path, expected).params;
}

}  // namespace graftlab
