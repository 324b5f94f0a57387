#pragma once
// Versioned binary weight container. Layout: magic "DFCK", format version,
// a JSON meta blob (model config + steps_done), then one entry per
// parameter: dot-separated name, dtype tag (0 = f64, 1 = f32), dims, flat
// little-endian data. The loader rebuilds the model from the embedded
// config and insists the stored name set and shapes match it exactly.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "docfuse/common.hpp"
#include "docfuse/model.hpp"
#include "docfuse/tensor.hpp"
#include "json.hpp"

namespace docfuse {

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

constexpr uint32_t kCheckpointVersion = 1;
inline const char kCheckpointMagic[4] = {'D', 'F', 'C', 'K'};

template <typename S>
constexpr uint8_t dtype_tag() {
  static_assert(std::is_same_v<S, double> || std::is_same_v<S, float>);
  return std::is_same_v<S, double> ? 0 : 1;
}

struct RawEntry {
  std::string name;
  uint8_t dtype = 0;
  Shape dims;
  std::vector<uint8_t> bytes;
};

struct RawCheckpoint {
  uint32_t version = kCheckpointVersion;
  nlohmann::json meta;
  std::vector<RawEntry> entries;
};

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct ByteReader {
  const std::vector<uint8_t>& buf;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > buf.size()) throw IoError("truncated checkpoint");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  uint8_t u8() {
    need(1);
    return buf[pos++];
  }
  std::string str(size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
  std::vector<uint8_t> bytes(size_t n) {
    need(n);
    std::vector<uint8_t> b(buf.begin() + static_cast<int64_t>(pos),
                           buf.begin() + static_cast<int64_t>(pos + n));
    pos += n;
    return b;
  }
};

}  // namespace detail

inline void write_raw_checkpoint(const std::string& path, const RawCheckpoint& ckpt) {
  std::string out;
  out.append(kCheckpointMagic, 4);
  detail::put_u32(out, ckpt.version);
  const std::string meta = ckpt.meta.dump();
  detail::put_u64(out, meta.size());
  out += meta;
  detail::put_u64(out, ckpt.entries.size());
  for (const auto& e : ckpt.entries) {
    detail::put_u64(out, e.name.size());
    out += e.name;
    out.push_back(static_cast<char>(e.dtype));
    detail::put_u64(out, e.dims.size());
    for (int64_t d : e.dims) detail::put_u64(out, static_cast<uint64_t>(d));
    detail::put_u64(out, e.bytes.size());
    out.append(reinterpret_cast<const char*>(e.bytes.data()), e.bytes.size());
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("failed writing " + path);
}

inline RawCheckpoint read_raw_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)),
                           std::istreambuf_iterator<char>());
  detail::ByteReader r{buf};
  if (r.str(4) != std::string(kCheckpointMagic, 4))
    throw IoError(path + " is not a checkpoint file");
  RawCheckpoint ckpt;
  ckpt.version = r.u32();
  if (ckpt.version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(ckpt.version));
  const uint64_t meta_len = r.u64();
  try {
    ckpt.meta = nlohmann::json::parse(r.str(meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad checkpoint meta: " + std::string(e.what()));
  }
  const uint64_t n = r.u64();
  for (uint64_t i = 0; i < n; ++i) {
    RawEntry e;
    e.name = r.str(r.u64());
    e.dtype = r.u8();
    const uint64_t rank = r.u64();
    for (uint64_t k = 0; k < rank; ++k) e.dims.push_back(static_cast<int64_t>(r.u64()));
    e.bytes = r.bytes(r.u64());
    ckpt.entries.push_back(std::move(e));
  }
  if (r.pos != buf.size()) throw IoError("trailing bytes in checkpoint " + path);
  return ckpt;
}

inline nlohmann::json config_to_json(const ModelConfig& cfg) {
  return nlohmann::json{{"d", cfg.d},
                        {"num_layers_enc", cfg.num_layers_enc},
                        {"num_layers_dec", cfg.num_layers_dec},
                        {"num_heads", cfg.num_heads},
                        {"d_ff", cfg.d_ff},
                        {"vocab_size", cfg.vocab_size},
                        {"c", cfg.c},
                        {"o", cfg.o},
                        {"l", cfg.l},
                        {"bias",
                         {{"num_heads", cfg.bias.num_heads},
                          {"num_buckets_1d", cfg.bias.num_buckets_1d},
                          {"max_distance_1d", cfg.bias.max_distance_1d},
                          {"num_buckets_2d", cfg.bias.num_buckets_2d},
                          {"max_distance_2d", cfg.bias.max_distance_2d}}},
                        {"d_vis", cfg.d_vis},
                        {"dropout", cfg.dropout},
                        {"fusion_every_layer", cfg.fusion_every_layer},
                        {"fusion_after_ffn", cfg.fusion_after_ffn},
                        {"recompute_cross_kv", cfg.recompute_cross_kv},
                        {"chunk_local_positions", cfg.chunk_local_positions},
                        {"use_visual", cfg.use_visual}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig cfg;
    cfg.d = j.at("d").get<int64_t>();
    cfg.num_layers_enc = j.at("num_layers_enc").get<int64_t>();
    cfg.num_layers_dec = j.at("num_layers_dec").get<int64_t>();
    cfg.num_heads = j.at("num_heads").get<int64_t>();
    cfg.d_ff = j.at("d_ff").get<int64_t>();
    cfg.vocab_size = j.at("vocab_size").get<int64_t>();
    cfg.c = j.at("c").get<int64_t>();
    cfg.o = j.at("o").get<int64_t>();
    cfg.l = j.at("l").get<int64_t>();
    const auto& b = j.at("bias");
    cfg.bias.num_heads = b.at("num_heads").get<int>();
    cfg.bias.num_buckets_1d = b.at("num_buckets_1d").get<int>();
    cfg.bias.max_distance_1d = b.at("max_distance_1d").get<int64_t>();
    cfg.bias.num_buckets_2d = b.at("num_buckets_2d").get<int>();
    cfg.bias.max_distance_2d = b.at("max_distance_2d").get<int64_t>();
    cfg.d_vis = j.at("d_vis").get<int64_t>();
    cfg.dropout = j.at("dropout").get<double>();
    cfg.fusion_every_layer = j.at("fusion_every_layer").get<bool>();
    cfg.fusion_after_ffn = j.at("fusion_after_ffn").get<bool>();
    cfg.recompute_cross_kv = j.at("recompute_cross_kv").get<bool>();
    cfg.chunk_local_positions = j.at("chunk_local_positions").get<bool>();
    cfg.use_visual = j.at("use_visual").get<bool>();
    cfg.validate();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("bad model config in checkpoint: " + std::string(e.what()));
  }
}

template <typename S>
void save_checkpoint(const std::string& path, const ModelParams<S>& params,
                     int64_t steps_done) {
  RawCheckpoint ckpt;
  ckpt.meta = nlohmann::json{{"config", config_to_json(params.cfg)},
                             {"steps_done", steps_done}};
  for (const auto& [name, t] : params.named()) {
    RawEntry e;
    e.name = name;
    e.dtype = dtype_tag<S>();
    e.dims = t->shape;
    e.bytes.resize(t->data.size() * sizeof(S));
    std::memcpy(e.bytes.data(), t->data.data(), e.bytes.size());
    ckpt.entries.push_back(std::move(e));
  }
  write_raw_checkpoint(path, ckpt);
}

template <typename S>
struct LoadedCheckpoint {
  ModelParams<S> params;
  int64_t steps_done = 0;
};

template <typename S>
LoadedCheckpoint<S> load_checkpoint(const std::string& path) {
  RawCheckpoint ckpt = read_raw_checkpoint(path);
  if (!ckpt.meta.contains("config") || !ckpt.meta.contains("steps_done"))
    throw ValidationError("checkpoint meta lacks config or steps_done");
  LoadedCheckpoint<S> out;
  const ModelConfig cfg = config_from_json(ckpt.meta.at("config"));
  out.steps_done = ckpt.meta.at("steps_done").get<int64_t>();
  Rng rng(0);  // shapes only; every value is overwritten below
  out.params = ModelParams<S>::init(cfg, rng);

  std::map<std::string, const RawEntry*> by_name;
  for (const auto& e : ckpt.entries) {
    if (!by_name.emplace(e.name, &e).second)
      throw ValidationError("duplicate checkpoint entry " + e.name);
  }
  size_t used = 0;
  for (const auto& [name, t] : out.params.named()) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ValidationError("checkpoint is missing entry " + name);
    const RawEntry& e = *it->second;
    if (e.dtype != dtype_tag<S>())
      throw ValidationError("checkpoint entry " + name + " has dtype tag " +
                            std::to_string(e.dtype) + ", expected " +
                            std::to_string(dtype_tag<S>()));
    if (e.dims != t->shape)
      throw ValidationError("checkpoint entry " + name + " has shape " + shape_str(e.dims) +
                            ", expected " + shape_str(t->shape));
    if (e.bytes.size() != t->data.size() * sizeof(S))
      throw ValidationError("checkpoint entry " + name + " has wrong byte length");
    std::memcpy(t->data.data(), e.bytes.data(), e.bytes.size());
    ++used;
  }
  if (used != by_name.size())
    throw ValidationError("checkpoint holds " + std::to_string(by_name.size() - used) +
                          " unknown entries");
  return out;
}

}  // namespace docfuse
