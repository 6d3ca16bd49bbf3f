#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "nwcrf/config.hpp"
#include "nwcrf/optimizer.hpp"

namespace nwcrf {

// On-disk model snapshot.
//
// Layout: magic "NWCF" | format version u32 LE | config block length u32 LE +
// UTF-8 `key=value` lines | tensor count u32 LE | per tensor: name length
// u16 LE, UTF-8 name, rank u8, extents u32 LE each, payload of 64-bit LE
// IEEE-754 values. Optimizer moments ride along as tensors named
// "opt.m.<param>" / "opt.v.<param>"; the step counter lives in the config
// block as `train.step`.
struct Checkpoint {
  uint32_t version = 1;
  ModelConfig config;
  int64_t step = 0;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

namespace detail {

inline void put_u16(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& data) : data_(data) {}

  uint8_t u8() { return static_cast<uint8_t>(take(1)[0]); }

  uint16_t u16() {
    const char* p = take(2);
    return static_cast<uint16_t>(static_cast<uint8_t>(p[0])) |
           static_cast<uint16_t>(static_cast<uint8_t>(p[1])) << 8;
  }

  uint32_t u32() {
    const char* p = take(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(p[i])) << (8 * i);
    return v;
  }

  double f64() {
    const char* p = take(8);
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(static_cast<uint8_t>(p[i])) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }

  std::string bytes(size_t n) { return std::string(take(n), n); }

  bool exhausted() const { return pos_ == data_.size(); }

 private:
  const char* take(size_t n) {
    if (pos_ + n > data_.size())
      throw CheckpointCorruptionError("checkpoint truncated at byte " + std::to_string(pos_));
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }

  const std::string& data_;
  size_t pos_ = 0;
};

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::string out;
  out += "NWCF";
  detail::put_u32(out, ckpt.version);

  std::string config_block;
  for (const auto& [k, v] : model_config_kv(ckpt.config)) config_block += k + "=" + v + "\n";
  config_block += "train.step=" + std::to_string(ckpt.step) + "\n";
  detail::put_u32(out, static_cast<uint32_t>(config_block.size()));
  out += config_block;

  detail::put_u32(out, static_cast<uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, tensor] : ckpt.tensors) {
    detail::put_u16(out, static_cast<uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(tensor.rank()));
    for (int64_t d = 0; d < tensor.rank(); ++d)
      detail::put_u32(out, static_cast<uint32_t>(tensor.extent(d)));
    for (int64_t i = 0; i < tensor.numel(); ++i) detail::put_f64(out, tensor[i]);
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw CheckpointError("short write to " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path);
  std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  detail::Reader r(data);

  if (r.bytes(4) != "NWCF") throw CheckpointFormatError("bad magic bytes in " + path);
  Checkpoint ckpt;
  ckpt.version = r.u32();
  if (ckpt.version != 1)
    throw CheckpointFormatError("unsupported checkpoint version " + std::to_string(ckpt.version));

  std::string config_block = r.bytes(r.u32());
  ModelConfig cfg;
  for (const auto& [k, v] : parse_kv_text(config_block)) {
    if (k == "train.step") {
      ckpt.step = detail::parse_int(k, v);
    } else if (!apply_model_kv(cfg, k, v)) {
      throw CheckpointFormatError("unknown checkpoint config key `" + k + "`");
    }
  }
  ckpt.config = cfg;

  uint32_t count = r.u32();
  ckpt.tensors.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = r.bytes(r.u16());
    uint8_t rank = r.u8();
    Extents extents;
    for (uint8_t d = 0; d < rank; ++d) extents.push_back(static_cast<int64_t>(r.u32()));
    Tensor t(extents);
    for (int64_t j = 0; j < t.numel(); ++j) t[j] = r.f64();
    ckpt.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (!r.exhausted()) throw CheckpointCorruptionError("trailing bytes after tensor payload");
  return ckpt;
}

// Parameters (and optionally optimizer state) -> checkpoint tensor list.
inline Checkpoint make_checkpoint(const ModelConfig& cfg, ModelParams& params, int64_t step,
                                  const AdamState* adam = nullptr) {
  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.step = step;
  std::vector<std::string> names;
  visit_params(params, [&](const std::string& name, Tensor& t) {
    ckpt.tensors.emplace_back(name, t);
    names.push_back(name);
  });
  if (adam) {
    for (size_t i = 0; i < adam->m.size(); ++i)
      ckpt.tensors.emplace_back("opt.m." + names[i], adam->m[i]);
    for (size_t i = 0; i < adam->v.size(); ++i)
      ckpt.tensors.emplace_back("opt.v." + names[i], adam->v[i]);
    ckpt.tensors.emplace_back("opt.step", Tensor::scalar(static_cast<double>(adam->step)));
  }
  return ckpt;
}

// Rebuilds model parameters from a checkpoint; every parameter tensor must be
// present with matching extents.
inline ModelParams params_from_checkpoint(const Checkpoint& ckpt) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : ckpt.tensors) by_name[name] = &t;
  ModelParams params = init_model(ckpt.config);
  visit_params(params, [&](const std::string& name, Tensor& t) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw CheckpointError("checkpoint mismatch: missing tensor `" + name + "`");
    if (it->second->extents() != t.extents())
      throw CheckpointError("checkpoint mismatch: tensor `" + name + "` has extents " +
                            extents_str(it->second->extents()) + ", model wants " +
                            extents_str(t.extents()));
    t = *it->second;
  });
  return params;
}

}  // namespace nwcrf
