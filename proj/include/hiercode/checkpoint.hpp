#pragma once

// Binary checkpoint container: header (m, K, d, step, entropy), model shape,
// then every named parameter tensor in name order. Little-endian throughout.

#include <cstdint>
#include <string>
#include <vector>

#include "hiercode/binary_io.hpp"
#include "hiercode/error.hpp"
#include "hiercode/model.hpp"
#include "hiercode/rq.hpp"

namespace hiercode {

inline constexpr std::uint32_t kCheckpointMagic = 0x4B514348;  // "HCQK"
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint64_t step = 0;
  double entropy = 0.0;  // mean codebook entropy Y at this step
  ModelConfig model;
  ParamSet params;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline std::vector<char> encode_checkpoint(const Checkpoint& c) {
  io::ByteWriter w;
  w.u32(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(c.model.levels));
  w.u32(static_cast<std::uint32_t>(c.model.codebook_size));
  w.u32(static_cast<std::uint32_t>(c.model.dim));
  w.u64(c.step);
  w.f64(c.entropy);
  w.u32(static_cast<std::uint32_t>(c.model.hidden.size()));
  for (auto h : c.model.hidden) w.u32(static_cast<std::uint32_t>(h));
  w.u32(static_cast<std::uint32_t>(c.model.recon_count));
  w.u32(static_cast<std::uint32_t>(c.model.decoder_layers));
  w.u32(static_cast<std::uint32_t>(c.model.decoder_heads));
  w.u32(static_cast<std::uint32_t>(c.model.ffn_mult));
  w.u32(static_cast<std::uint32_t>(c.params.size()));
  for (const auto& [name, t] : c.params) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape) w.u64(e);
    for (double x : t.data) w.f64(x);
  }
  return w.take();
}

inline Checkpoint decode_checkpoint(const std::vector<char>& bytes, const std::string& what = "checkpoint") {
  io::ByteReader r(bytes, what);
  if (r.u32() != kCheckpointMagic) fail<IoError>(what, ": bad magic");
  if (const auto v = r.u32(); v != kCheckpointVersion) fail<IoError>(what, ": unsupported version ", v);
  Checkpoint c;
  c.model.levels = r.u32();
  c.model.codebook_size = r.u32();
  c.model.dim = r.u32();
  c.step = r.u64();
  c.entropy = r.f64();
  c.model.hidden.resize(r.u32());
  for (auto& h : c.model.hidden) h = r.u32();
  c.model.recon_count = r.u32();
  c.model.decoder_layers = r.u32();
  c.model.decoder_heads = r.u32();
  c.model.ffn_mult = r.u32();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    Shape shape(r.u32());
    for (auto& e : shape) e = r.u64();
    const std::size_t n = shape_size(shape);
    if (r.remaining() < n * 8) fail<IoError>(what, ": tensor '", name, "' truncated");
    Tensor t(std::move(shape));
    for (auto& x : t.data) x = r.f64();
    c.params.emplace(std::move(name), std::move(t));
  }
  if (!r.done()) fail<IoError>(what, ": ", r.remaining(), " trailing bytes");
  for (std::size_t l = 0; l < c.model.levels; ++l) {
    auto it = c.params.find(codebook_name(l));
    if (it == c.params.end()) fail<IoError>(what, ": missing codebook ", l);
    if (it->second.shape != Shape{c.model.codebook_size, c.model.dim})
      fail<IoError>(what, ": codebook ", l, " has shape ", shape_str(it->second.shape), ", header says [",
                    c.model.codebook_size, ",", c.model.dim, "]");
  }
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) { io::write_file(path, encode_checkpoint(c)); }
inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(io::read_file(path), path); }

}  // namespace hiercode
