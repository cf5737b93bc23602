#pragma once

// Per-entity dense vectors stored in a compact binary container, with a JSON
// import path for small hand-written fixtures.
//
// Binary layout (little-endian): u32 magic, u32 version, u32 count, u32 dim,
// then count*dim f64 values, row-major by entity id.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hiercode/binary_io.hpp"
#include "hiercode/kg_data.hpp"
#include "hiercode/tensor.hpp"

namespace hiercode {

inline constexpr std::uint32_t kFeatureMagic = 0x54464348;  // "HCFT"
inline constexpr std::uint32_t kFeatureVersion = 1;

struct FeatureTable {
  Tensor vectors;                      // [count, dim]
  std::vector<unsigned char> present;  // 0 where the source had no vector for the entity

  std::size_t count() const { return vectors.rows(); }
  std::size_t dim() const { return vectors.rank() == 2 ? vectors.dim(1) : 0; }
  bool complete() const {
    for (auto p : present)
      if (!p) return false;
    return true;
  }

  static FeatureTable from_rows(const std::vector<std::vector<double>>& rows) {
    FeatureTable t;
    const std::size_t d = rows.empty() ? 0 : rows.front().size();
    t.vectors = Tensor(Shape{rows.size(), d});
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != d) fail<ShapeError>("feature row ", i, " has dimension ", rows[i].size(), ", expected ", d);
      std::copy(rows[i].begin(), rows[i].end(), t.vectors.row(i).begin());
    }
    t.present.assign(rows.size(), 1);
    return t;
  }
};

inline std::vector<char> encode_features(const FeatureTable& t) {
  if (!t.complete()) fail<IoError>("binary feature files require a vector for every entity");
  io::ByteWriter w;
  w.u32(kFeatureMagic);
  w.u32(kFeatureVersion);
  w.u32(static_cast<std::uint32_t>(t.count()));
  w.u32(static_cast<std::uint32_t>(t.dim()));
  for (double x : t.vectors.data) w.f64(x);
  return w.take();
}

inline FeatureTable decode_features(const std::vector<char>& bytes, const std::string& what = "feature file") {
  io::ByteReader r(bytes, what);
  if (r.u32() != kFeatureMagic) fail<IoError>(what, ": bad magic");
  if (const auto v = r.u32(); v != kFeatureVersion) fail<IoError>(what, ": unsupported version ", v);
  const std::size_t count = r.u32();
  const std::size_t dim = r.u32();
  if (r.remaining() != count * dim * 8) fail<IoError>(what, ": payload size does not match header");
  FeatureTable t;
  t.vectors = Tensor(Shape{count, dim});
  for (auto& x : t.vectors.data) x = r.f64();
  t.present.assign(count, 1);
  return t;
}

inline void save_features(const FeatureTable& t, const std::string& path) { io::write_file(path, encode_features(t)); }

inline FeatureTable load_features(const std::string& path) { return decode_features(io::read_file(path), path); }

// {"dim": d, "vectors": {"entity name": [..], ...}}. Entities missing from the
// object are marked absent; unknown names are an error.
inline FeatureTable features_from_json(const nlohmann::json& j, const KgDataset& ds) {
  const std::size_t dim = j.at("dim").get<std::size_t>();
  FeatureTable t;
  t.vectors = Tensor(Shape{ds.num_entities(), dim});
  t.present.assign(ds.num_entities(), 0);
  for (const auto& [name, vec] : j.at("vectors").items()) {
    if (!ds.entities.contains(name)) fail<IoError>("feature JSON names unknown entity '", name, "'");
    const auto values = vec.get<std::vector<double>>();
    if (values.size() != dim) fail<IoError>("feature JSON vector for '", name, "' has dimension ", values.size(), ", expected ", dim);
    const auto id = ds.entities.id(name);
    std::copy(values.begin(), values.end(), t.vectors.row(id).begin());
    t.present[id] = 1;
  }
  return t;
}

}  // namespace hiercode
